//! Influence function of the Merton value functional with respect to the
//! drift prior, and the first-order Wasserstein worst-case pushforward.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{DrbcError, Result};
use crate::market::{fmt_f64, MarketSpec};
use crate::merton::{dot, power_moment, PriorKernel};
use crate::prior::EmpiricalPrior;
use crate::quadrature::{pairwise_sum, GaussianRule};
use crate::utility::PowerUtility;

/// `𝒥(ℚ) = ∫ F_ℚ(T,y)^{1/(1−α)} φ_T(y) dy`. The value function is a monotone
/// transform of it, increasing for α ∈ (0,1) and decreasing for α < 0.
pub fn j_functional(
    prior: &EmpiricalPrior,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    crate::merton::budget_moment(prior, utility, market, rule)
}

/// `log F(T, ·)` on the nodes `y_j = √T·u_j`, shared by every per-atom
/// integral so that all of them see the same quadrature error.
pub(crate) struct TerminalField<'a> {
    rule: &'a GaussianRule,
    market: &'a MarketSpec,
    log_f: Vec<f64>,
    root: f64,
    horizon: f64,
}

/// `(∫ F^β L_T(b,·) φ_T, ∫ F^β ∇_b L_T(b,·) φ_T)` for one drift `b`.
pub(crate) struct AtomIntegrals {
    pub scalar: f64,
    pub gradient: DVector<f64>,
}

impl<'a> TerminalField<'a> {
    pub fn new(prior: &EmpiricalPrior, market: &'a MarketSpec, rule: &'a GaussianRule) -> Result<Self> {
        if prior.dim() != market.dim() {
            return Err(DrbcError::DimensionMismatch { expected: market.dim(), actual: prior.dim() });
        }
        let horizon = market.horizon();
        let log_f = PriorKernel::new(prior, market).log_f_at_nodes(rule, horizon)?;
        Ok(Self { rule, market, log_f, root: horizon.sqrt(), horizon })
    }

    pub fn log_f(&self) -> &[f64] {
        &self.log_f
    }

    pub fn integrals(&self, b: &DVector<f64>, beta: f64) -> Result<AtomIntegrals> {
        let d = self.market.dim();
        let theta = self.market.market_price_of_risk(b);
        let half = 0.5 * theta.norm_squared() * self.horizon;
        let n = self.rule.len();
        let mut e = vec![0.0; n];
        let mut comps = vec![vec![0.0; n]; d];
        for j in 0..n {
            let u = self.rule.node(j);
            let ej =
                self.rule.weights()[j] * (self.root * dot(theta.as_slice(), u) - half + beta * self.log_f[j]).exp();
            e[j] = ej;
            for i in 0..d {
                comps[i][j] = ej * (self.root * u[i] - self.horizon * theta[i]);
            }
        }
        let scalar = pairwise_sum(&e);
        let inner = DVector::from_iterator(d, comps.iter().map(|c| pairwise_sum(c)));
        let gradient = self.market.sigma_inv().transpose() * inner;
        if !scalar.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
            return Err(DrbcError::NoConvergence(format!("influence integral not finite at b={b:?}")));
        }
        Ok(AtomIntegrals { scalar, gradient })
    }
}

/// `H(b) = (1/(1−α)) ∫ ∇_b L_T(b,y) F(T,y)^{α/(1−α)} φ_T(y) dy`.
pub fn influence_h(
    prior: &EmpiricalPrior,
    b: &DVector<f64>,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<DVector<f64>> {
    let field = TerminalField::new(prior, market, rule)?;
    Ok(field.integrals(b, utility.beta())?.gradient * utility.gamma())
}

/// `H` at every atom of `prior`.
pub fn influence_at_atoms(
    prior: &EmpiricalPrior,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<Vec<DVector<f64>>> {
    let field = TerminalField::new(prior, market, rule)?;
    prior.atoms().iter().map(|b| Ok(field.integrals(b, utility.beta())?.gradient * utility.gamma())).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobustSpec {
    pub delta: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
}

fn default_tau() -> f64 {
    1.0
}

impl RobustSpec {
    pub fn new(delta: f64, tau: f64) -> Result<Self> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(DrbcError::invalid(format!("radius must be nonnegative, got {delta}")));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(DrbcError::invalid(format!("transport cost scale must be positive, got {tau}")));
        }
        Ok(Self { delta, tau })
    }
}

#[derive(Debug, Clone)]
pub struct PerturbationResult {
    pub perturbed: EmpiricalPrior,
    pub h_values: Vec<DVector<f64>>,
    /// `‖H‖_{L²(ℙₙ)}`.
    pub h_norm: f64,
    /// First-order change of `𝒥`: `sign·√(δ/τ)·‖H‖`.
    pub predicted_value_shift: f64,
    /// Set when `√δ` exceeds half the atom spread.
    pub large_radius: bool,
}

impl PerturbationResult {
    /// Writes `b_*, h_*, c_*` columns: original atom, influence, shifted atom.
    pub fn write_csv<P: AsRef<Path>>(&self, original: &EmpiricalPrior, path: P) -> Result<()> {
        let d = original.dim();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = Vec::with_capacity(3 * d);
        for prefix in ["b", "h", "c"] {
            header.extend((1..=d).map(|i| format!("{prefix}_{i}")));
        }
        w.write_record(&header)?;
        for ((b, h), c) in original.atoms().iter().zip(&self.h_values).zip(self.perturbed.atoms()) {
            let rec: Vec<String> = b.iter().chain(h.iter()).chain(c.iter()).map(|v| fmt_f64(*v)).collect();
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Largest distance between two atoms.
fn atom_spread(prior: &EmpiricalPrior) -> f64 {
    let atoms = prior.atoms();
    let mut best = 0.0f64;
    for i in 0..atoms.len() {
        for j in i + 1..atoms.len() {
            best = best.max((&atoms[i] - &atoms[j]).norm());
        }
    }
    best
}

/// `C^(k) = B^(k) + sign·√(δ/τ)·H(B^(k))/‖H‖`, with `sign` the adversarial
/// direction of the utility.
pub fn perturb_prior(
    prior: &EmpiricalPrior,
    spec: &RobustSpec,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<PerturbationResult> {
    let h_values = influence_at_atoms(prior, utility, market, rule)?;
    Ok(pushforward(prior, h_values, spec, utility))
}

pub(crate) fn pushforward(
    prior: &EmpiricalPrior,
    h_values: Vec<DVector<f64>>,
    spec: &RobustSpec,
    utility: &PowerUtility,
) -> PerturbationResult {
    let h_norm = weighted_l2(prior.weights(), &h_values);
    let large_radius = spec.delta > 0.0 && spec.delta.sqrt() > 0.5 * atom_spread(prior);
    if large_radius {
        log::warn!(
            "radius sqrt(delta)={:.3e} exceeds half the atom spread {:.3e}",
            spec.delta.sqrt(),
            atom_spread(prior)
        );
    }
    if spec.delta == 0.0 || h_norm == 0.0 {
        return PerturbationResult {
            perturbed: prior.clone(),
            h_values,
            h_norm,
            predicted_value_shift: 0.0,
            large_radius,
        };
    }
    let radius = (spec.delta / spec.tau).sqrt();
    let scale = utility.adversarial_sign() * radius / h_norm;
    let atoms = prior.atoms().iter().zip(&h_values).map(|(b, h)| b + h * scale).collect();
    PerturbationResult {
        perturbed: prior.with_atoms(atoms).expect("shifted atoms keep the prior valid"),
        h_values,
        h_norm,
        predicted_value_shift: utility.adversarial_sign() * radius * h_norm,
        large_radius,
    }
}

pub(crate) fn weighted_l2(weights: &[f64], vs: &[DVector<f64>]) -> f64 {
    weights.iter().zip(vs).map(|(w, v)| w * v.norm_squared()).sum::<f64>().sqrt()
}

/// The influence form `∫ ∇_b L_T(b,z)·(k e^{−rT}/F(T,z))² φ_T(z) dz`, kept to
/// compare its direction against [`influence_h`].
pub fn influence_squared_ratio_form(
    prior: &EmpiricalPrior,
    b: &DVector<f64>,
    k: f64,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<DVector<f64>> {
    let field = TerminalField::new(prior, market, rule)?;
    let c = k * (-market.r() * market.horizon()).exp();
    Ok(field.integrals(b, -2.0)?.gradient * (c * c))
}

/// `𝒥` after translating atom `k` by `shift`; used by derivative oracles.
pub fn j_with_translated_atom(
    prior: &EmpiricalPrior,
    k: usize,
    shift: &DVector<f64>,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    let mut atoms = prior.atoms().to_vec();
    atoms[k] += shift;
    let moved = prior.with_atoms(atoms)?;
    let lf = PriorKernel::new(&moved, market).log_f_at_nodes(rule, market.horizon())?;
    Ok(power_moment(rule, &lf, utility.gamma()))
}
