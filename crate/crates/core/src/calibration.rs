//! Ambiguity-radius selection from the Wasserstein projection limit law.
//!
//! With `c = k e^{−rT}` the budget functional is
//! `κ(ℙ) = ∫ I(c/F_ℙ) φ_T − x₀e^{rT}`. Its first variation has gradient
//! `∇κ′(b) = ∫ g′(F) ∇_b L_T(b,·) φ_T` with `g′(F) = −I′(c/F)·c/F²`, and the
//! radius is `δ = η_q/n` where `η_q` is the `q`-quantile of `Z²/E‖∇κ′‖²`,
//! `Z ~ N(0, σ²)`.

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
use statrs::statistics::{Data, OrderStatistics};

use crate::error::{DrbcError, Result};
use crate::market::MarketSpec;
use crate::merton::{budget_from_log_f, budget_map, PriorKernel};
use crate::prior::EmpiricalPrior;
use crate::quadrature::GaussianRule;
use crate::rng::{stream, substream};
use crate::robust::TerminalField;
use crate::utility::PowerUtility;

pub const DEFAULT_SAMPLE_SIZE: usize = 100_000;
const DEGENERATE_RATIO: f64 = 1e-20;

/// `g′(F) = −I′(k e^{−rT}/F)·k e^{−rT}/F²`.
pub fn g_prime(f: f64, k: f64, utility: &PowerUtility, market: &MarketSpec) -> f64 {
    let c = k * (-market.r() * market.horizon()).exp();
    -utility.inv_marginal_deriv(c / f) * c / (f * f)
}

/// `c^{1/(α−1)}/(1−α)`: for power utility `g′(F)` equals this times `F^{α/(1−α)}`.
fn g_prime_scale(k: f64, utility: &PowerUtility, market: &MarketSpec) -> f64 {
    let c = k * (-market.r() * market.horizon()).exp();
    utility.gamma() * c.powf(-utility.gamma())
}

/// Budget functional `κ(ℙ) = ∫ I(k e^{−rT}/F) φ_T − x₀e^{rT}` at fixed `k`.
pub fn kappa_functional(
    prior: &EmpiricalPrior,
    k: f64,
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    let lf = PriorKernel::new(prior, market).log_f_at_nodes(rule, market.horizon())?;
    Ok(budget_map(k, &lf, rule, utility, market) - x0 * (market.r() * market.horizon()).exp())
}

/// `∇κ′(b) = ∫ g′(F(y)) ∇_b L_T(b,y) φ_T(y) dy`.
pub fn grad_kappa(
    prior: &EmpiricalPrior,
    b: &DVector<f64>,
    k: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<DVector<f64>> {
    let field = TerminalField::new(prior, market, rule)?;
    Ok(field.integrals(b, utility.beta())?.gradient * g_prime_scale(k, utility, market))
}

/// Per-atom statistic `v(b) = ∫ g′(F(y)) L_T(b,y) φ_T(y) dy` at every atom.
fn atom_statistics(
    field: &TerminalField<'_>,
    prior: &EmpiricalPrior,
    k: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
) -> Result<(Vec<f64>, Vec<DVector<f64>>)> {
    let scale = g_prime_scale(k, utility, market);
    let mut stats = Vec::with_capacity(prior.len());
    let mut grads = Vec::with_capacity(prior.len());
    for b in prior.atoms() {
        let ints = field.integrals(b, utility.beta())?;
        stats.push(ints.scalar * scale);
        grads.push(ints.gradient * scale);
    }
    Ok((stats, grads))
}

fn weighted_variance(weights: &[f64], xs: &[f64]) -> f64 {
    let mean: f64 = weights.iter().zip(xs).map(|(w, x)| w * x).sum();
    weights.iter().zip(xs).map(|(w, x)| w * (x - mean).powi(2)).sum::<f64>().max(0.0)
}

/// Weighted population variance of `v(B)` over the atoms.
pub fn sigma_sq_estimate(
    prior: &EmpiricalPrior,
    k: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    if prior.len() < 2 {
        return Err(DrbcError::VarianceUndefined(prior.len()));
    }
    let field = TerminalField::new(prior, market, rule)?;
    let (stats, _) = atom_statistics(&field, prior, k, utility, market)?;
    Ok(weighted_variance(prior.weights(), &stats))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantileMode {
    /// `η_q = σ²·χ²₁(q)/denom`.
    #[default]
    Analytic,
    /// Empirical quantile of `K` draws of `Z²/denom`.
    Sample { draws: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationResult {
    pub k_hat: f64,
    pub sigma_sq: f64,
    pub denom: f64,
    pub eta_q: f64,
    pub delta: f64,
    pub n: usize,
    pub confidence: f64,
}

impl CalibrationResult {
    pub fn summary_line(&self) -> String {
        format!(
            "n={} k={:.6e} sigma2={:.6e} denom={:.6e} delta={:.6e}",
            self.n, self.k_hat, self.sigma_sq, self.denom, self.delta
        )
    }
}

/// `χ²₁` quantile, computed as the squared two-sided normal quantile.
pub fn chi_sq_1_quantile(confidence: f64) -> f64 {
    let z = StatNormal::standard().inverse_cdf(0.5 * (1.0 + confidence));
    z * z
}

/// Radius from the projection limit law for the prior `ℙₙ`.
pub fn select_delta(
    prior: &EmpiricalPrior,
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
    confidence: f64,
    mode: QuantileMode,
) -> Result<CalibrationResult> {
    if prior.len() < 2 {
        return Err(DrbcError::VarianceUndefined(prior.len()));
    }
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(DrbcError::invalid(format!("confidence must lie in (0,1), got {confidence}")));
    }
    if !(x0 > 0.0) {
        return Err(DrbcError::invalid(format!("initial wealth must be positive, got {x0}")));
    }
    let field = TerminalField::new(prior, market, rule)?;
    let k_hat = budget_from_log_f(field.log_f(), x0, utility, market, rule)?.k;
    let (stats, grads) = atom_statistics(&field, prior, k_hat, utility, market)?;
    let denom: f64 = prior.weights().iter().zip(&grads).map(|(w, g)| w * g.norm_squared()).sum();
    // Quadrature leaves round-off in gradients that vanish analytically, so
    // degeneracy is judged relative to the size of the statistic itself.
    let stat_sq: f64 = prior.weights().iter().zip(&stats).map(|(w, s)| w * s * s).sum();
    if !(denom > DEGENERATE_RATIO * stat_sq) || !denom.is_finite() {
        return Err(DrbcError::DegenerateGradient(denom));
    }
    let sigma_sq = weighted_variance(prior.weights(), &stats);
    let eta_q = eta_quantile(sigma_sq, denom, confidence, mode)?;
    let n = prior.len();
    Ok(CalibrationResult { k_hat, sigma_sq, denom, eta_q, delta: eta_q / n as f64, n, confidence })
}

/// Quantile of `Z²/denom` with `Z ~ N(0, σ²)`.
pub fn eta_quantile(sigma_sq: f64, denom: f64, confidence: f64, mode: QuantileMode) -> Result<f64> {
    if sigma_sq == 0.0 {
        return Ok(0.0);
    }
    match mode {
        QuantileMode::Analytic => Ok(sigma_sq * chi_sq_1_quantile(confidence) / denom),
        QuantileMode::Sample { draws, seed } => {
            if draws < 2 {
                return Err(DrbcError::invalid("sample mode needs at least two draws"));
            }
            let normal =
                Normal::new(0.0, sigma_sq.sqrt()).map_err(|e| DrbcError::invalid(format!("variance estimate: {e}")))?;
            let mut rng = substream(seed, stream::QUANTILE, 0);
            let vals: Vec<f64> = (0..draws).map(|_| normal.sample(&mut rng).powi(2) / denom).collect();
            Ok(Data::new(vals).quantile(confidence))
        }
    }
}
