//! Bayesian Merton closed forms for power utility.
//!
//! Everything is evaluated in log-space: `log L_t(b,y) = ⟨θ_b, y⟩ − ½‖θ_b‖²t`
//! with `θ_b = σ^{-1}(b − r·1)`, and `log F` is a log-sum-exp over atoms.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{DrbcError, Result};
use crate::market::MarketSpec;
use crate::prior::EmpiricalPrior;
use crate::quadrature::{pairwise_sum, GaussianRule};
use crate::utility::PowerUtility;

/// Remaining horizons below this use the point-mass (`s = 0`) branch.
pub const TERMINAL_EPS: f64 = 1e-12;
const MAX_DOUBLINGS: usize = 200;

pub fn likelihood_ratio(b: &DVector<f64>, y: &DVector<f64>, t: f64, market: &MarketSpec) -> f64 {
    let theta = market.market_price_of_risk(b);
    (theta.dot(y) - 0.5 * theta.norm_squared() * t).exp()
}

pub fn mixture_f(prior: &EmpiricalPrior, y: &DVector<f64>, t: f64, market: &MarketSpec) -> f64 {
    PriorKernel::new(prior, market).log_f(y.as_slice(), t).exp()
}

/// `∇_y F(t,y) = Σ_k w_k L_t(b_k,y) θ_k`.
pub fn grad_f(prior: &EmpiricalPrior, y: &DVector<f64>, t: f64, market: &MarketSpec) -> DVector<f64> {
    let kernel = PriorKernel::new(prior, market);
    let mut g = DVector::zeros(kernel.dim());
    for k in 0..kernel.len() {
        let l = (kernel.log_w[k] + kernel.log_l(k, y.as_slice(), t)).exp();
        g.axpy(l, &kernel.theta(k), 1.0);
    }
    g
}

/// Market prices of risk of the atoms together with their log-weights.
#[derive(Debug, Clone)]
pub struct PriorKernel {
    d: usize,
    /// Row-major `K × d`.
    thetas: Vec<f64>,
    half_sq: Vec<f64>,
    log_w: Vec<f64>,
}

impl PriorKernel {
    pub fn new(prior: &EmpiricalPrior, market: &MarketSpec) -> Self {
        let d = prior.dim();
        let mut thetas = Vec::with_capacity(prior.len() * d);
        let mut half_sq = Vec::with_capacity(prior.len());
        for b in prior.atoms() {
            let th = market.market_price_of_risk(b);
            half_sq.push(0.5 * th.norm_squared());
            thetas.extend(th.iter());
        }
        let log_w = prior.weights().iter().map(|w| w.ln()).collect();
        Self { d, thetas, half_sq, log_w }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.half_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.half_sq.is_empty()
    }

    pub fn theta(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.theta_slice(k))
    }

    fn theta_slice(&self, k: usize) -> &[f64] {
        &self.thetas[k * self.d..(k + 1) * self.d]
    }

    pub fn log_l(&self, k: usize, y: &[f64], t: f64) -> f64 {
        dot(self.theta_slice(k), y) - self.half_sq[k] * t
    }

    pub fn log_f(&self, y: &[f64], t: f64) -> f64 {
        log_sum_exp((0..self.len()).map(|k| self.log_w[k] + self.log_l(k, y, t)))
    }

    /// Posterior atom probabilities `w_k L_t(b_k,y)/F(t,y)`.
    pub fn posterior(&self, y: &[f64], t: f64) -> Vec<f64> {
        let logs: Vec<f64> = (0..self.len()).map(|k| self.log_w[k] + self.log_l(k, y, t)).collect();
        let lf = log_sum_exp(logs.iter().copied());
        logs.into_iter().map(|v| (v - lf).exp()).collect()
    }

    /// `log F(T, √T·u_j)` at every node of `rule`.
    pub fn log_f_at_nodes(&self, rule: &GaussianRule, horizon: f64) -> Result<Vec<f64>> {
        check_dims(self.d, rule)?;
        let root = horizon.sqrt();
        let mut y = vec![0.0; self.d];
        let out: Vec<f64> = (0..rule.len())
            .map(|j| {
                for (yi, ui) in y.iter_mut().zip(rule.node(j)) {
                    *yi = root * ui;
                }
                self.log_f(&y, horizon)
            })
            .collect();
        if let Some(j) = out.iter().position(|v| !v.is_finite()) {
            return Err(DrbcError::NonFiniteEvaluation {
                node: rule.node(j).iter().map(|u| root * u).collect(),
                value: out[j],
            });
        }
        Ok(out)
    }
}

fn check_dims(d: usize, rule: &GaussianRule) -> Result<()> {
    if rule.dim() != d {
        return Err(DrbcError::DimensionMismatch { expected: d, actual: rule.dim() });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp<I: Iterator<Item = f64> + Clone>(vals: I) -> f64 {
    let m = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + vals.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `∫ exp(p·log F_j) φ_T` from precomputed `log F_j`.
pub(crate) fn power_moment(rule: &GaussianRule, log_f: &[f64], p: f64) -> f64 {
    let terms: Vec<f64> = rule.weights().iter().zip(log_f).map(|(w, lf)| w * (p * lf).exp()).collect();
    pairwise_sum(&terms)
}

/// `M = ∫ F(T,z)^{1/(1−α)} φ_T(z) dz`.
pub fn budget_moment(
    prior: &EmpiricalPrior,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    let lf = PriorKernel::new(prior, market).log_f_at_nodes(rule, market.horizon())?;
    finite(power_moment(rule, &lf, utility.gamma()), "budget moment")
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DrbcError::NoConvergence(format!("{what} is not finite ({v})")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BudgetSolution {
    pub k: f64,
    pub x0: f64,
    /// `|L(k;T,0) − x₀e^{rT}|`.
    pub residual: f64,
}

/// `L(k) = ∫ I(k e^{−rT}/F(T,z)) φ_T(z) dz`, the undiscounted optimal terminal wealth.
pub fn budget_map(k: f64, log_f: &[f64], rule: &GaussianRule, utility: &PowerUtility, market: &MarketSpec) -> f64 {
    let c = k * (-market.r() * market.horizon()).exp();
    let terms: Vec<f64> =
        rule.weights().iter().zip(log_f).map(|(w, lf)| w * utility.inv_marginal(c / lf.exp())).collect();
    pairwise_sum(&terms)
}

fn check_x0(x0: f64) -> Result<()> {
    if !(x0 > 0.0 && x0.is_finite()) {
        return Err(DrbcError::invalid(format!("initial wealth must be positive, got {x0}")));
    }
    Ok(())
}

/// Closed-form budget multiplier `k = e^{rT}(M/(x₀e^{rT}))^{1−α}`.
pub fn solve_budget_k(
    prior: &EmpiricalPrior,
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<BudgetSolution> {
    check_x0(x0)?;
    let lf = PriorKernel::new(prior, market).log_f_at_nodes(rule, market.horizon())?;
    budget_from_log_f(&lf, x0, utility, market, rule)
}

pub(crate) fn budget_from_log_f(
    lf: &[f64],
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<BudgetSolution> {
    let growth = (market.r() * market.horizon()).exp();
    let m = finite(power_moment(rule, lf, utility.gamma()), "budget moment")?;
    let k = growth * (m / (x0 * growth)).powf(1.0 - utility.alpha());
    let k = finite(k, "budget multiplier")?;
    let residual = (budget_map(k, lf, rule, utility, market) - x0 * growth).abs();
    Ok(BudgetSolution { k, x0, residual })
}

/// Budget multiplier from bracketing the decreasing map `k ↦ L(k)` and
/// bisecting in `log k`. Used to cross-check the closed form.
pub fn solve_budget_k_bracketed(
    prior: &EmpiricalPrior,
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<BudgetSolution> {
    check_x0(x0)?;
    let lf = PriorKernel::new(prior, market).log_f_at_nodes(rule, market.horizon())?;
    let target = x0 * (market.r() * market.horizon()).exp();
    let g = |log_k: f64| budget_map(log_k.exp(), &lf, rule, utility, market) - target;
    let (mut lo, mut hi) = (0.0f64, 0.0f64);
    let mut step = 1.0;
    let mut doublings = 0;
    // g is decreasing: need g(lo) > 0 > g(hi)
    while g(lo) <= 0.0 {
        lo -= step;
        step *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(DrbcError::BracketFailure { doublings: MAX_DOUBLINGS });
        }
    }
    step = 1.0;
    while g(hi) >= 0.0 {
        hi += step;
        step *= 2.0;
        doublings += 1;
        if doublings > MAX_DOUBLINGS {
            return Err(DrbcError::BracketFailure { doublings: MAX_DOUBLINGS });
        }
    }
    for _ in 0..400 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let log_k = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    let k = log_k.exp();
    Ok(BudgetSolution { k, x0, residual: g(log_k).abs() })
}

/// `V = ((x₀e^{rT})^α/α)·M^{1−α}`.
pub fn value_function(
    prior: &EmpiricalPrior,
    x0: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    check_x0(x0)?;
    let m = budget_moment(prior, utility, market, rule)?;
    let a = utility.alpha();
    Ok((x0 * (market.r() * market.horizon()).exp()).powf(a) / a * m.powf(1.0 - a))
}

/// `∫ F·U(I(k e^{−rT}/F)) φ_T` for a given multiplier, without the power shortcut.
pub fn value_function_general(
    prior: &EmpiricalPrior,
    k: f64,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<f64> {
    let lf = PriorKernel::new(prior, market).log_f_at_nodes(rule, market.horizon())?;
    let c = k * (-market.r() * market.horizon()).exp();
    let terms: Vec<f64> = rule
        .weights()
        .iter()
        .zip(&lf)
        .map(|(w, lf)| {
            let f = lf.exp();
            w * f * utility.u(utility.inv_marginal(c / f))
        })
        .collect();
    finite(pairwise_sum(&terms), "value function")
}

/// Optimal fractions of wealth at time `t` given the observation `Y(t)`.
pub fn optimal_fraction(
    prior: &EmpiricalPrior,
    t: f64,
    y: &DVector<f64>,
    utility: &PowerUtility,
    market: &MarketSpec,
    rule: &GaussianRule,
) -> Result<DVector<f64>> {
    FractionEvaluator::new(prior, market, utility, rule)?.fraction(t, y)
}

/// Reusable evaluator of the optimal-fraction formula for one prior and one
/// node set. Node projections `θ_k·u_j` are computed once, so each call
/// costs `O(n·K)` exponentials.
#[derive(Debug, Clone)]
pub struct FractionEvaluator<'a> {
    kernel: PriorKernel,
    rule: &'a GaussianRule,
    proj: Vec<f64>,
    gamma: f64,
    horizon: f64,
    sigma_inv_t: DMatrix<f64>,
}

impl<'a> FractionEvaluator<'a> {
    pub fn new(
        prior: &EmpiricalPrior,
        market: &MarketSpec,
        utility: &PowerUtility,
        rule: &'a GaussianRule,
    ) -> Result<Self> {
        let kernel = PriorKernel::new(prior, market);
        check_dims(kernel.dim(), rule)?;
        if prior.dim() != market.dim() {
            return Err(DrbcError::DimensionMismatch { expected: market.dim(), actual: prior.dim() });
        }
        let kk = kernel.len();
        let mut proj = Vec::with_capacity(rule.len() * kk);
        for j in 0..rule.len() {
            let u = rule.node(j);
            proj.extend((0..kk).map(|k| dot(kernel.theta_slice(k), u)));
        }
        Ok(Self {
            kernel,
            rule,
            proj,
            gamma: utility.gamma(),
            horizon: market.horizon(),
            sigma_inv_t: market.sigma_inv().transpose(),
        })
    }

    /// Fractions at time `t ∈ [0, T)` of the plan horizon.
    pub fn fraction(&self, t: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
        if !(t >= 0.0) || t >= self.horizon {
            return Err(DrbcError::invalid(format!(
                "evaluation time must satisfy 0 <= t < T, got t={t}, T={}",
                self.horizon
            )));
        }
        if y.len() != self.kernel.dim() {
            return Err(DrbcError::DimensionMismatch { expected: self.kernel.dim(), actual: y.len() });
        }
        let kk = self.kernel.len();
        let t_full = self.horizon;
        let base: Vec<f64> =
            (0..kk).map(|k| self.kernel.log_w[k] + self.kernel.log_l(k, y.as_slice(), t_full)).collect();
        let s = t_full - t;
        let mix = if s < TERMINAL_EPS {
            let lf = log_sum_exp(base.iter().copied());
            base.iter().map(|v| (v - lf).exp()).collect()
        } else {
            self.mixed_posterior(&base, s.sqrt())
        };
        let mut avg = DVector::zeros(self.kernel.dim());
        for (k, c) in mix.iter().enumerate() {
            for (a, th) in avg.iter_mut().zip(self.kernel.theta_slice(k)) {
                *a += c * th;
            }
        }
        let out = &self.sigma_inv_t * avg * self.gamma;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(DrbcError::NoConvergence("optimal fraction is not finite".into()));
        }
        Ok(out)
    }

    /// `c_k = Σ_j q_j p_jk` with `q_j ∝ ω_j F_j^γ` and `p_jk` the posterior at
    /// node `j`, accumulated in one pass with a running log-scale.
    fn mixed_posterior(&self, base: &[f64], root: f64) -> Vec<f64> {
        let kk = base.len();
        let mut acc = vec![0.0; kk];
        let mut scratch = vec![0.0; kk];
        let mut total = 0.0;
        let mut scale = f64::NEG_INFINITY;
        for (j, w) in self.rule.weights().iter().enumerate() {
            let row = &self.proj[j * kk..(j + 1) * kk];
            let mut m = f64::NEG_INFINITY;
            for k in 0..kk {
                scratch[k] = base[k] + root * row[k];
                m = m.max(scratch[k]);
            }
            let mut sum = 0.0;
            for v in scratch.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            let log_q = w.ln() + self.gamma * (m + sum.ln());
            if log_q > scale {
                let shrink = (scale - log_q).exp();
                acc.iter_mut().for_each(|a| *a *= shrink);
                total *= shrink;
                scale = log_q;
            }
            let q = (log_q - scale).exp();
            total += q;
            let qs = q / sum;
            for (a, e) in acc.iter_mut().zip(&scratch) {
                *a += qs * e;
            }
        }
        acc.into_iter().map(|a| a / total).collect()
    }
}
