//! Benchmark strategies: plug-in Merton, distributionally robust
//! mean-variance (DRMV) with and without a risk-free asset, and the DRC
//! surrogate.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{DrbcError, Result};
use crate::market::MarketSpec;
use crate::utility::PowerUtility;

/// Fractions of wealth in each risky asset plus the cash residual.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub weights: DVector<f64>,
    pub cash: f64,
}

impl PolicyWeights {
    /// Risky weights with `cash = 1 − Σw`.
    pub fn from_risky(weights: DVector<f64>) -> Self {
        let cash = 1.0 - weights.sum();
        Self { weights, cash }
    }

    pub fn zeros(d: usize) -> Self {
        Self { weights: DVector::zeros(d), cash: 1.0 }
    }

    pub fn gross_leverage(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }
}

/// `(1/(1−α))(σσᵀ)^{-1}(b̂ − r·1)`.
pub fn merton_plugin(b_hat: &DVector<f64>, market: &MarketSpec, utility: &PowerUtility) -> PolicyWeights {
    let excess = b_hat.map(|b| b - market.r());
    PolicyWeights::from_risky(market.precision() * excess * utility.gamma())
}

/// Clips every weight at `−cap`; the bought-back short is paid from cash.
pub fn apply_short_cap(w: &PolicyWeights, cap: f64) -> PolicyWeights {
    let clipped = w.weights.map(|x| x.max(-cap));
    let removed: f64 = (&w.weights - &clipped).sum();
    PolicyWeights { weights: clipped, cash: w.cash + removed }
}

pub fn short_cap_hits(w: &PolicyWeights, cap: f64) -> usize {
    w.weights.iter().filter(|x| **x < -cap).count()
}

/// Drift shrunk towards `r·1` so that the market price of risk loses
/// `√(2δ)` of its Euclidean norm, clamped at zero.
pub fn drc_adversarial_drift(b_hat: &DVector<f64>, market: &MarketSpec, delta: f64) -> DVector<f64> {
    let excess = b_hat.map(|b| b - market.r());
    let theta_norm = (market.sigma_inv() * &excess).norm();
    let shrink = if theta_norm > 0.0 { (1.0 - (2.0 * delta).sqrt() / theta_norm).max(0.0) } else { 0.0 };
    excess * shrink + DVector::from_element(b_hat.len(), market.r())
}

/// DRC surrogate: Merton weights at the worst-case drift, then the optional short cap.
pub fn drc_policy(
    b_hat: &DVector<f64>,
    market: &MarketSpec,
    utility: &PowerUtility,
    delta: f64,
    short_cap: Option<f64>,
) -> Result<PolicyWeights> {
    if !(delta >= 0.0) {
        return Err(DrbcError::invalid(format!("DRC radius must be nonnegative, got {delta}")));
    }
    let w = merton_plugin(&drc_adversarial_drift(b_hat, market, delta), market, utility);
    Ok(match short_cap {
        Some(cap) => apply_short_cap(&w, cap),
        None => w,
    })
}

/// `min φᵀΣ̂φ + √δ‖φ‖_p` subject to `1ᵀφ = 1` and `μ̂ᵀφ ≥ ᾱ + √δ‖φ‖_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct DrmvProblem {
    pub mu_hat: DVector<f64>,
    pub sigma_hat: DMatrix<f64>,
    pub delta: f64,
    pub alpha_bar: f64,
    pub p_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DrmvDiagnostics {
    pub objective: f64,
    /// Multiplier of the return constraint.
    pub lambda: f64,
    /// Largest of the stationarity, budget and complementarity residuals.
    pub kkt_residual: f64,
    pub return_slack: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrmvSolution {
    pub policy: PolicyWeights,
    pub diagnostics: DrmvDiagnostics,
}

impl DrmvProblem {
    pub fn new(mu_hat: DVector<f64>, sigma_hat: DMatrix<f64>, delta: f64, alpha_bar: f64) -> Result<Self> {
        let p = Self { mu_hat, sigma_hat, delta, alpha_bar, p_norm: 2.0 };
        p.validate()?;
        Ok(p)
    }

    pub fn with_p_norm(mut self, p: f64) -> Result<Self> {
        self.p_norm = p;
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        let d = self.mu_hat.len();
        if d == 0 {
            return Err(DrbcError::invalid("DRMV needs at least one asset"));
        }
        if self.sigma_hat.nrows() != d || self.sigma_hat.ncols() != d {
            return Err(DrbcError::DimensionMismatch { expected: d, actual: self.sigma_hat.nrows() });
        }
        let asym = (&self.sigma_hat - self.sigma_hat.transpose()).amax();
        if asym > 1e-10 * self.sigma_hat.amax().max(1.0) {
            return Err(DrbcError::invalid("covariance must be symmetric"));
        }
        let min_eig = self.sigma_hat.clone().symmetric_eigen().eigenvalues.min();
        if min_eig < -1e-12 * self.sigma_hat.amax().max(1.0) {
            return Err(DrbcError::invalid(format!(
                "covariance is not positive semidefinite (min eigenvalue {min_eig})"
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) || !self.alpha_bar.is_finite() {
            return Err(DrbcError::invalid("DRMV radius must be nonnegative and target finite"));
        }
        // p-norms with p < 2 are not twice differentiable where a weight is zero
        if !(self.p_norm >= 2.0) {
            return Err(DrbcError::invalid(format!("p_norm must be at least 2, got {}", self.p_norm)));
        }
        Ok(())
    }

    fn norm(&self, phi: &DVector<f64>) -> f64 {
        p_norm(phi, self.p_norm)
    }

    /// Largest achievable `μ̂ᵀφ − √δ‖φ‖₂` on `1ᵀφ = 1` (`+∞` when unbounded).
    pub fn max_robust_return_l2(&self) -> f64 {
        let d = self.mu_hat.len() as f64;
        let mbar = self.mu_hat.mean();
        let a = self.mu_hat.map(|m| m - mbar).norm();
        if self.delta == 0.0 {
            return if a > 0.0 { f64::INFINITY } else { mbar };
        }
        let s2 = self.delta;
        if a * a >= s2 {
            // sup equals m̄ when a = √δ, otherwise unbounded
            return if a * a > s2 { f64::INFINITY } else { mbar };
        }
        mbar - (s2 - a * a).sqrt() / d.sqrt()
    }
}

fn p_norm(x: &DVector<f64>, p: f64) -> f64 {
    if p == 2.0 {
        return x.norm();
    }
    let m = x.amax();
    if m == 0.0 {
        return 0.0;
    }
    m * x.iter().map(|v| (v.abs() / m).powf(p)).sum::<f64>().powf(1.0 / p)
}

/// Gradient and Hessian of `‖x‖_p` for `x ≠ 0`, `p ≥ 2`.
fn p_norm_derivatives(x: &DVector<f64>, p: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = p_norm(x, p);
    let d = x.len();
    if p == 2.0 {
        let g = x / n;
        let h = (DMatrix::identity(d, d) - &g * g.transpose()) / n;
        return (g, h);
    }
    // ∂_i = sign(x_i)|x_i|^{p−1} n^{1−p}
    let a = x.map(|v| v.signum() * (v.abs() / n).powf(p - 1.0));
    let diag = x.map(|v| (p - 1.0) * (v.abs() / n).powf(p - 2.0) / n);
    let h = DMatrix::from_diagonal(&diag) - (&a * a.transpose()) * ((p - 1.0) / n);
    (a, h)
}

const INNER_TOL: f64 = 1e-13;
const MAX_LAMBDA: f64 = 1e12;

/// Inner problem: `min φᵀΣφ + (1+λ)s‖φ‖_p − λμᵀφ` on `1ᵀφ = 1`, solved by
/// damped Newton in coordinates `φ = 1/d + N z` with `N` an orthonormal
/// basis of `1^⊥`.
struct Inner<'a> {
    prob: &'a DrmvProblem,
    basis: DMatrix<f64>,
    center: DVector<f64>,
    s: f64,
}

impl<'a> Inner<'a> {
    fn new(prob: &'a DrmvProblem) -> Self {
        let d = prob.mu_hat.len();
        let center = DVector::from_element(d, 1.0 / d as f64);
        let basis = if d == 1 {
            DMatrix::zeros(1, 0)
        } else {
            // Householder-style orthonormal complement of 1/√d
            let ones = DVector::from_element(d, 1.0 / (d as f64).sqrt());
            let mut m = DMatrix::identity(d, d);
            m.set_column(0, &ones);
            let qr = m.qr();
            qr.q().columns(1, d - 1).into_owned()
        };
        Self { prob, basis, center, s: prob.delta.sqrt() }
    }

    fn phi(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.center + &self.basis * z
    }

    fn value(&self, z: &DVector<f64>, lambda: f64) -> f64 {
        let phi = self.phi(z);
        phi.dot(&(&self.prob.sigma_hat * &phi)) + (1.0 + lambda) * self.s * self.prob.norm(&phi)
            - lambda * self.prob.mu_hat.dot(&phi)
    }

    fn grad_hess(&self, phi: &DVector<f64>, lambda: f64) -> (DVector<f64>, DMatrix<f64>) {
        let mut g = &self.prob.sigma_hat * phi * 2.0 - &self.prob.mu_hat * lambda;
        let mut h = &self.prob.sigma_hat * 2.0;
        if self.s > 0.0 {
            let (ng, nh) = p_norm_derivatives(phi, self.prob.p_norm);
            g += ng * ((1.0 + lambda) * self.s);
            h += nh * ((1.0 + lambda) * self.s);
        }
        (g, h)
    }

    fn solve(&self, lambda: f64, start: &DVector<f64>) -> Result<DVector<f64>> {
        let k = self.basis.ncols();
        if k == 0 {
            return Ok(DVector::zeros(0));
        }
        let mut z = start.clone();
        let scale = 1.0 + lambda;
        for _ in 0..200 {
            let phi = self.phi(&z);
            let (g, h) = self.grad_hess(&phi, lambda);
            let gz = self.basis.transpose() * g;
            if gz.amax() <= INNER_TOL * scale {
                return Ok(z);
            }
            let mut hz = self.basis.transpose() * h * &self.basis;
            // a tiny ridge keeps Newton well posed when Σ is singular
            let ridge = 1e-14 * hz.diagonal().amax().max(1e-300);
            for i in 0..k {
                hz[(i, i)] += ridge;
            }
            let step = match hz.clone().cholesky() {
                Some(c) => c.solve(&(-&gz)),
                None => -&gz,
            };
            let f0 = self.value(&z, lambda);
            let slope = gz.dot(&step);
            let mut t = 1.0;
            loop {
                let cand = &z + &step * t;
                if self.value(&cand, lambda) <= f0 + 1e-4 * t * slope || t < 1e-12 {
                    z = cand;
                    break;
                }
                t *= 0.5;
            }
            if (step * t).amax() <= 1e-15 * (1.0 + z.amax()) {
                return Ok(z);
            }
        }
        Ok(z)
    }
}

/// Solves the DRMV program; the portfolio is fully invested (`cash = 0`).
pub fn drmv_solve(problem: &DrmvProblem) -> Result<DrmvSolution> {
    problem.validate()?;
    let inner = Inner::new(problem);
    let s = inner.s;
    let slack = |phi: &DVector<f64>| problem.mu_hat.dot(phi) - s * problem.norm(phi) - problem.alpha_bar;
    if problem.p_norm == 2.0 {
        let best = problem.max_robust_return_l2();
        if best < problem.alpha_bar {
            return Err(DrbcError::Infeasible { target: problem.alpha_bar, max_robust_return: best });
        }
    }
    let k = inner.basis.ncols();
    let z0 = DVector::zeros(k);
    let mut z = inner.solve(0.0, &z0)?;
    let mut lambda = 0.0;
    if slack(&inner.phi(&z)) < 0.0 {
        // constraint active: find λ with zero slack; slack is nondecreasing in λ
        let mut hi = 1.0;
        let mut z_hi = inner.solve(hi, &z)?;
        while slack(&inner.phi(&z_hi)) < 0.0 {
            hi *= 2.0;
            if hi > MAX_LAMBDA {
                let phi = inner.phi(&z_hi);
                return Err(DrbcError::Infeasible {
                    target: problem.alpha_bar,
                    max_robust_return: slack(&phi) + problem.alpha_bar,
                });
            }
            z_hi = inner.solve(hi, &z_hi)?;
        }
        let mut lo = 0.0;
        z = z_hi.clone();
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let zm = inner.solve(mid, &z)?;
            let sl = slack(&inner.phi(&zm));
            if sl < 0.0 {
                lo = mid;
            } else {
                hi = mid;
                z = zm;
            }
            if hi - lo <= 1e-15 * hi.max(1.0) || sl.abs() <= 1e-13 {
                if sl >= 0.0 {
                    lambda = mid;
                    z = inner.solve(mid, &z)?;
                } else {
                    lambda = hi;
                    z = inner.solve(hi, &z)?;
                }
                break;
            }
            lambda = hi;
        }
    }
    let phi = inner.phi(&z);
    let (g, _) = inner.grad_hess(&phi, lambda);
    let stationarity = if k == 0 { 0.0 } else { (inner.basis.transpose() * &g).amax() };
    let ret_slack = slack(&phi);
    let kkt = stationarity.max((phi.sum() - 1.0).abs()).max((lambda * ret_slack).abs()).max((-ret_slack).max(0.0));
    let objective = phi.dot(&(&problem.sigma_hat * &phi)) + s * problem.norm(&phi);
    Ok(DrmvSolution {
        policy: PolicyWeights { weights: phi, cash: 0.0 },
        diagnostics: DrmvDiagnostics { objective, lambda, kkt_residual: kkt, return_slack: ret_slack },
    })
}

/// DRMV on `d + 1` assets where the last one is the risk-free asset with a
/// small return variance. The risk-free entry is reported as cash.
pub fn drmv_rf_solve(problem: &DrmvProblem, rf_rate: f64, rf_variance: f64) -> Result<DrmvSolution> {
    if !(rf_variance >= 0.0) {
        return Err(DrbcError::invalid("risk-free noise variance must be nonnegative"));
    }
    let d = problem.mu_hat.len();
    let mut mu = problem.mu_hat.clone().insert_row(d, rf_rate);
    mu[d] = rf_rate;
    let mut sigma = DMatrix::zeros(d + 1, d + 1);
    sigma.view_mut((0, 0), (d, d)).copy_from(&problem.sigma_hat);
    sigma[(d, d)] = rf_variance;
    let aug = DrmvProblem { mu_hat: mu, sigma_hat: sigma, ..problem.clone() };
    let sol = drmv_solve(&aug)?;
    let w = &sol.policy.weights;
    Ok(DrmvSolution {
        policy: PolicyWeights { weights: w.rows(0, d).into_owned(), cash: w[d] },
        diagnostics: sol.diagnostics,
    })
}
