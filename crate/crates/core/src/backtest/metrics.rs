//! Wealth recursion and performance metrics.

use crate::error::{DrbcError, Result};
use crate::policies::PolicyWeights;
use crate::utility::PowerUtility;

/// Wealth floor applied when a step would wipe out the portfolio.
pub const WEALTH_FLOOR: f64 = 1e-12;

/// Step returns whose dispersion is below this are treated as constant.
const FLAT_TOL: f64 = 64.0 * f64::EPSILON;

/// Simple portfolio return `r·dt + Σ w_i (R_i − r·dt)` over one step.
pub fn portfolio_return(weights: &PolicyWeights, step_return: &[f64], r: f64, dt: f64) -> f64 {
    let rf = r * dt;
    rf + weights.weights.iter().zip(step_return).map(|(w, ri)| w * (ri - rf)).sum::<f64>()
}

/// Next wealth and whether the floor was hit.
pub fn step_wealth(x: f64, weights: &PolicyWeights, step_return: &[f64], r: f64, dt: f64) -> Result<(f64, bool)> {
    if !(x > 0.0) {
        return Err(DrbcError::invalid(format!("wealth must be positive, got {x}")));
    }
    if step_return.len() != weights.weights.len() {
        return Err(DrbcError::DimensionMismatch { expected: weights.weights.len(), actual: step_return.len() });
    }
    let next = x * (1.0 + portfolio_return(weights, step_return, r, dt));
    if next > WEALTH_FLOOR {
        Ok((next, false))
    } else {
        Ok((WEALTH_FLOOR, true))
    }
}

/// Annualized Sharpe ratio of per-step simple returns.
pub fn sharpe_from_returns(returns: &[f64], r_eval: f64, periods_per_year: f64) -> Result<f64> {
    if returns.len() < 2 {
        return Err(DrbcError::InsufficientHistory { required: 2, available: returns.len() });
    }
    let n = returns.len() as f64;
    let excess: Vec<f64> = returns.iter().map(|x| x - r_eval / periods_per_year).collect();
    let mean = excess.iter().sum::<f64>() / n;
    let var = excess.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    if sd <= FLAT_TOL {
        return if mean.abs() <= FLAT_TOL { Ok(0.0) } else { Err(DrbcError::ZeroVariance(mean)) };
    }
    Ok(mean * periods_per_year / (sd * periods_per_year.sqrt()))
}

/// Sharpe ratio of a wealth series (at least two points).
pub fn sharpe_ratio(wealth: &[f64], r_eval: f64, periods_per_year: f64) -> Result<f64> {
    if wealth.len() < 2 {
        return Err(DrbcError::InsufficientHistory { required: 2, available: wealth.len() });
    }
    let returns: Vec<f64> = wealth.windows(2).map(|w| w[1] / w[0] - 1.0).collect();
    sharpe_from_returns(&returns, r_eval, periods_per_year)
}

/// `U(x_T)`; a nonpositive wealth is evaluated at the floor and flagged.
pub fn terminal_utility(wealth_t: f64, utility: &PowerUtility) -> (f64, bool) {
    if wealth_t > WEALTH_FLOOR {
        (utility.u(wealth_t), false)
    } else {
        (utility.u(WEALTH_FLOOR), true)
    }
}
