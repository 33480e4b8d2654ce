//! Ledoit–Wolf shrinkage towards a scaled identity.

use nalgebra::{DMatrix, DVector};

use crate::error::{DrbcError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkCovariance {
    pub covariance: DMatrix<f64>,
    /// Weight `ρ ∈ [0, 1]` on the target `(tr S/d)·I`.
    pub shrinkage: f64,
}

/// Shrinks the maximum-likelihood covariance of the rows of `returns`
/// (`n × d`, centered internally) with the plug-in optimal intensity.
pub fn ledoit_wolf(returns: &DMatrix<f64>) -> Result<ShrunkCovariance> {
    let (n, d) = returns.shape();
    if n < 2 {
        return Err(DrbcError::InsufficientHistory { required: 2, available: n });
    }
    if d == 0 {
        return Err(DrbcError::invalid("covariance needs at least one column"));
    }
    if returns.iter().any(|v| !v.is_finite()) {
        return Err(DrbcError::Data("non-finite return in covariance input".into()));
    }
    let nf = n as f64;
    let mean = DVector::from_iterator(d, returns.column_iter().map(|c| c.mean()));
    let mut x = returns.clone();
    for mut row in x.row_iter_mut() {
        row -= mean.transpose();
    }
    let s = x.tr_mul(&x) / nf;
    let mu = s.trace() / d as f64;
    let x2 = x.map(|v| v * v);
    // (1/n)Σ_i ‖x_i x_iᵀ‖²_F − ‖S‖²_F, averaged over entries
    let fourth = x2.tr_mul(&x2).sum() / nf;
    let s_sq = s.iter().map(|v| v * v).sum::<f64>();
    let beta = (fourth - s_sq) / (d as f64 * nf);
    let delta = (s_sq - 2.0 * mu * s.trace() + d as f64 * mu * mu) / d as f64;
    let beta = beta.min(delta);
    let shrinkage = if delta == 0.0 { 0.0 } else { beta / delta };
    let mut covariance = s * (1.0 - shrinkage);
    for i in 0..d {
        covariance[(i, i)] += shrinkage * mu;
    }
    // exact symmetry for downstream Cholesky
    let covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(ShrunkCovariance { covariance, shrinkage })
}
