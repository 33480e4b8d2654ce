//! Integration against the Gaussian weight `φ_s`, the density of `N(0, s·I_d)`.
//!
//! A [`GaussianRule`] stores standard-normal nodes `u_j` and weights `ω_j`, so
//! `∫ f φ_s ≈ Σ ω_j f(√s·u_j)` for every variance `s` with one node set.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{DrbcError, Result};
use crate::rng::{stream, substream};

pub const MIN_GH_NODES: usize = 5;
pub const MIN_MC_SAMPLES: usize = 10_000;
/// Tensor grids larger than this are refused.
pub const MAX_TENSOR_NODES: usize = 5_000_000;
const PARALLEL_THRESHOLD: usize = 1 << 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum QuadratureMethod {
    GaussHermite { nodes_per_dim: usize },
    MonteCarlo { n_samples: usize, seed: u64 },
}

impl QuadratureMethod {
    /// Tensor Gauss–Hermite with 40 nodes for `d ≤ 3`, 2×10⁵ Monte Carlo samples above.
    pub fn auto(dim: usize, seed: u64) -> Self {
        if dim <= 3 {
            QuadratureMethod::GaussHermite { nodes_per_dim: 40 }
        } else {
            QuadratureMethod::MonteCarlo { n_samples: 200_000, seed }
        }
    }

    /// Cheaper rule for rolling backtests, where plan horizons are short and
    /// the integrands nearly polynomial: 5-node tensor Gauss–Hermite while the
    /// grid stays under 2×10⁴ nodes, otherwise 10⁴ Monte Carlo samples.
    pub fn backtest_default(dim: usize, seed: u64) -> Self {
        if 5usize.checked_pow(dim as u32).is_some_and(|n| n <= 20_000) {
            QuadratureMethod::GaussHermite { nodes_per_dim: MIN_GH_NODES }
        } else {
            QuadratureMethod::MonteCarlo { n_samples: MIN_MC_SAMPLES, seed }
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match *self {
            QuadratureMethod::GaussHermite { nodes_per_dim } => {
                if nodes_per_dim < MIN_GH_NODES {
                    return Err(DrbcError::invalid(format!(
                        "Gauss-Hermite needs at least {MIN_GH_NODES} nodes per dimension, got {nodes_per_dim}"
                    )));
                }
                let total = u32::try_from(dim)
                    .ok()
                    .and_then(|d| nodes_per_dim.checked_pow(d))
                    .filter(|n| *n <= MAX_TENSOR_NODES);
                if total.is_none() {
                    return Err(DrbcError::invalid(format!(
                        "tensor grid {nodes_per_dim}^{dim} exceeds {MAX_TENSOR_NODES} nodes; use Monte Carlo"
                    )));
                }
            }
            QuadratureMethod::MonteCarlo { n_samples, .. } => {
                if n_samples < MIN_MC_SAMPLES {
                    return Err(DrbcError::invalid(format!(
                        "Monte Carlo needs at least {MIN_MC_SAMPLES} samples, got {n_samples}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Same method with its Monte Carlo seed replaced.
    pub fn reseeded(&self, seed: u64) -> Self {
        match *self {
            QuadratureMethod::MonteCarlo { n_samples, .. } => QuadratureMethod::MonteCarlo { n_samples, seed },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub method: QuadratureMethod,
    pub variance_scale: f64,
}

impl QuadratureSpec {
    pub fn new(method: QuadratureMethod, variance_scale: f64) -> Result<Self> {
        if !(variance_scale > 0.0 && variance_scale.is_finite()) {
            return Err(DrbcError::invalid(format!("variance scale must be positive, got {variance_scale}")));
        }
        Ok(Self { method, variance_scale })
    }
}

/// Standard-normal nodes (row-major, `n × dim`) and weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianRule {
    dim: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussianRule {
    pub fn new(method: &QuadratureMethod, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(DrbcError::invalid("dimension must be positive"));
        }
        method.validate(dim)?;
        Ok(match *method {
            QuadratureMethod::GaussHermite { nodes_per_dim } => tensor_hermite(nodes_per_dim, dim),
            QuadratureMethod::MonteCarlo { n_samples, seed } => antithetic_normal(n_samples, dim, seed),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn node(&self, j: usize) -> &[f64] {
        &self.nodes[j * self.dim..(j + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `Σ_j ω_j f(√s·u_j)` with pairwise summation in node order, so the
    /// result does not depend on the thread count.
    pub fn integrate<F>(&self, s: f64, f: F) -> Result<f64>
    where
        F: Fn(&[f64]) -> f64 + Sync,
    {
        let vals = self.integrate_vec(s, 1, |z, out| out[0] = f(z))?;
        Ok(vals[0])
    }

    /// Vector-valued version of [`integrate`](Self::integrate); `f` writes `m` outputs.
    pub fn integrate_vec<F>(&self, s: f64, m: usize, f: F) -> Result<Vec<f64>>
    where
        F: Fn(&[f64], &mut [f64]) + Sync,
    {
        if !(s >= 0.0) {
            return Err(DrbcError::invalid(format!("variance must be nonnegative, got {s}")));
        }
        let root = s.sqrt();
        let d = self.dim;
        let eval_chunk = |start: usize, end: usize| -> Vec<f64> {
            let mut z = vec![0.0; d];
            let mut out = vec![0.0; (end - start) * m];
            for j in start..end {
                for (zi, ui) in z.iter_mut().zip(self.node(j)) {
                    *zi = root * ui;
                }
                f(&z, &mut out[(j - start) * m..(j - start + 1) * m]);
            }
            out
        };
        let n = self.len();
        let values: Vec<f64> = if n >= PARALLEL_THRESHOLD {
            let chunk = 4096;
            (0..n.div_ceil(chunk))
                .into_par_iter()
                .map(|c| eval_chunk(c * chunk, ((c + 1) * chunk).min(n)))
                .collect::<Vec<_>>()
                .concat()
        } else {
            eval_chunk(0, n)
        };
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let j = pos / m;
            return Err(DrbcError::NonFiniteEvaluation {
                node: self.node(j).iter().map(|u| root * u).collect(),
                value: values[pos],
            });
        }
        let mut terms = vec![0.0; n];
        Ok((0..m)
            .map(|c| {
                for (j, t) in terms.iter_mut().enumerate() {
                    *t = self.weights[j] * values[j * m + c];
                }
                pairwise_sum(&terms)
            })
            .collect())
    }
}

/// `∫ f φ_s` for the rule described by `spec`.
pub fn gaussian_integrate<F>(f: F, dim: usize, spec: &QuadratureSpec) -> Result<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    GaussianRule::new(&spec.method, dim)?.integrate(spec.variance_scale, f)
}

/// Pairwise (cascade) summation with a fixed split order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Physicists' Gauss–Hermite nodes and weights (weight `e^{−x²}`), refined by
/// Newton iteration on the orthonormal recurrence.
fn gauss_hermite_physicists(n: usize) -> (Vec<f64>, Vec<f64>) {
    const MAX_IT: usize = 100;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let m = n.div_ceil(2);
    let nf = n as f64;
    let mut z = 0.0f64;
    for i in 0..m {
        z = match i {
            0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-0.16667),
            1 => z - 1.14 * nf.powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..MAX_IT {
            let mut p1 = pim4;
            let mut p2 = 0.0;
            for j in 0..n {
                let p3 = p2;
                p2 = p1;
                let jf = j as f64;
                p1 = z * (2.0 / (jf + 1.0)).sqrt() * p2 - (jf / (jf + 1.0)).sqrt() * p3;
            }
            pp = (2.0 * nf).sqrt() * p2;
            let z1 = z;
            z = z1 - p1 / pp;
            if (z - z1).abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

/// One-dimensional standard-normal rule, nodes ascending.
pub fn hermite_normal_1d(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w) = gauss_hermite_physicists(n);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> =
        x.iter().zip(&w).map(|(x, w)| (std::f64::consts::SQRT_2 * x, w / sqrt_pi)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn tensor_hermite(n: usize, dim: usize) -> GaussianRule {
    let (u, w) = hermite_normal_1d(n);
    let total = n.pow(dim as u32);
    let mut nodes = Vec::with_capacity(total * dim);
    let mut weights = Vec::with_capacity(total);
    let mut idx = vec![0usize; dim];
    for _ in 0..total {
        let mut wt = 1.0;
        for &i in &idx {
            nodes.push(u[i]);
            wt *= w[i];
        }
        weights.push(wt);
        for k in (0..dim).rev() {
            idx[k] += 1;
            if idx[k] < n {
                break;
            }
            idx[k] = 0;
        }
    }
    GaussianRule { dim, nodes, weights }
}

/// Seeded Monte Carlo sample with antithetic pairs `(u, −u)`.
fn antithetic_normal(n: usize, dim: usize, seed: u64) -> GaussianRule {
    let mut rng = substream(seed, stream::QUADRATURE, 0);
    let mut nodes = Vec::with_capacity(n * dim);
    let half = n / 2;
    let mut base = Vec::with_capacity(dim);
    for _ in 0..half {
        base.clear();
        base.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        nodes.extend_from_slice(&base);
        nodes.extend(base.iter().map(|v: &f64| -v));
    }
    if n % 2 == 1 {
        nodes.extend((0..dim).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
    }
    GaussianRule { dim, nodes, weights: vec![1.0 / n as f64; n] }
}
