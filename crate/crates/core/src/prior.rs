//! Empirical drift priors built from windowed log-returns.

use std::path::Path;

use nalgebra::{DMatrixView, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DrbcError, Result};
use crate::market::{fmt_f64, MarketSpec, PathGrid};

const WEIGHT_TOL: f64 = 1e-12;

/// Finite set of drift atoms with probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPrior {
    atoms: Vec<DVector<f64>>,
    weights: Vec<f64>,
}

impl EmpiricalPrior {
    pub fn new(atoms: Vec<DVector<f64>>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(DrbcError::invalid("a prior needs at least one atom"));
        }
        if atoms.len() != weights.len() {
            return Err(DrbcError::DimensionMismatch { expected: atoms.len(), actual: weights.len() });
        }
        let d = atoms[0].len();
        if d == 0 {
            return Err(DrbcError::invalid("atoms must have positive dimension"));
        }
        for a in &atoms {
            if a.len() != d {
                return Err(DrbcError::DimensionMismatch { expected: d, actual: a.len() });
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(DrbcError::invalid("prior atoms must be finite"));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(DrbcError::invalid("prior weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(DrbcError::invalid(format!("prior weights sum to {total}, expected 1")));
        }
        Ok(Self { atoms, weights })
    }

    pub fn uniform(atoms: Vec<DVector<f64>>) -> Result<Self> {
        let n = atoms.len();
        let w = if n == 0 { Vec::new() } else { vec![1.0 / n as f64; n] };
        Self::new(atoms, w)
    }

    pub fn dirac(b: DVector<f64>) -> Result<Self> {
        Self::new(vec![b], vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms[0].len()
    }

    pub fn atoms(&self) -> &[DVector<f64>] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (a, w) in self.atoms.iter().zip(&self.weights) {
            m.axpy(*w, a, 1.0);
        }
        m
    }

    /// Same weights on new atoms.
    pub fn with_atoms(&self, atoms: Vec<DVector<f64>>) -> Result<Self> {
        Self::new(atoms, self.weights.clone())
    }

    /// Writes `weight,b_1,...,b_d`.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["weight".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("b_{i}")));
        w.write_record(&header)?;
        for (a, wt) in self.atoms.iter().zip(&self.weights) {
            let mut rec = vec![fmt_f64(*wt)];
            rec.extend(a.iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowingMode {
    Consecutive,
    Type,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowingSpec {
    pub mode: WindowingMode,
    pub window_len: usize,
    pub n_windows: usize,
    #[serde(default = "default_types")]
    pub n_types: usize,
}

fn default_types() -> usize {
    10
}

impl Default for WindowingSpec {
    fn default() -> Self {
        Self { mode: WindowingMode::Consecutive, window_len: 252, n_windows: 10, n_types: 10 }
    }
}

impl WindowingSpec {
    /// Steps of history consumed by one prior.
    pub fn required_steps(&self) -> usize {
        self.window_len * self.n_windows
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_len == 0 || self.n_windows == 0 {
            return Err(DrbcError::invalid("window_len and n_windows must be positive"));
        }
        if self.mode == WindowingMode::Type && (self.n_types == 0 || self.n_types > self.required_steps()) {
            return Err(DrbcError::invalid(format!(
                "n_types must lie in 1..={}, got {}",
                self.required_steps(),
                self.n_types
            )));
        }
        Ok(())
    }
}

/// `B̂_i = (log S_i(end) − log S_i(start))/span + ½‖σ_{i·}‖²` over the rows
/// (time points) of `prices`.
pub fn estimate_window_drift(
    prices: DMatrixView<'_, f64>,
    market: &MarketSpec,
    window_span: f64,
) -> Result<DVector<f64>> {
    if prices.nrows() < 2 {
        return Err(DrbcError::invalid("a window needs at least two price observations"));
    }
    if prices.ncols() != market.dim() {
        return Err(DrbcError::DimensionMismatch { expected: market.dim(), actual: prices.ncols() });
    }
    if !(window_span > 0.0) {
        return Err(DrbcError::invalid(format!("window span must be positive, got {window_span}")));
    }
    if prices.iter().any(|p| !(*p > 0.0)) {
        return Err(DrbcError::Data("nonpositive price in estimation window".into()));
    }
    let last = prices.nrows() - 1;
    let half_var = market.half_row_variance();
    Ok(DVector::from_iterator(
        market.dim(),
        (0..market.dim()).map(|a| (prices[(last, a)] / prices[(0, a)]).ln() / window_span + half_var[a]),
    ))
}

/// Prior from the `windowing.required_steps()` steps ending at grid index `end`.
pub fn build_prior(
    path: &PathGrid,
    end: usize,
    market: &MarketSpec,
    windowing: &WindowingSpec,
) -> Result<EmpiricalPrior> {
    windowing.validate()?;
    if path.dim() != market.dim() {
        return Err(DrbcError::DimensionMismatch { expected: market.dim(), actual: path.dim() });
    }
    let required = windowing.required_steps();
    let available = end.min(path.n_steps());
    if end > path.n_steps() || available < required {
        return Err(DrbcError::InsufficientHistory { required, available });
    }
    let start = end - required;
    let atoms = match windowing.mode {
        WindowingMode::Consecutive => (0..windowing.n_windows)
            .map(|w| {
                let a = start + w * windowing.window_len;
                let b = a + windowing.window_len;
                let span = path.times[b] - path.times[a];
                estimate_window_drift(path.prices.rows(a, b - a + 1), market, span)
            })
            .collect::<Result<Vec<_>>>()?,
        WindowingMode::Type => type_atoms(path, start, end, market, windowing.n_types)?,
    };
    EmpiricalPrior::uniform(atoms)
}

/// Steps are assigned round-robin by absolute index; each class mean of
/// one-step log-returns is annualized by `dt`.
fn type_atoms(
    path: &PathGrid,
    start: usize,
    end: usize,
    market: &MarketSpec,
    n_types: usize,
) -> Result<Vec<DVector<f64>>> {
    let d = market.dim();
    let mut sums = vec![DVector::<f64>::zeros(d); n_types];
    let mut counts = vec![0usize; n_types];
    for i in start..end {
        let c = i % n_types;
        for a in 0..d {
            let (p0, p1) = (path.prices[(i, a)], path.prices[(i + 1, a)]);
            if !(p0 > 0.0 && p1 > 0.0) {
                return Err(DrbcError::Data(format!("nonpositive price at step {i}")));
            }
            sums[c][a] += (p1 / p0).ln();
        }
        counts[c] += 1;
    }
    let half_var = market.half_row_variance();
    let dt = market.dt();
    Ok(sums.into_iter().zip(counts).map(|(s, n)| s.map(|v| v / (n as f64 * dt)) + &half_var).collect())
}

/// Per-component interval used to clip prior atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct ClampBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl ClampBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(DrbcError::DimensionMismatch { expected: lower.len(), actual: upper.len() });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l < u)) {
            return Err(DrbcError::invalid("clamp box needs lower < upper componentwise"));
        }
        Ok(Self { lower, upper })
    }

    pub fn symmetric(bound: f64, d: usize) -> Result<Self> {
        Self::new(DVector::from_element(d, -bound), DVector::from_element(d, bound))
    }
}

pub fn clamp_atoms(prior: &EmpiricalPrior, bounds: &ClampBox) -> Result<EmpiricalPrior> {
    if bounds.lower.len() != prior.dim() {
        return Err(DrbcError::DimensionMismatch { expected: prior.dim(), actual: bounds.lower.len() });
    }
    let atoms =
        prior.atoms.iter().map(|a| a.zip_zip_map(&bounds.lower, &bounds.upper, |v, l, u| v.clamp(l, u))).collect();
    prior.with_atoms(atoms)
}
