//! Market specification, synthetic multi-asset price paths and the
//! observation process `Y(t)`.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DrbcError, Result};
use crate::rng::{stream, substream};

/// Largest accepted condition number of the volatility matrix.
pub const DEFAULT_CONDITION_CAP: f64 = 1e12;

/// Risk-free rate, volatility matrix, plan horizon and time step.
#[derive(Debug, Clone)]
pub struct MarketSpec {
    r: f64,
    sigma: DMatrix<f64>,
    sigma_inv: DMatrix<f64>,
    horizon: f64,
    dt: f64,
}

impl MarketSpec {
    pub fn new(r: f64, sigma: DMatrix<f64>, horizon: f64, dt: f64) -> Result<Self> {
        Self::with_condition_cap(r, sigma, horizon, dt, DEFAULT_CONDITION_CAP)
    }

    pub fn with_condition_cap(r: f64, sigma: DMatrix<f64>, horizon: f64, dt: f64, cap: f64) -> Result<Self> {
        let d = sigma.nrows();
        if d == 0 || sigma.ncols() != d {
            return Err(DrbcError::invalid(format!(
                "sigma must be a non-empty square matrix, got {}x{}",
                sigma.nrows(),
                sigma.ncols()
            )));
        }
        if !r.is_finite() || sigma.iter().any(|v| !v.is_finite()) {
            return Err(DrbcError::invalid("market parameters must be finite"));
        }
        if !(horizon > 0.0) {
            return Err(DrbcError::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(dt > 0.0 && dt < horizon) {
            return Err(DrbcError::invalid(format!("time step must satisfy 0 < dt < T, got dt={dt}, T={horizon}")));
        }
        let sv = sigma.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let smin = sv.min();
        if !(smin > 0.0) || smax / smin > cap {
            return Err(DrbcError::invalid(format!(
                "sigma is not invertible within condition cap {cap:e} (singular values {smin:e}..{smax:e})"
            )));
        }
        let sigma_inv = sigma.clone().try_inverse().ok_or_else(|| DrbcError::invalid("sigma is singular"))?;
        Ok(Self { r, sigma, sigma_inv, horizon, dt })
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }
    pub fn sigma_inv(&self) -> &DMatrix<f64> {
        &self.sigma_inv
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Same market with a different plan horizon. The time step is kept; the
    /// horizon only has to be positive here because plan horizons shrink to
    /// a single step near the end of a plan.
    pub fn with_horizon(&self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(DrbcError::invalid(format!("horizon must be positive, got {horizon}")));
        }
        let mut m = self.clone();
        m.horizon = horizon;
        Ok(m)
    }

    pub fn with_rate(&self, r: f64) -> Self {
        let mut m = self.clone();
        m.r = r;
        m
    }

    /// `σ^{-1}(b − r·1)`.
    pub fn market_price_of_risk(&self, b: &DVector<f64>) -> DVector<f64> {
        let excess = b.map(|v| v - self.r);
        &self.sigma_inv * excess
    }

    /// `½‖σ_{i·}‖²` per asset.
    pub fn half_row_variance(&self) -> DVector<f64> {
        DVector::from_iterator(self.dim(), self.sigma.row_iter().map(|row| 0.5 * row.norm_squared()))
    }

    /// `(σσᵀ)^{-1}`.
    pub fn precision(&self) -> DMatrix<f64> {
        self.sigma_inv.transpose() * &self.sigma_inv
    }
}

/// Distribution of the per-asset frequencies `κ_i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum KappaLaw {
    /// `Normal(0, 1)`: slowly varying drifts.
    Smooth,
    /// `Normal(12, 10)` with 10 the variance.
    Volatile,
    Normal {
        mean: f64,
        variance: f64,
    },
}

impl KappaLaw {
    pub fn mean_variance(&self) -> (f64, f64) {
        match *self {
            KappaLaw::Smooth => (0.0, 1.0),
            KappaLaw::Volatile => (12.0, 10.0),
            KappaLaw::Normal { mean, variance } => (mean, variance),
        }
    }

    pub fn label(&self) -> String {
        let (m, v) = self.mean_variance();
        format!("N({m},{v})")
    }
}

/// Sinusoidal time-varying drift `B_i(t) = (B0/2)(1 + 2 cos(2π κ_i t))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalDriftSpec {
    pub b0: f64,
    pub kappa: Vec<f64>,
}

impl SinusoidalDriftSpec {
    pub fn new(b0: f64, kappa: Vec<f64>) -> Result<Self> {
        if !(b0 > 0.0) {
            return Err(DrbcError::invalid(format!("B0 must be positive, got {b0}")));
        }
        if kappa.is_empty() || kappa.iter().any(|k| !k.is_finite()) {
            return Err(DrbcError::invalid("kappa must be a non-empty finite vector"));
        }
        Ok(Self { b0, kappa })
    }

    /// Draws `κ_i` i.i.d. from `law` using the seed's kappa substream.
    pub fn sample(b0: f64, law: KappaLaw, d: usize, seed: u64) -> Result<Self> {
        let (mean, var) = law.mean_variance();
        if !(var >= 0.0) {
            return Err(DrbcError::invalid("kappa variance must be nonnegative"));
        }
        let normal = Normal::new(mean, var.sqrt()).map_err(|e| DrbcError::invalid(format!("kappa law: {e}")))?;
        let mut rng = substream(seed, stream::KAPPA, 0);
        let kappa = (0..d).map(|_| normal.sample(&mut rng)).collect();
        Self::new(b0, kappa)
    }

    pub fn drift_at(&self, t: f64) -> DVector<f64> {
        let half = 0.5 * self.b0;
        DVector::from_iterator(
            self.kappa.len(),
            self.kappa.iter().map(|k| half * (1.0 + 2.0 * (2.0 * PI * k * t).cos())),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriftModel {
    Sinusoidal(SinusoidalDriftSpec),
    Constant(DVector<f64>),
}

impl DriftModel {
    pub fn dim(&self) -> usize {
        match self {
            DriftModel::Sinusoidal(s) => s.kappa.len(),
            DriftModel::Constant(b) => b.len(),
        }
    }

    pub fn drift_at(&self, t: f64) -> DVector<f64> {
        match self {
            DriftModel::Sinusoidal(s) => s.drift_at(t),
            DriftModel::Constant(b) => b.clone(),
        }
    }
}

/// Price grid: row `i` of `prices` is the price vector at `times[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathGrid {
    pub times: Vec<f64>,
    pub prices: DMatrix<f64>,
    /// Brownian increments `dW` (one row per step), retained for synthetic paths.
    pub brownian: Option<DMatrix<f64>>,
}

impl PathGrid {
    pub fn new(times: Vec<f64>, prices: DMatrix<f64>) -> Result<Self> {
        if times.len() != prices.nrows() {
            return Err(DrbcError::DimensionMismatch { expected: times.len(), actual: prices.nrows() });
        }
        if times.is_empty() || prices.ncols() == 0 {
            return Err(DrbcError::Data("empty price grid".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(DrbcError::Data("grid times must be strictly increasing".into()));
        }
        if let Some((idx, v)) = prices.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(DrbcError::Data(format!(
                "price at row {} column {} is not strictly positive: {v}",
                idx % prices.nrows(),
                idx / prices.nrows()
            )));
        }
        Ok(Self { times, prices, brownian: None })
    }

    pub fn dim(&self) -> usize {
        self.prices.ncols()
    }

    pub fn n_steps(&self) -> usize {
        self.prices.nrows() - 1
    }

    pub fn price_row(&self, i: usize) -> DVector<f64> {
        self.prices.row(i).transpose()
    }

    /// Exact grid lookup; interpolation is refused.
    pub fn index_of(&self, t: f64) -> Result<usize> {
        let tol = 1e-12 * (1.0 + t.abs());
        let idx = self.times.partition_point(|&x| x < t - tol);
        match self.times.get(idx) {
            Some(&x) if (x - t).abs() <= tol => Ok(idx),
            _ => Err(DrbcError::OffGrid(t)),
        }
    }

    /// Simple returns `S(i+1)/S(i) − 1` for step `i`.
    pub fn simple_return(&self, i: usize) -> DVector<f64> {
        DVector::from_iterator(self.dim(), (0..self.dim()).map(|a| self.prices[(i + 1, a)] / self.prices[(i, a)] - 1.0))
    }

    /// Writes `time,asset_1,...,asset_d` with 17 significant digits.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["time".to_string()];
        header.extend((1..=self.dim()).map(|i| format!("asset_{i}")));
        w.write_record(&header)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut rec = vec![fmt_f64(*t)];
            rec.extend(self.prices.row(i).iter().map(|v| fmt_f64(*v)));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a price CSV.
    ///
    /// With a `time` first column the times are taken verbatim. Otherwise the
    /// first column is a date (ISO-8601 or integer step index) and row `i`
    /// is placed at `i·dt`.
    pub fn read_csv<P: AsRef<Path>>(path: P, dt: f64) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers = rdr.headers()?.clone();
        if headers.len() < 2 {
            return Err(DrbcError::Data("price CSV needs a date/time column and at least one asset".into()));
        }
        let use_time = headers.get(0).map(|h| h.trim().eq_ignore_ascii_case("time")).unwrap_or(false);
        let d = headers.len() - 1;
        let mut times = Vec::new();
        let mut keys: Vec<String> = Vec::new();
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != d + 1 {
                return Err(DrbcError::Data(format!("row {} has {} fields, expected {}", row + 1, rec.len(), d + 1)));
            }
            let key = rec[0].trim();
            if use_time {
                times.push(parse_f64(key, row)?);
            } else {
                keys.push(key.to_string());
                times.push(row as f64 * dt);
            }
            for a in 1..=d {
                values.push(parse_f64(&rec[a], row)?);
            }
        }
        if !use_time {
            check_dates_increasing(&keys)?;
        }
        let n = times.len();
        let prices = DMatrix::from_row_slice(n, d, &values);
        PathGrid::new(times, prices)
    }
}

fn parse_f64(s: &str, row: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| DrbcError::Data(format!("row {}: cannot parse number '{s}'", row + 1)))
}

fn check_dates_increasing(keys: &[String]) -> Result<()> {
    let all_int = keys.iter().all(|k| k.parse::<i64>().is_ok());
    for w in keys.windows(2) {
        let ok = if all_int {
            w[1].parse::<i64>().unwrap() > w[0].parse::<i64>().unwrap()
        } else {
            // ISO-8601 dates and timestamps order lexicographically
            w[1] > w[0]
        };
        if !ok {
            return Err(DrbcError::Data(format!("dates not increasing: {} then {}", w[0], w[1])));
        }
    }
    Ok(())
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Simulates `n_steps` of exact log-Euler GBM with drift evaluated at the left
/// endpoint of each step. Step `i` draws its Brownian increment from the
/// `(seed, PRICE_STEP, i)` substream.
pub fn simulate_paths(
    market: &MarketSpec,
    drift: &DriftModel,
    n_steps: usize,
    s0: &DVector<f64>,
    seed: u64,
) -> Result<PathGrid> {
    let d = market.dim();
    if n_steps == 0 {
        return Err(DrbcError::invalid("n_steps must be at least 1"));
    }
    if drift.dim() != d {
        return Err(DrbcError::DimensionMismatch { expected: d, actual: drift.dim() });
    }
    if s0.len() != d || s0.iter().any(|v| !(*v > 0.0)) {
        return Err(DrbcError::invalid("initial prices must be positive with one per asset"));
    }
    let dt = market.dt();
    let sqrt_dt = dt.sqrt();
    let half_var = market.half_row_variance();
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut log_prices = DMatrix::zeros(n_steps + 1, d);
    let mut dw = DMatrix::zeros(n_steps, d);
    for a in 0..d {
        log_prices[(0, a)] = s0[a].ln();
    }
    times.push(0.0);
    let mut eps = DVector::zeros(d);
    for i in 0..n_steps {
        let t = i as f64 * dt;
        let mut rng = substream(seed, stream::PRICE_STEP, i as u64);
        for a in 0..d {
            let z: f64 = StandardNormal.sample(&mut rng);
            eps[a] = z * sqrt_dt;
            dw[(i, a)] = eps[a];
        }
        let shock = market.sigma() * &eps;
        let b = drift.drift_at(t);
        for a in 0..d {
            log_prices[(i + 1, a)] = log_prices[(i, a)] + (b[a] - half_var[a]) * dt + shock[a];
        }
        times.push((i + 1) as f64 * dt);
    }
    let prices = log_prices.map(f64::exp);
    let mut grid = PathGrid::new(times, prices)?;
    grid.brownian = Some(dw);
    Ok(grid)
}

/// `Y` accumulated between two price vectors `elapsed` years apart:
/// `σ^{-1}(log S(t) − log S(t0) + (½ diag(σσᵀ) − r·1)(t − t0))`.
pub fn observation_between(
    start: &DVector<f64>,
    end: &DVector<f64>,
    elapsed: f64,
    market: &MarketSpec,
) -> DVector<f64> {
    let half_var = market.half_row_variance();
    let v = DVector::from_iterator(
        market.dim(),
        (0..market.dim()).map(|a| (end[a] / start[a]).ln() + (half_var[a] - market.r()) * elapsed),
    );
    market.sigma_inv() * v
}

/// `Y(t_i)` for every grid point, measured from the first grid point.
pub fn observation_y(path: &PathGrid, market: &MarketSpec) -> Result<Vec<DVector<f64>>> {
    if path.dim() != market.dim() {
        return Err(DrbcError::DimensionMismatch { expected: market.dim(), actual: path.dim() });
    }
    let s0 = path.price_row(0);
    Ok((0..path.times.len())
        .map(|i| observation_between(&s0, &path.price_row(i), path.times[i] - path.times[0], market))
        .collect())
}

/// `Y(t)` at a grid time `t`; times off the grid are rejected.
pub fn observation_at(path: &PathGrid, market: &MarketSpec, t: f64) -> Result<DVector<f64>> {
    let i = path.index_of(t)?;
    Ok(observation_between(&path.price_row(0), &path.price_row(i), path.times[i] - path.times[0], market))
}
