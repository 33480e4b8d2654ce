//! Multi-seed experiment grids and the radius-scale sweep.
//!
//! Every (cell, seed) job simulates its own market and runs all strategies
//! on that one path, so strategies are compared under common random numbers.
//! Jobs run in parallel and are collected in job order.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use super::{run_backtest, BacktestInput, BacktestReport, Strategy, StrategyMetrics, TradingProtocol};
use crate::error::{DrbcError, Result};
use crate::market::{simulate_paths, DriftModel, KappaLaw, MarketSpec, PathGrid, SinusoidalDriftSpec};
use crate::rng::derive_seed;
use crate::utility::PowerUtility;

/// One parameter combination of the synthetic study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub b0: f64,
    /// Trading periods per day, `m = 1/(252·dt)`.
    pub steps_per_day: u32,
    pub kappa: KappaLaw,
}

impl GridCell {
    pub fn dt(&self) -> f64 {
        1.0 / (252.0 * self.steps_per_day as f64)
    }

    pub fn label(&self) -> String {
        format!("B0={} m={} kappa={}", self.b0, self.steps_per_day, self.kappa.label())
    }

    /// The highlighted cell of the comparison tables.
    pub fn headline() -> Self {
        Self { b0: 0.4, steps_per_day: 11, kappa: KappaLaw::Smooth }
    }
}

/// The eight cells of the comparison tables in row order.
pub fn table_grid() -> Vec<GridCell> {
    let mut cells = Vec::new();
    for kappa in [KappaLaw::Smooth, KappaLaw::Volatile] {
        for b0 in [0.2, 0.4] {
            for m in [6, 11] {
                cells.push(GridCell { b0, steps_per_day: m, kappa });
            }
        }
    }
    cells
}

/// Synthetic market shared by the suite and the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticMarket {
    pub dim: usize,
    /// Diagonal volatility of every asset.
    pub sigma: f64,
    pub rate: f64,
    pub alpha: f64,
}

impl Default for SyntheticMarket {
    fn default() -> Self {
        Self { dim: 20, sigma: 0.3, rate: 0.01, alpha: -1.0 }
    }
}

impl SyntheticMarket {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !(self.sigma > 0.0) || !self.rate.is_finite() {
            return Err(DrbcError::invalid("synthetic market needs dim > 0, sigma > 0 and a finite rate"));
        }
        PowerUtility::new(self.alpha).map(|_| ())
    }

    pub fn market(&self, dt: f64) -> Result<MarketSpec> {
        let sigma = DMatrix::from_diagonal(&DVector::from_element(self.dim, self.sigma));
        MarketSpec::new(self.rate, sigma, 1.0, dt)
    }

    /// Drift and price path for one cell and seed.
    pub fn scenario(&self, cell: &GridCell, n_steps: usize, seed: u64) -> Result<(MarketSpec, DriftModel, PathGrid)> {
        let market = self.market(cell.dt())?;
        let drift = DriftModel::Sinusoidal(SinusoidalDriftSpec::sample(cell.b0, cell.kappa, self.dim, seed)?);
        let path = simulate_paths(&market, &drift, n_steps, &DVector::from_element(self.dim, 1.0), seed)?;
        Ok((market, drift, path))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub cells: Vec<GridCell>,
    pub n_seeds: usize,
    pub market: SyntheticMarket,
    pub protocol: TradingProtocol,
    pub strategies: Vec<Strategy>,
    /// Trading steps after the lookback.
    pub trade_steps: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            cells: table_grid(),
            n_seeds: 100,
            market: SyntheticMarket::default(),
            protocol: TradingProtocol::default(),
            strategies: Strategy::table_set(),
            trade_steps: 252,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() || self.n_seeds == 0 || self.strategies.is_empty() {
            return Err(DrbcError::invalid("suite needs at least one cell, seed and strategy"));
        }
        for c in &self.cells {
            if !(c.b0 > 0.0) || c.steps_per_day == 0 {
                return Err(DrbcError::invalid(format!("invalid grid cell {}", c.label())));
            }
        }
        self.market.validate()?;
        self.protocol.validate()
    }
}

/// One (cell, seed) job.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRow {
    pub cell: usize,
    pub seed_index: usize,
    pub seed: u64,
    /// Empty when the job failed.
    pub metrics: Vec<StrategyMetrics>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: usize,
    pub cell_label: String,
    pub strategy: String,
    /// Seeds with a finite Sharpe ratio.
    pub n: usize,
    pub sharpe_mean: f64,
    pub sharpe_std: f64,
    pub utility_mean: f64,
    pub utility_std: f64,
    pub mean_leverage: f64,
    pub short_cap_hit_rate: f64,
    pub bankruptcies: usize,
    pub failed_seeds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub cells: Vec<GridCell>,
    pub strategies: Vec<Strategy>,
    pub rows: Vec<SeedRow>,
    pub summary: Vec<CellSummary>,
}

impl SuiteResult {
    /// Per-seed values of `f` for one strategy in one cell (completed seeds only).
    pub fn values(&self, cell: usize, strategy: &Strategy, f: impl Fn(&StrategyMetrics) -> Option<f64>) -> Vec<f64> {
        let label = strategy.label();
        self.rows
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| r.metrics.iter().find(|m| m.strategy == label).and_then(&f))
            .collect()
    }

    /// Per-seed differences `f(a) − f(b)` on seeds where both are defined.
    pub fn paired(
        &self,
        cell: usize,
        a: &Strategy,
        b: &Strategy,
        f: impl Fn(&StrategyMetrics) -> Option<f64>,
    ) -> Vec<f64> {
        let (la, lb) = (a.label(), b.label());
        self.rows
            .iter()
            .filter(|r| r.cell == cell)
            .filter_map(|r| {
                let x = r.metrics.iter().find(|m| m.strategy == la).and_then(&f)?;
                let y = r.metrics.iter().find(|m| m.strategy == lb).and_then(&f)?;
                Some(x - y)
            })
            .collect()
    }
}

/// Seed of the `index`-th replication; identical across cells.
pub fn replication_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, index as u64)
}

pub fn run_experiment_suite(config: &SuiteConfig, base_seed: u64) -> Result<SuiteResult> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> =
        (0..config.cells.len()).flat_map(|c| (0..config.n_seeds).map(move |s| (c, s))).collect();
    let rows: Vec<SeedRow> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let seed = replication_seed(base_seed, s);
            match run_seed(config, c, seed) {
                Ok(report) => SeedRow {
                    cell: c,
                    seed_index: s,
                    seed,
                    metrics: report.runs.into_iter().map(|r| r.metrics).collect(),
                    error: None,
                },
                Err(e) => {
                    log::warn!("cell {c} seed {s} failed: {e}");
                    SeedRow { cell: c, seed_index: s, seed, metrics: Vec::new(), error: Some(e.to_string()) }
                }
            }
        })
        .collect();
    let summary = summarize(&config.cells, &config.strategies, &rows);
    Ok(SuiteResult { cells: config.cells.clone(), strategies: config.strategies.clone(), rows, summary })
}

/// Full backtest of one cell under one replication seed.
pub fn run_seed(config: &SuiteConfig, cell: usize, seed: u64) -> Result<BacktestReport> {
    let cell = config.cells.get(cell).ok_or_else(|| DrbcError::invalid(format!("no grid cell {cell}")))?;
    let utility = PowerUtility::new(config.market.alpha)?;
    let n_steps = config.protocol.lookback_steps + config.trade_steps;
    let (market, drift, path) = config.market.scenario(cell, n_steps, seed)?;
    let input = BacktestInput { path: &path, market: &market, drift: Some(&drift), utility };
    run_backtest(input, &config.protocol, &config.strategies, seed)
}

/// Per-cell, per-strategy aggregates of seed rows.
pub fn summarize(cells: &[GridCell], strategies: &[Strategy], rows: &[SeedRow]) -> Vec<CellSummary> {
    let mut summary = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let cell_rows: Vec<&SeedRow> = rows.iter().filter(|r| r.cell == c).collect();
        let failed = cell_rows.iter().filter(|r| r.error.is_some()).count();
        for strategy in strategies {
            let label = strategy.label();
            let ms: Vec<&StrategyMetrics> =
                cell_rows.iter().filter_map(|r| r.metrics.iter().find(|m| m.strategy == label)).collect();
            let sharpe: Vec<f64> = ms.iter().filter_map(|m| m.sharpe).collect();
            let util: Vec<f64> = ms.iter().map(|m| m.terminal_utility).collect();
            let (sm, ss) = mean_std(&sharpe);
            let (um, us) = mean_std(&util);
            summary.push(CellSummary {
                cell: c,
                cell_label: cell.label(),
                strategy: label,
                n: sharpe.len(),
                sharpe_mean: sm,
                sharpe_std: ss,
                utility_mean: um,
                utility_std: us,
                mean_leverage: mean_std(&ms.iter().map(|m| m.mean_leverage).collect::<Vec<_>>()).0,
                short_cap_hit_rate: mean_std(&ms.iter().map(|m| m.short_cap_hit_rate).collect::<Vec<_>>()).0,
                bankruptcies: ms.iter().filter(|m| m.bankrupt).count(),
                failed_seeds: failed,
            });
        }
    }
    summary
}

/// Sample mean and (n−1) standard deviation; NaN where undefined.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (m, f64::NAN);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
}

/// One-sided sign test: probability of at least this many positive
/// differences when each is positive with probability ½. Ties are dropped.
pub fn sign_test_p(diffs: &[f64]) -> f64 {
    let pos = diffs.iter().filter(|d| **d > 0.0).count() as u64;
    let n = diffs.iter().filter(|d| **d != 0.0).count() as u64;
    if n == 0 {
        return 1.0;
    }
    let bin = Binomial::new(0.5, n).expect("valid binomial");
    if pos == 0 {
        1.0
    } else {
        bin.sf(pos - 1)
    }
}

/// Equal-width histogram over `[lo, hi]`; values outside land in the end bins.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Vec<(f64, f64, usize)>> {
    if bins == 0 || !(hi > lo) {
        return Err(DrbcError::invalid("histogram needs bins > 0 and hi > lo"));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in values.iter().filter(|v| !v.is_nan()) {
        let b = ((v - lo) / width).floor();
        counts[b.clamp(0.0, (bins - 1) as f64) as usize] += 1;
    }
    Ok(counts.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub cell: GridCell,
    pub n_seeds: usize,
    pub market: SyntheticMarket,
    pub protocol: TradingProtocol,
    pub scales: Vec<f64>,
    /// Path length including the lookback.
    pub total_steps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            cell: GridCell::headline(),
            n_seeds: 100,
            market: SyntheticMarket::default(),
            protocol: TradingProtocol { eval_window: None, ..TradingProtocol::default() },
            scales: vec![0.0, 0.25, 1.0, 4.0, 16.0],
            total_steps: 3024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub seed_index: usize,
    pub seed: u64,
    pub strategy: String,
    pub scale: f64,
    pub utility: f64,
    pub oracle_utility: f64,
    /// `U(strategy) − U(oracle)`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub strategy: String,
    pub scale: f64,
    pub n: usize,
    pub mean_gap: f64,
    pub std_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    pub failed_seeds: usize,
}

impl SweepResult {
    /// Per-seed gaps for one family (`"DRBC"` or `"DRC"`) at one scale, in seed order.
    pub fn gaps(&self, family: &str, scale: f64) -> Vec<(usize, f64)> {
        self.rows.iter().filter(|r| r.strategy == family && r.scale == scale).map(|r| (r.seed_index, r.gap)).collect()
    }

    /// Paired `gap(scale_a) − gap(scale_b)` over common seeds.
    pub fn paired(&self, family: &str, scale_a: f64, scale_b: f64) -> Vec<f64> {
        let b = self.gaps(family, scale_b);
        self.gaps(family, scale_a)
            .into_iter()
            .filter_map(|(s, ga)| b.iter().find(|(t, _)| *t == s).map(|(_, gb)| ga - gb))
            .collect()
    }
}

/// Terminal-utility gap to the true-drift Merton strategy for DRBC and the DRC
/// surrogate across radius scale factors.
pub fn run_radius_sweep(config: &SweepConfig, base_seed: u64) -> Result<SweepResult> {
    config.market.validate()?;
    config.protocol.validate()?;
    if config.scales.is_empty() || config.scales.iter().any(|s| !(*s >= 0.0)) || config.n_seeds == 0 {
        return Err(DrbcError::invalid("sweep needs seeds and nonnegative scales"));
    }
    let utility = PowerUtility::new(config.market.alpha)?;
    let mut strategies = vec![Strategy::Oracle];
    strategies.extend(config.scales.iter().map(|&scale| Strategy::Drbc { scale }));
    strategies.extend(config.scales.iter().map(|&scale| Strategy::Drc { scale }));
    let per_seed: Vec<Result<BacktestReport>> = (0..config.n_seeds)
        .into_par_iter()
        .map(|s| {
            let seed = replication_seed(base_seed, s);
            let (market, drift, path) = config.market.scenario(&config.cell, config.total_steps, seed)?;
            let input = BacktestInput { path: &path, market: &market, drift: Some(&drift), utility };
            run_backtest(input, &config.protocol, &strategies, seed)
        })
        .collect();
    let mut rows = Vec::new();
    let mut failed = 0;
    for (s, report) in per_seed.into_iter().enumerate() {
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                log::warn!("sweep seed {s} failed: {e}");
                failed += 1;
                continue;
            }
        };
        let oracle = report.runs[0].metrics.terminal_utility;
        for run in &report.runs[1..] {
            let (family, scale) = match run.strategy {
                Strategy::Drbc { scale } => ("DRBC", scale),
                Strategy::Drc { scale } => ("DRC", scale),
                _ => unreachable!("sweep runs only DRBC and DRC besides the oracle"),
            };
            rows.push(SweepRow {
                seed_index: s,
                seed: report.seed,
                strategy: family.into(),
                scale,
                utility: run.metrics.terminal_utility,
                oracle_utility: oracle,
                gap: run.metrics.terminal_utility - oracle,
            });
        }
    }
    let mut points = Vec::new();
    for family in ["DRBC", "DRC"] {
        for &scale in &config.scales {
            let g: Vec<f64> = rows.iter().filter(|r| r.strategy == family && r.scale == scale).map(|r| r.gap).collect();
            let (m, sd) = mean_std(&g);
            points.push(SweepPoint { strategy: family.into(), scale, n: g.len(), mean_gap: m, std_gap: sd });
        }
    }
    Ok(SweepResult { rows, points, failed_seeds: failed })
}
