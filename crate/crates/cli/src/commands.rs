//! The four subcommands. Parallelism stays inside the engine; every file is
//! written from this thread after the numbers are in.

use std::path::Path;

use drbc_core::backtest::ledoit_wolf::ledoit_wolf;
use drbc_core::backtest::suite::{
    histogram, replication_seed, run_experiment_suite, run_radius_sweep, run_seed, summarize, CellSummary, GridCell,
    SeedRow, SuiteConfig,
};
use drbc_core::backtest::{run_backtest, BacktestInput, BacktestReport, Strategy, TradingProtocol};
use drbc_core::calibration::{select_delta, CalibrationResult};
use drbc_core::market::simulate_paths;
use drbc_core::prior::build_prior;
use drbc_core::quadrature::GaussianRule;
use drbc_core::robust::{perturb_prior, RobustSpec};
use drbc_core::utility::PowerUtility;
use drbc_core::{DriftModel, MarketSpec, PathGrid, QuadratureMethod, SinusoidalDriftSpec};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{section, DriftSection, HistogramSpec, MarketSection, RunConfig};
use crate::error::CliError;
use crate::output::{num, opt_num, InputDigest, OutputDir, Table};

fn sigma_matrix(rows: &[Vec<f64>], field: &str) -> Result<DMatrix<f64>, CliError> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(CliError::Config(format!("{field} must be a non-empty square matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

fn market_spec(m: &MarketSection) -> Result<MarketSpec, CliError> {
    Ok(MarketSpec::new(m.r, sigma_matrix(&m.sigma, "market.sigma")?, m.horizon, m.dt)?)
}

fn drift_model(section: &DriftSection, d: usize, seed: u64) -> Result<DriftModel, CliError> {
    let check = |len: usize, field: &str| {
        if len == d {
            Ok(())
        } else {
            Err(CliError::Config(format!("{field} has {len} entries but the market has {d} assets")))
        }
    };
    match section {
        DriftSection::Constant { b } => {
            check(b.len(), "drift.constant.b")?;
            Ok(DriftModel::Constant(DVector::from_vec(b.clone())))
        }
        DriftSection::Sinusoidal { b0, kappa, kappa_law } => match (kappa, kappa_law) {
            (Some(k), None) => {
                check(k.len(), "drift.sinusoidal.kappa")?;
                Ok(DriftModel::Sinusoidal(SinusoidalDriftSpec::new(*b0, k.clone())?))
            }
            (None, Some(law)) => Ok(DriftModel::Sinusoidal(SinusoidalDriftSpec::sample(*b0, *law, d, seed)?)),
            _ => Err(CliError::Config("drift.sinusoidal needs exactly one of `kappa` and `kappa_law`".into())),
        },
    }
}

fn require_prices<'a>(prices: Option<&'a Path>, command: &str) -> Result<&'a Path, CliError> {
    prices.ok_or_else(|| CliError::Config(format!("`{command}` needs --prices <csv>")))
}

fn read_prices(path: &Path, dt: f64) -> Result<PathGrid, CliError> {
    PathGrid::read_csv(path, dt).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn simulate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let market = market_spec(section(&cfg.market, "market", "simulate")?)?;
    let sim = section(&cfg.simulate, "simulate", "simulate")?;
    let seed = cfg.seed.unwrap_or(0);
    let d = market.dim();
    let drift = drift_model(section(&cfg.drift, "drift", "simulate")?, d, seed)?;
    let s0 = sim.s0.clone().unwrap_or_else(|| vec![1.0; d]);
    if s0.len() != d {
        return Err(CliError::Config(format!("simulate.s0 has {} entries but the market has {d} assets", s0.len())));
    }
    let path = simulate_paths(&market, &drift, sim.n_steps, &DVector::from_vec(s0), seed)?;

    let mut dir = OutputDir::create(out)?;
    path.write_csv(dir.path("paths.csv"))?;
    dir.register("paths.csv")?;
    let mut header = vec!["time".to_string()];
    header.extend((1..=d).map(|i| format!("b_{i}")));
    let mut table = Table::new(header);
    for &t in &path.times {
        let mut row = vec![num(t)];
        row.extend(drift.drift_at(t).iter().map(|v| num(*v)));
        table.push(row);
    }
    dir.write_table("drift.csv", &table)?;
    dir.finish("simulate", cfg, Vec::new())
}

#[derive(Serialize)]
struct CalibrationOutput<'a> {
    calibration: &'a CalibrationResult,
    end_index: usize,
    end_time: f64,
    quadrature: QuadratureMethod,
    prior: AtomSet,
    perturbation: PerturbationOutput,
}

#[derive(Serialize)]
struct AtomSet {
    atoms: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

#[derive(Serialize)]
struct PerturbationOutput {
    delta: f64,
    tau: f64,
    h_norm: f64,
    predicted_value_shift: f64,
    large_radius: bool,
    atoms: Vec<Vec<f64>>,
}

pub fn calibrate(cfg: &RunConfig, prices: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let prices = require_prices(prices, "calibrate")?;
    let market = market_spec(section(&cfg.market, "market", "calibrate")?)?;
    let windowing = section(&cfg.windowing, "windowing", "calibrate")?;
    let utility = PowerUtility::new(section(&cfg.utility, "utility", "calibrate")?.alpha)?;
    let calib = cfg.calibration.clone().unwrap_or_default();
    let robust = cfg.robust.unwrap_or_default();
    let seed = cfg.seed.unwrap_or(0);
    let d = market.dim();

    let path = read_prices(prices, market.dt())?;
    if path.dim() != d {
        return Err(CliError::Data(format!("price file has {} assets, market.sigma has {d}", path.dim())));
    }
    let end = calib.end_index.unwrap_or(path.n_steps());
    let prior = build_prior(&path, end, &market, windowing)?;
    let method = calib.quadrature.unwrap_or_else(|| QuadratureMethod::auto(d, seed));
    let rule = GaussianRule::new(&method, d)?;
    let result = select_delta(&prior, calib.x0, &utility, &market, &rule, calib.confidence, calib.quantile)?;
    let spec = RobustSpec::new(result.delta * robust.delta_scale, robust.tau)?;
    let pert = perturb_prior(&prior, &spec, &utility, &market, &rule)?;

    let mut dir = OutputDir::create(out)?;
    let atoms = |p: &drbc_core::EmpiricalPrior| p.atoms().iter().map(|a| a.iter().copied().collect()).collect();
    let payload = CalibrationOutput {
        calibration: &result,
        end_index: end,
        end_time: path.times[end.min(path.n_steps())],
        quadrature: method,
        prior: AtomSet { atoms: atoms(&prior), weights: prior.weights().to_vec() },
        perturbation: PerturbationOutput {
            delta: spec.delta,
            tau: spec.tau,
            h_norm: pert.h_norm,
            predicted_value_shift: pert.predicted_value_shift,
            large_radius: pert.large_radius,
            atoms: atoms(&pert.perturbed),
        },
    };
    dir.write_json("calibration.json", &payload)?;
    prior.write_csv(dir.path("prior.csv"))?;
    dir.register("prior.csv")?;
    pert.write_csv(&prior, dir.path("perturbation.csv"))?;
    dir.register("perturbation.csv")?;
    println!("{}", result.summary_line());
    dir.finish("calibrate", cfg, vec![InputDigest::of("prices", prices)?])
}

/// Per-seed metric rows; failed seeds get one row per strategy carrying the error.
fn report_table(cells: &[GridCell], strategies: &[Strategy], rows: &[SeedRow]) -> Table {
    let mut t = Table::new([
        "cell",
        "seed_index",
        "seed",
        "strategy",
        "sharpe",
        "terminal_wealth",
        "terminal_utility",
        "bankrupt",
        "mean_leverage",
        "max_leverage",
        "short_cap_hit_rate",
        "fallbacks",
        "error",
    ]);
    for r in rows {
        let cell = cells.get(r.cell).map(|c| c.label()).unwrap_or_else(|| "prices".into());
        let head = |label: String| vec![cell.clone(), r.seed_index.to_string(), r.seed.to_string(), label];
        if let Some(err) = &r.error {
            for s in strategies {
                let mut row = head(s.label());
                row.extend(std::iter::repeat_n(String::new(), 8));
                row.push(err.clone());
                t.push(row);
            }
            continue;
        }
        for m in &r.metrics {
            let mut row = head(m.strategy.clone());
            row.extend([
                opt_num(m.sharpe),
                num(m.terminal_wealth),
                num(m.terminal_utility),
                m.bankrupt.to_string(),
                num(m.mean_leverage),
                num(m.max_leverage),
                num(m.short_cap_hit_rate),
                m.fallbacks.to_string(),
                String::new(),
            ]);
            t.push(row);
        }
    }
    t
}

fn summary_table(summary: &[CellSummary]) -> Table {
    let mut t = Table::new([
        "cell",
        "strategy",
        "n",
        "sharpe_mean",
        "sharpe_std",
        "utility_mean",
        "utility_std",
        "mean_leverage",
        "short_cap_hit_rate",
        "bankruptcies",
        "failed_seeds",
    ]);
    for s in summary {
        t.push(vec![
            s.cell_label.clone(),
            s.strategy.clone(),
            s.n.to_string(),
            num(s.sharpe_mean),
            num(s.sharpe_std),
            num(s.utility_mean),
            num(s.utility_std),
            num(s.mean_leverage),
            num(s.short_cap_hit_rate),
            s.bankruptcies.to_string(),
            s.failed_seeds.to_string(),
        ]);
    }
    t
}

/// Binned Sharpe counts per cell and strategy.
fn histogram_table(
    cells: &[String],
    strategies: &[Strategy],
    rows: &[SeedRow],
    spec: &HistogramSpec,
) -> Result<Table, CliError> {
    let mut t = Table::new(["cell", "strategy", "bin_lo", "bin_hi", "count"]);
    for (c, cell) in cells.iter().enumerate() {
        for s in strategies {
            let label = s.label();
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| r.cell == c)
                .filter_map(|r| r.metrics.iter().find(|m| m.strategy == label).and_then(|m| m.sharpe))
                .collect();
            for (lo, hi, count) in histogram(&values, spec.lo, spec.hi, spec.bins)? {
                t.push(vec![cell.clone(), label.clone(), num(lo), num(hi), count.to_string()]);
            }
        }
    }
    Ok(t)
}

/// Weight paths, wealth paths and the calibration trace of one backtest.
fn write_run_detail(dir: &mut OutputDir, report: &BacktestReport) -> Result<(), CliError> {
    for run in &report.runs {
        let d = run.weights.first().map_or(0, |w| w.weights.len());
        let mut header = vec!["time".to_string(), "cash".to_string()];
        header.extend((1..=d).map(|i| format!("w_{i}")));
        let mut t = Table::new(header);
        for (time, w) in report.times.iter().zip(&run.weights) {
            let mut row = vec![num(*time), num(w.cash)];
            row.extend(w.weights.iter().map(|v| num(*v)));
            t.push(row);
        }
        dir.write_table(&format!("weights_{}.csv", run.metrics.strategy), &t)?;
    }
    let mut header = vec!["time".to_string()];
    header.extend(report.runs.iter().map(|r| r.metrics.strategy.clone()));
    let mut t = Table::new(header);
    for (i, time) in report.times.iter().enumerate() {
        let mut row = vec![num(*time)];
        row.extend(report.runs.iter().map(|r| num(r.wealth[i])));
        t.push(row);
    }
    dir.write_table("wealth.csv", &t)?;
    let mut t = Table::new(["step", "delta", "k_hat", "error"]);
    for u in &report.updates {
        t.push(vec![u.step.to_string(), opt_num(u.delta), opt_num(u.k_hat), u.error.clone().unwrap_or_default()]);
    }
    dir.write_table("updates.csv", &t)
}

fn seed_row(cell: usize, seed_index: usize, seed: u64, outcome: &Result<BacktestReport, String>) -> SeedRow {
    match outcome {
        Ok(report) => SeedRow {
            cell,
            seed_index,
            seed,
            metrics: report.runs.iter().map(|r| r.metrics.clone()).collect(),
            error: None,
        },
        Err(e) => SeedRow { cell, seed_index, seed, metrics: Vec::new(), error: Some(e.clone()) },
    }
}

pub fn backtest(cfg: &RunConfig, prices: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let protocol = cfg.protocol.clone().unwrap_or_default();
    let bt = cfg.backtest.clone().unwrap_or_default();
    let seed = cfg.seed.unwrap_or(0);
    match prices {
        Some(prices) => backtest_prices(cfg, &protocol, &bt, prices, seed, out),
        None => backtest_synthetic(cfg, protocol, bt, seed, out),
    }
}

fn backtest_prices(
    cfg: &RunConfig,
    protocol: &TradingProtocol,
    bt: &crate::config::BacktestSection,
    prices: &Path,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let src = &bt.prices;
    let path = read_prices(prices, src.dt)?;
    let sigma = match &src.sigma {
        Some(rows) => sigma_matrix(rows, "backtest.prices.sigma")?,
        None => initial_sigma(&path, protocol.lookback_steps, src.dt)?,
    };
    if sigma.nrows() != path.dim() {
        return Err(CliError::Data(format!("price file has {} assets, sigma has {}", path.dim(), sigma.nrows())));
    }
    let market = MarketSpec::new(src.rate, sigma, 1.0, src.dt)?;
    let utility = PowerUtility::new(src.alpha)?;
    let input = BacktestInput { path: &path, market: &market, drift: None, utility };
    let report = run_backtest(input, protocol, &bt.strategies, seed)?;
    let rows = vec![seed_row(0, 0, seed, &Ok(report.clone()))];
    let cell = GridCell { b0: f64::NAN, steps_per_day: 1, kappa: drbc_core::KappaLaw::Smooth };
    let mut summary = summarize(&[cell], &bt.strategies, &rows);
    for s in &mut summary {
        s.cell_label = "prices".into();
    }

    let mut dir = OutputDir::create(out)?;
    dir.write_table("report.csv", &report_table(&[], &bt.strategies, &rows))?;
    dir.write_table("summary.csv", &summary_table(&summary))?;
    dir.write_table("hist_sharpe.csv", &histogram_table(&["prices".into()], &bt.strategies, &rows, &bt.histogram)?)?;
    write_run_detail(&mut dir, &report)?;
    dir.finish("backtest", cfg, vec![InputDigest::of("prices", prices)?])
}

/// Cholesky factor of the Ledoit–Wolf covariance of the first lookback window.
fn initial_sigma(path: &PathGrid, lookback: usize, dt: f64) -> Result<DMatrix<f64>, CliError> {
    let n = lookback.min(path.n_steps());
    let d = path.dim();
    let mut rets = DMatrix::zeros(n, d);
    for i in 0..n {
        for a in 0..d {
            let (p0, p1) = (path.prices[(i, a)], path.prices[(i + 1, a)]);
            if !(p0 > 0.0 && p1 > 0.0) {
                return Err(CliError::Data(format!("nonpositive price at row {}", i + 1)));
            }
            rets[(i, a)] = (p1 / p0).ln();
        }
    }
    let cov = ledoit_wolf(&rets)?.covariance / dt;
    cov.cholesky().map(|c| c.l()).ok_or_else(|| CliError::Data("estimated covariance is not positive definite".into()))
}

fn backtest_synthetic(
    cfg: &RunConfig,
    protocol: TradingProtocol,
    bt: crate::config::BacktestSection,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let suite = SuiteConfig {
        cells: vec![bt.cell],
        n_seeds: bt.n_seeds,
        market: bt.market.clone(),
        protocol,
        strategies: bt.strategies.clone(),
        trade_steps: bt.trade_steps,
    };
    suite.validate()?;
    let outcomes: Vec<Result<BacktestReport, String>> = (0..suite.n_seeds)
        .into_par_iter()
        .map(|s| run_seed(&suite, 0, replication_seed(seed, s)).map_err(|e| e.to_string()))
        .collect();
    let rows: Vec<SeedRow> =
        outcomes.iter().enumerate().map(|(s, o)| seed_row(0, s, replication_seed(seed, s), o)).collect();
    for r in rows.iter().filter(|r| r.error.is_some()) {
        log::warn!("seed {} failed: {}", r.seed_index, r.error.as_deref().unwrap_or(""));
    }
    let summary = summarize(&suite.cells, &suite.strategies, &rows);

    let mut dir = OutputDir::create(out)?;
    dir.write_table("report.csv", &report_table(&suite.cells, &suite.strategies, &rows))?;
    dir.write_table("summary.csv", &summary_table(&summary))?;
    let labels = vec![bt.cell.label()];
    dir.write_table("hist_sharpe.csv", &histogram_table(&labels, &suite.strategies, &rows, &bt.histogram)?)?;
    if let Some(Ok(first)) = outcomes.first() {
        write_run_detail(&mut dir, first)?;
    }
    dir.finish("backtest", cfg, Vec::new())
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    if cfg.grid.is_none() && cfg.sweep.is_none() {
        return Err(CliError::Config("missing field `grid` or `sweep`: `sweep` needs at least one".into()));
    }
    let seed = cfg.seed.unwrap_or(0);
    let hist = cfg.backtest.as_ref().map(|b| b.histogram).unwrap_or_default();
    let grid = cfg.grid.as_ref().map(|g| run_experiment_suite(g, seed)).transpose()?;
    let radius = cfg.sweep.as_ref().map(|s| run_radius_sweep(s, seed)).transpose()?;

    let mut dir = OutputDir::create(out)?;
    if let Some(res) = &grid {
        dir.write_table("report.csv", &report_table(&res.cells, &res.strategies, &res.rows))?;
        dir.write_table("summary.csv", &summary_table(&res.summary))?;
        let labels: Vec<String> = res.cells.iter().map(|c| c.label()).collect();
        dir.write_table("hist_sharpe.csv", &histogram_table(&labels, &res.strategies, &res.rows, &hist)?)?;
    }
    if let Some(res) = &radius {
        let mut t = Table::new(["strategy", "delta_scale", "n", "mean_gap", "std_gap", "se_gap"]);
        for p in &res.points {
            let se = p.std_gap / (p.n as f64).sqrt();
            t.push(vec![p.strategy.clone(), num(p.scale), p.n.to_string(), num(p.mean_gap), num(p.std_gap), num(se)]);
        }
        dir.write_table("radius_sweep.csv", &t)?;
        let mut t = Table::new(["seed_index", "seed", "strategy", "delta_scale", "utility", "oracle_utility", "gap"]);
        for r in &res.rows {
            t.push(vec![
                r.seed_index.to_string(),
                r.seed.to_string(),
                r.strategy.clone(),
                num(r.scale),
                num(r.utility),
                num(r.oracle_utility),
                num(r.gap),
            ]);
        }
        dir.write_table("radius_sweep_seeds.csv", &t)?;
        if res.failed_seeds > 0 {
            log::warn!("{} sweep seeds failed", res.failed_seeds);
        }
    }
    dir.finish("sweep", cfg, Vec::new())
}
