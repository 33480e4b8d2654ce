//! Rolling-window trading loop.
//!
//! Trading starts `lookback_steps` into the price path and runs to its end.
//! Priors are rebuilt every `prior_update_every` steps; Bayesian and DRBC
//! weights are recomputed every step from the current observation `Y`,
//! while the static strategies only move at rebalance boundaries.

pub mod ledoit_wolf;
pub mod metrics;
pub mod suite;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::{select_delta, QuantileMode};
use crate::error::{DrbcError, Result};
use crate::market::{observation_between, DriftModel, MarketSpec, PathGrid};
use crate::merton::FractionEvaluator;
use crate::policies::{
    apply_short_cap, drc_policy, drmv_rf_solve, drmv_solve, merton_plugin, short_cap_hits, DrmvProblem, PolicyWeights,
};
use crate::prior::{build_prior, clamp_atoms, ClampBox, EmpiricalPrior, WindowingSpec};
use crate::quadrature::{GaussianRule, QuadratureMethod};
use crate::rng::derive_seed;
use crate::robust::{influence_at_atoms, pushforward, RobustSpec};
use crate::utility::PowerUtility;

use ledoit_wolf::ledoit_wolf;
use metrics::{portfolio_return, sharpe_from_returns, terminal_utility, WEALTH_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionMode {
    /// One pushforward per prior update.
    Static,
    /// Pushforward recomputed every step over the remaining plan horizon.
    TimeVarying,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolatilitySource {
    /// Use the volatility of the supplied market.
    Known,
    /// Cholesky factor of the Ledoit–Wolf covariance of lookback log-returns.
    LedoitWolf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrmvSettings {
    pub delta: f64,
    /// Annual target return without the risk-free asset.
    pub target_return: f64,
    /// Annual target return when the risk-free asset is included.
    pub rf_target_return: f64,
    /// Annualized return variance given to the risk-free asset.
    pub rf_variance: f64,
    pub p_norm: f64,
}

impl Default for DrmvSettings {
    fn default() -> Self {
        Self { delta: 1e-4, target_return: 0.10, rf_target_return: 0.105, rf_variance: 1e-6, p_norm: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TradingProtocol {
    pub lookback_steps: usize,
    pub rebalance_every: usize,
    pub prior_update_every: usize,
    /// Steps at the end of the run used for the Sharpe ratio; `None` uses all.
    pub eval_window: Option<usize>,
    /// Plan horizon in years; defaults to `prior_update_every·dt`.
    pub plan_horizon: Option<f64>,
    pub eval_rate: f64,
    pub projection: ProjectionMode,
    pub windowing: WindowingSpec,
    pub short_cap: Option<f64>,
    pub confidence: f64,
    pub quantile: QuantileMode,
    /// Quadrature rule; `None` picks [`QuadratureMethod::backtest_default`].
    pub quadrature: Option<QuadratureMethod>,
    pub volatility: VolatilitySource,
    /// Decide with data one step old and skip trading at rebalance boundaries.
    pub info_lag: bool,
    /// Symmetric bound applied to every prior atom component.
    pub atom_clamp: Option<f64>,
    pub drmv: DrmvSettings,
}

impl Default for TradingProtocol {
    fn default() -> Self {
        Self {
            lookback_steps: 2520,
            rebalance_every: 22,
            prior_update_every: 30,
            eval_window: Some(252),
            plan_horizon: None,
            eval_rate: 0.01,
            projection: ProjectionMode::Static,
            windowing: WindowingSpec { window_len: 252, n_windows: 10, ..WindowingSpec::default() },
            short_cap: Some(0.5),
            confidence: 0.95,
            quantile: QuantileMode::Analytic,
            quadrature: None,
            volatility: VolatilitySource::Known,
            info_lag: false,
            atom_clamp: None,
            drmv: DrmvSettings::default(),
        }
    }
}

impl TradingProtocol {
    /// Daily data, monthly (21-day) rolling, five-year lookback, two-month plan
    /// horizon, Ledoit–Wolf volatility and a one-day information lag. Pair
    /// with a market whose rate is the 5% trading rate.
    pub fn monthly_real() -> Self {
        Self {
            lookback_steps: 1260,
            rebalance_every: 21,
            prior_update_every: 21,
            eval_window: None,
            plan_horizon: Some(2.0 / 12.0),
            eval_rate: 0.04,
            projection: ProjectionMode::Static,
            windowing: WindowingSpec { window_len: 125, n_windows: 10, ..WindowingSpec::default() },
            short_cap: Some(0.5),
            confidence: 0.95,
            quantile: QuantileMode::Analytic,
            quadrature: None,
            volatility: VolatilitySource::LedoitWolf,
            info_lag: true,
            atom_clamp: Some(1.0),
            drmv: DrmvSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback_steps == 0 || self.rebalance_every == 0 || self.prior_update_every == 0 {
            return Err(DrbcError::invalid("protocol step counts must be positive"));
        }
        if self.eval_window == Some(0) {
            return Err(DrbcError::invalid("eval_window must be positive"));
        }
        self.windowing.validate()?;
        let need = self.windowing.required_steps() + self.info_lag as usize;
        if self.lookback_steps < need {
            return Err(DrbcError::invalid(format!(
                "lookback_steps {} is shorter than the {need} steps the prior windows need",
                self.lookback_steps
            )));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(DrbcError::invalid("confidence must lie in (0,1)"));
        }
        if let Some(cap) = self.short_cap {
            if !(cap >= 0.0) {
                return Err(DrbcError::invalid("short cap must be nonnegative"));
            }
        }
        if let Some(b) = self.atom_clamp {
            if !(b > 0.0) {
                return Err(DrbcError::invalid("atom clamp must be positive"));
            }
        }
        if !self.eval_rate.is_finite() {
            return Err(DrbcError::invalid("eval_rate must be finite"));
        }
        Ok(())
    }

    pub fn plan_horizon_for(&self, dt: f64) -> Result<f64> {
        let h = self.plan_horizon.unwrap_or(self.prior_update_every as f64 * dt);
        // the last step of an update block sits at t = (every−1)·dt
        if !(h > (self.prior_update_every as f64 - 1.0) * dt * (1.0 + 1e-12)) || h <= dt {
            return Err(DrbcError::invalid(format!(
                "plan horizon {h} must exceed both dt and the prior update period"
            )));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    Bayesian,
    Drbc {
        scale: f64,
    },
    DrmvNoRf,
    DrmvRf,
    Drc {
        scale: f64,
    },
    Plugin,
    RiskFree,
    /// Merton weights at the true drift; needs the drift model.
    Oracle,
}

impl Strategy {
    /// The five strategies of the comparison tables.
    pub fn table_set() -> Vec<Strategy> {
        vec![
            Strategy::Bayesian,
            Strategy::Drbc { scale: 1.0 },
            Strategy::DrmvNoRf,
            Strategy::DrmvRf,
            Strategy::Drc { scale: 1.0 },
        ]
    }

    pub fn label(&self) -> String {
        match self {
            Strategy::Bayesian => "Bayesian".into(),
            Strategy::Drbc { scale } if *scale == 1.0 => "DRBC".into(),
            Strategy::Drbc { scale } => format!("DRBC_x{scale}"),
            Strategy::DrmvNoRf => "DRMV_no_rf".into(),
            Strategy::DrmvRf => "DRMV_rf".into(),
            Strategy::Drc { scale } if *scale == 1.0 => "DRC".into(),
            Strategy::Drc { scale } => format!("DRC_x{scale}"),
            Strategy::Plugin => "Plugin".into(),
            Strategy::RiskFree => "RiskFree".into(),
            Strategy::Oracle => "Oracle".into(),
        }
    }

    fn is_merton_type(&self) -> bool {
        matches!(self, Strategy::Bayesian | Strategy::Drbc { .. } | Strategy::Drc { .. } | Strategy::Plugin)
    }

    fn validate(&self) -> Result<()> {
        match self {
            Strategy::Drbc { scale } | Strategy::Drc { scale } if !(*scale >= 0.0 && scale.is_finite()) => {
                Err(DrbcError::invalid(format!("{}: radius scale must be nonnegative", self.label())))
            }
            _ => Ok(()),
        }
    }
}

/// Everything one backtest needs besides the protocol.
#[derive(Debug, Clone, Copy)]
pub struct BacktestInput<'a> {
    pub path: &'a PathGrid,
    /// Trading rate, `dt` and (for known volatility) `σ`. Its horizon is unused.
    pub market: &'a MarketSpec,
    pub drift: Option<&'a DriftModel>,
    pub utility: PowerUtility,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StrategyMetrics {
    pub strategy: String,
    /// `None` when the evaluation window has zero variance but nonzero mean.
    pub sharpe: Option<f64>,
    pub terminal_wealth: f64,
    pub terminal_utility: f64,
    pub bankrupt: bool,
    pub mean_leverage: f64,
    pub max_leverage: f64,
    pub short_cap_hit_rate: f64,
    /// Updates (or rebalances) where calibration or a solver fell back.
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StrategyRun {
    pub strategy: Strategy,
    /// Wealth at every trading time, starting from 1.
    pub wealth: Vec<f64>,
    pub returns: Vec<f64>,
    /// Weights held over each trading step.
    pub weights: Vec<PolicyWeights>,
    pub metrics: StrategyMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub step: usize,
    pub delta: Option<f64>,
    pub k_hat: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    pub seed: u64,
    /// Times of the wealth points (trading start through the end of the path).
    pub times: Vec<f64>,
    pub runs: Vec<StrategyRun>,
    pub updates: Vec<UpdateRecord>,
}

impl BacktestReport {
    pub fn run(&self, strategy: &Strategy) -> Option<&StrategyRun> {
        self.runs.iter().find(|r| &r.strategy == strategy)
    }
}

/// Per-strategy bookkeeping during the loop.
struct Tracker {
    strategy: Strategy,
    wealth: Vec<f64>,
    returns: Vec<f64>,
    weights: Vec<PolicyWeights>,
    /// Desired weights of a static strategy since its last rebalance.
    held: Option<PolicyWeights>,
    bankrupt: bool,
    cap_hits: usize,
    fallbacks: usize,
}

/// State rebuilt at each prior update.
struct Update {
    plan: MarketSpec,
    nominal: EmpiricalPrior,
    rule: GaussianRule,
    delta_base: Option<f64>,
    /// Start of the observation interval (grid index).
    anchor: usize,
}

pub fn run_backtest(
    input: BacktestInput<'_>,
    protocol: &TradingProtocol,
    strategies: &[Strategy],
    seed: u64,
) -> Result<BacktestReport> {
    protocol.validate()?;
    if strategies.is_empty() {
        return Err(DrbcError::invalid("at least one strategy is required"));
    }
    for s in strategies {
        s.validate()?;
    }
    let path = input.path;
    let market = input.market;
    let d = market.dim();
    if path.dim() != d {
        return Err(DrbcError::DimensionMismatch { expected: d, actual: path.dim() });
    }
    let dt = market.dt();
    let horizon = protocol.plan_horizon_for(dt)?;
    let start = protocol.lookback_steps;
    let n = path.n_steps();
    let min_trade = protocol.eval_window.unwrap_or(2).max(2);
    if n < start + min_trade {
        return Err(DrbcError::InsufficientHistory { required: start + min_trade, available: n });
    }
    if strategies.contains(&Strategy::Oracle) && input.drift.is_none() {
        return Err(DrbcError::invalid("the oracle strategy needs the true drift model"));
    }
    let trade_steps = n - start;
    let lag = protocol.info_lag as usize;
    let utility = input.utility;

    let mut trackers: Vec<Tracker> = strategies
        .iter()
        .map(|s| Tracker {
            strategy: *s,
            wealth: vec![1.0],
            returns: Vec::with_capacity(trade_steps),
            weights: Vec::with_capacity(trade_steps),
            held: None,
            bankrupt: false,
            cap_hits: 0,
            fallbacks: 0,
        })
        .collect();
    let mut updates = Vec::new();
    let mut update_index = 0u64;
    let mut k = 0;
    while k < trade_steps {
        let block_end = (k + protocol.prior_update_every).min(trade_steps);
        let info0 = start + k - lag;
        let upd = prepare_update(input, protocol, info0, horizon, derive_seed(seed, update_index))?;
        update_index += 1;
        updates.push(UpdateRecord {
            step: k,
            delta: upd.0.delta_base,
            k_hat: upd.1.as_ref().ok().copied(),
            error: upd.1.as_ref().err().cloned(),
        });
        let upd = upd.0;
        if upd.delta_base.is_none() {
            for t in trackers.iter_mut().filter(|t| matches!(t.strategy, Strategy::Drbc { .. } | Strategy::Drc { .. }))
            {
                t.fallbacks += 1;
            }
        }
        let static_priors = drbc_priors(&upd, strategies, &utility, &upd.plan)?;
        let evaluators = build_evaluators(&upd, strategies, &static_priors, &utility)?;

        for kk in k..block_end {
            let i = start + kk;
            let info = i - lag;
            let t = path.times[info] - path.times[upd.anchor];
            let y = observation_between(&path.price_row(upd.anchor), &path.price_row(info), t, &upd.plan);
            let skip = protocol.info_lag && kk % protocol.rebalance_every == 0;
            let rebalance = kk % protocol.rebalance_every == 0;
            let tv = if protocol.projection == ProjectionMode::TimeVarying && t > 0.0 {
                Some(time_varying_priors(&upd, strategies, &utility, horizon - t)?)
            } else {
                None
            };
            let step_ret = path.simple_return(i);
            for (si, tr) in trackers.iter_mut().enumerate() {
                let desired = match tr.strategy {
                    Strategy::Bayesian | Strategy::Drbc { .. } => {
                        let frac = match (&tv, &tr.strategy) {
                            (Some(priors), Strategy::Drbc { .. }) => {
                                let prior = priors[si].as_ref().expect("time-varying prior for DRBC");
                                FractionEvaluator::new(prior, &upd.plan, &utility, &upd.rule)?.fraction(t, &y)?
                            }
                            _ => evaluators[si].as_ref().expect("evaluator for Merton strategy").fraction(t, &y)?,
                        };
                        PolicyWeights::from_risky(frac)
                    }
                    Strategy::Oracle => {
                        let drift = input.drift.expect("checked above");
                        merton_plugin(&drift.drift_at(path.times[i]), market, &utility)
                    }
                    Strategy::RiskFree => PolicyWeights::zeros(d),
                    _ => {
                        if rebalance || tr.held.is_none() {
                            let (w, fell_back) = static_weights(tr.strategy, &upd, input, protocol, info)?;
                            tr.fallbacks += fell_back as usize;
                            tr.held = Some(w);
                        }
                        tr.held.clone().expect("static weights set")
                    }
                };
                let desired = match (tr.strategy.is_merton_type(), protocol.short_cap) {
                    (true, Some(cap)) => {
                        tr.cap_hits += (short_cap_hits(&desired, cap) > 0) as usize;
                        apply_short_cap(&desired, cap)
                    }
                    _ => desired,
                };
                let applied =
                    if skip { tr.weights.last().cloned().unwrap_or_else(|| PolicyWeights::zeros(d)) } else { desired };
                let x = *tr.wealth.last().expect("wealth starts at one");
                let ret = portfolio_return(&applied, step_ret.as_slice(), market.r(), dt);
                let mut next = x * (1.0 + ret);
                if !(next > WEALTH_FLOOR) || tr.bankrupt {
                    tr.bankrupt = true;
                    next = WEALTH_FLOOR;
                }
                tr.returns.push(if tr.bankrupt { next / x - 1.0 } else { ret });
                tr.wealth.push(next);
                tr.weights.push(applied);
            }
        }
        k = block_end;
    }

    let periods = 1.0 / dt;
    let eval = protocol.eval_window.unwrap_or(trade_steps).min(trade_steps);
    let runs = trackers
        .into_iter()
        .map(|tr| {
            let window = &tr.returns[tr.returns.len() - eval..];
            let sharpe = match sharpe_from_returns(window, protocol.eval_rate, periods) {
                Ok(s) => Some(s),
                Err(DrbcError::ZeroVariance(_)) => None,
                Err(e) => return Err(e),
            };
            let terminal_wealth = *tr.wealth.last().expect("nonempty");
            let (u, floored) = terminal_utility(terminal_wealth, &utility);
            let lev: Vec<f64> = tr.weights.iter().map(|w| w.gross_leverage()).collect();
            let metrics = StrategyMetrics {
                strategy: tr.strategy.label(),
                sharpe,
                terminal_wealth,
                terminal_utility: u,
                bankrupt: tr.bankrupt || floored,
                mean_leverage: lev.iter().sum::<f64>() / lev.len() as f64,
                max_leverage: lev.iter().copied().fold(0.0, f64::max),
                short_cap_hit_rate: tr.cap_hits as f64 / trade_steps as f64,
                fallbacks: tr.fallbacks,
            };
            Ok(StrategyRun {
                strategy: tr.strategy,
                wealth: tr.wealth,
                returns: tr.returns,
                weights: tr.weights,
                metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BacktestReport { seed, times: path.times[start..].to_vec(), runs, updates })
}

/// Nominal prior, plan market, quadrature rule and calibrated base radius.
/// The second element carries `k̂` or the calibration error message.
fn prepare_update(
    input: BacktestInput<'_>,
    protocol: &TradingProtocol,
    info: usize,
    horizon: f64,
    update_seed: u64,
) -> Result<(Update, std::result::Result<f64, String>)> {
    let market = input.market;
    let d = market.dim();
    let plan = match protocol.volatility {
        VolatilitySource::Known => market.with_horizon(horizon)?,
        VolatilitySource::LedoitWolf => {
            let sigma = ledoit_wolf_sigma(input.path, info, protocol.lookback_steps, market.dt())?;
            MarketSpec::new(market.r(), sigma, horizon, market.dt())?
        }
    };
    let mut nominal = build_prior(input.path, info, &plan, &protocol.windowing)?;
    if let Some(bound) = protocol.atom_clamp {
        nominal = clamp_atoms(&nominal, &ClampBox::symmetric(bound, d)?)?;
    }
    let method = protocol
        .quadrature
        .map(|m| m.reseeded(update_seed))
        .unwrap_or_else(|| QuadratureMethod::backtest_default(d, update_seed));
    let rule = GaussianRule::new(&method, d)?;
    let calib = select_delta(&nominal, 1.0, &input.utility, &plan, &rule, protocol.confidence, protocol.quantile);
    let (delta_base, status) = match calib {
        Ok(c) => (Some(c.delta), Ok(c.k_hat)),
        Err(e) => {
            log::warn!("radius calibration failed at grid index {info}: {e}; using the nominal prior");
            (None, Err(e.to_string()))
        }
    };
    Ok((Update { plan, nominal, rule, delta_base, anchor: info }, status))
}

/// `σ` from the Ledoit–Wolf covariance of the `lookback` log-returns ending at `end`.
fn ledoit_wolf_sigma(path: &PathGrid, end: usize, lookback: usize, dt: f64) -> Result<DMatrix<f64>> {
    let rets = log_returns(path, end, lookback)?;
    let cov = ledoit_wolf(&rets)?.covariance / dt;
    let d = cov.nrows();
    cov.cholesky()
        .map(|c| c.l())
        .ok_or_else(|| DrbcError::Data(format!("estimated {d}x{d} covariance is not positive definite")))
}

/// Log-returns of the (at most) `lookback` steps ending at grid index `end`.
fn log_returns(path: &PathGrid, end: usize, lookback: usize) -> Result<DMatrix<f64>> {
    let lookback = lookback.min(end);
    if lookback < 2 {
        return Err(DrbcError::InsufficientHistory { required: 2, available: lookback });
    }
    let s = end - lookback;
    let d = path.dim();
    let mut out = DMatrix::zeros(lookback, d);
    for i in 0..lookback {
        for a in 0..d {
            let (p0, p1) = (path.prices[(s + i, a)], path.prices[(s + i + 1, a)]);
            if !(p0 > 0.0 && p1 > 0.0) {
                return Err(DrbcError::Data(format!("nonpositive price near grid index {}", s + i)));
            }
            out[(i, a)] = (p1 / p0).ln();
        }
    }
    Ok(out)
}

fn simple_returns(path: &PathGrid, end: usize, lookback: usize) -> Result<DMatrix<f64>> {
    Ok(log_returns(path, end, lookback)?.map(f64::exp_m1))
}

/// Perturbed priors for each DRBC strategy (`None` for other strategies).
fn drbc_priors(
    upd: &Update,
    strategies: &[Strategy],
    utility: &PowerUtility,
    plan: &MarketSpec,
) -> Result<Vec<Option<EmpiricalPrior>>> {
    let needs_h = upd.delta_base.is_some_and(|b| b > 0.0)
        && strategies.iter().any(|s| matches!(s, Strategy::Drbc { scale } if *scale > 0.0));
    let h = if needs_h { Some(influence_at_atoms(&upd.nominal, utility, plan, &upd.rule)?) } else { None };
    strategies
        .iter()
        .map(|s| match s {
            Strategy::Drbc { scale } => Ok(Some(perturbed(upd, h.as_ref(), *scale, utility)?)),
            _ => Ok(None),
        })
        .collect()
}

fn perturbed(
    upd: &Update,
    h: Option<&Vec<DVector<f64>>>,
    scale: f64,
    utility: &PowerUtility,
) -> Result<EmpiricalPrior> {
    match (upd.delta_base, h) {
        (Some(base), Some(h)) if scale > 0.0 && base > 0.0 => {
            let spec = RobustSpec::new(base * scale, 1.0)?;
            Ok(pushforward(&upd.nominal, h.clone(), &spec, utility).perturbed)
        }
        _ => Ok(upd.nominal.clone()),
    }
}

fn time_varying_priors(
    upd: &Update,
    strategies: &[Strategy],
    utility: &PowerUtility,
    remaining: f64,
) -> Result<Vec<Option<EmpiricalPrior>>> {
    let plan = upd.plan.with_horizon(remaining)?;
    drbc_priors(upd, strategies, utility, &plan)
}

fn build_evaluators<'a>(
    upd: &'a Update,
    strategies: &[Strategy],
    drbc: &[Option<EmpiricalPrior>],
    utility: &PowerUtility,
) -> Result<Vec<Option<FractionEvaluator<'a>>>> {
    strategies
        .iter()
        .zip(drbc)
        .map(|(s, p)| match s {
            Strategy::Bayesian => Ok(Some(FractionEvaluator::new(&upd.nominal, &upd.plan, utility, &upd.rule)?)),
            Strategy::Drbc { .. } => {
                let prior = p.as_ref().expect("DRBC prior");
                Ok(Some(FractionEvaluator::new(prior, &upd.plan, utility, &upd.rule)?))
            }
            _ => Ok(None),
        })
        .collect()
}

/// Weights of a rebalancing strategy and whether a fallback was used.
fn static_weights(
    strategy: Strategy,
    upd: &Update,
    input: BacktestInput<'_>,
    protocol: &TradingProtocol,
    info: usize,
) -> Result<(PolicyWeights, bool)> {
    let b_hat = upd.nominal.mean();
    match strategy {
        Strategy::Plugin => Ok((merton_plugin(&b_hat, &upd.plan, &input.utility), false)),
        Strategy::Drc { scale } => {
            let delta = upd.delta_base.map_or(0.0, |b| b * scale);
            Ok((drc_policy(&b_hat, &upd.plan, &input.utility, delta, None)?, false))
        }
        Strategy::DrmvNoRf | Strategy::DrmvRf => drmv_weights(strategy, input, protocol, info),
        other => Err(DrbcError::invalid(format!("{} is not a rebalancing strategy", other.label()))),
    }
}

fn drmv_weights(
    strategy: Strategy,
    input: BacktestInput<'_>,
    protocol: &TradingProtocol,
    info: usize,
) -> Result<(PolicyWeights, bool)> {
    let dt = input.market.dt();
    let rets = simple_returns(input.path, info, protocol.lookback_steps)?;
    let d = rets.ncols();
    let mu = DVector::from_iterator(d, rets.column_iter().map(|c| c.mean() / dt));
    let sigma = ledoit_wolf(&rets)?.covariance / dt;
    let s = &protocol.drmv;
    let with_rf = strategy == Strategy::DrmvRf;
    let target = if with_rf { s.rf_target_return } else { s.target_return };
    let solve = |target: f64| -> Result<PolicyWeights> {
        let problem = DrmvProblem::new(mu.clone(), sigma.clone(), s.delta, target)?.with_p_norm(s.p_norm)?;
        let sol =
            if with_rf { drmv_rf_solve(&problem, input.market.r(), s.rf_variance)? } else { drmv_solve(&problem)? };
        Ok(sol.policy)
    };
    match solve(target) {
        Ok(w) => Ok((w, false)),
        Err(DrbcError::Infeasible { max_robust_return, .. }) if max_robust_return.is_finite() => {
            let relaxed = max_robust_return - 1e-4 * (1.0 + max_robust_return.abs());
            log::warn!("{}: target {target} infeasible, using {relaxed}", strategy.label());
            Ok((solve(relaxed)?, true))
        }
        Err(e) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{simulate_paths, SinusoidalDriftSpec};
    use approx::assert_relative_eq;

    fn small_protocol() -> TradingProtocol {
        TradingProtocol {
            lookback_steps: 200,
            rebalance_every: 7,
            prior_update_every: 10,
            eval_window: Some(40),
            windowing: WindowingSpec { window_len: 20, n_windows: 10, ..WindowingSpec::default() },
            ..TradingProtocol::default()
        }
    }

    fn setup(d: usize, steps: usize, seed: u64) -> (MarketSpec, DriftModel, PathGrid) {
        let sigma = DMatrix::from_diagonal(&DVector::from_element(d, 0.3));
        let market = MarketSpec::new(0.01, sigma, 1.0, 1.0 / 2772.0).unwrap();
        let drift = DriftModel::Sinusoidal(SinusoidalDriftSpec::sample(0.4, crate::KappaLaw::Smooth, d, seed).unwrap());
        let path = simulate_paths(&market, &drift, steps, &DVector::from_element(d, 1.0), seed).unwrap();
        (market, drift, path)
    }

    #[test]
    fn risk_free_has_zero_sharpe() {
        let (market, _, path) = setup(2, 260, 1);
        let input =
            BacktestInput { path: &path, market: &market, drift: None, utility: PowerUtility::new(-1.0).unwrap() };
        let report = run_backtest(input, &small_protocol(), &[Strategy::RiskFree], 1).unwrap();
        let m = &report.runs[0].metrics;
        assert_eq!(m.sharpe, Some(0.0));
        assert_relative_eq!(m.terminal_wealth, (1.0 + 0.01 / 2772.0f64).powi(60), max_relative = 1e-12);
    }

    #[test]
    fn zero_scale_drbc_equals_bayesian() {
        let (market, drift, path) = setup(2, 260, 2);
        let input = BacktestInput {
            path: &path,
            market: &market,
            drift: Some(&drift),
            utility: PowerUtility::new(-1.0).unwrap(),
        };
        let strategies = [Strategy::Bayesian, Strategy::Drbc { scale: 0.0 }, Strategy::Drbc { scale: 1.0 }];
        for projection in [ProjectionMode::Static, ProjectionMode::TimeVarying] {
            let protocol = TradingProtocol { projection, ..small_protocol() };
            let report = run_backtest(input, &protocol, &strategies, 2).unwrap();
            assert_eq!(report.runs[0].wealth, report.runs[1].wealth);
            assert_eq!(report.runs[0].weights, report.runs[1].weights);
            assert!(report.updates.iter().all(|u| u.delta.is_some()));
            assert_ne!(report.runs[0].weights, report.runs[2].weights);
        }
    }

    #[test]
    fn dirac_history_gives_constant_merton_weights() {
        // deterministic prices make every window estimate the same drift
        let d = 2;
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.3]));
        let dt = 1.0 / 252.0;
        let market = MarketSpec::new(0.01, sigma, 1.0, dt).unwrap();
        let b = DVector::from_vec(vec![0.08, 0.05]);
        let half = market.half_row_variance();
        let steps = 260;
        let times: Vec<f64> = (0..=steps).map(|i| i as f64 * dt).collect();
        let prices = DMatrix::from_fn(steps + 1, d, |i, a| ((b[a] - half[a]) * i as f64 * dt).exp());
        let path = PathGrid::new(times, prices).unwrap();
        let utility = PowerUtility::new(-1.0).unwrap();
        let input = BacktestInput { path: &path, market: &market, drift: None, utility };
        let protocol = TradingProtocol { short_cap: None, ..small_protocol() };
        let report = run_backtest(input, &protocol, &[Strategy::Bayesian], 0).unwrap();
        let expected = merton_plugin(&b, &market, &utility);
        for w in &report.runs[0].weights {
            assert!((&w.weights - &expected.weights).amax() < 1e-6);
        }
    }

    #[test]
    fn common_paths_and_bookkeeping() {
        let (market, drift, path) = setup(3, 260, 3);
        let input = BacktestInput {
            path: &path,
            market: &market,
            drift: Some(&drift),
            utility: PowerUtility::new(-1.0).unwrap(),
        };
        let mut strategies = Strategy::table_set();
        strategies.extend([Strategy::Plugin, Strategy::Oracle, Strategy::RiskFree]);
        let report = run_backtest(input, &small_protocol(), &strategies, 3).unwrap();
        assert_eq!(report.times.len(), 61);
        for run in &report.runs {
            assert_eq!(run.wealth.len(), 61);
            assert_eq!(run.weights.len(), 60);
            assert!(run.metrics.sharpe.is_some_and(f64::is_finite));
            assert!(run.metrics.terminal_utility.is_finite());
            if run.strategy.is_merton_type() {
                assert!(run.weights.iter().all(|w| w.weights.min() >= -0.5));
            }
            // wealth recursion uses the held weights and realized returns only
            for (j, w) in run.weights.iter().enumerate() {
                let r = path.simple_return(200 + j);
                let x = run.wealth[j] * (1.0 + portfolio_return(w, r.as_slice(), 0.01, market.dt()));
                assert_relative_eq!(run.wealth[j + 1], x, max_relative = 1e-14);
            }
        }
        // static strategies only move at rebalance boundaries
        let drmv = report.run(&Strategy::DrmvNoRf).unwrap();
        for j in 1..60 {
            if j % 7 != 0 {
                assert_eq!(drmv.weights[j], drmv.weights[j - 1]);
            }
        }
        assert!(drmv.weights.iter().all(|w| (w.weights.sum() - 1.0).abs() < 1e-7 && w.cash == 0.0));
    }

    #[test]
    fn lagged_protocol_holds_on_boundaries() {
        let (market, _, path) = setup(2, 262, 4);
        let input =
            BacktestInput { path: &path, market: &market, drift: None, utility: PowerUtility::new(-1.0).unwrap() };
        let protocol = TradingProtocol {
            info_lag: true,
            lookback_steps: 201,
            volatility: VolatilitySource::LedoitWolf,
            atom_clamp: Some(1.0),
            ..small_protocol()
        };
        let report = run_backtest(input, &protocol, &[Strategy::Bayesian, Strategy::DrmvRf], 4).unwrap();
        for run in &report.runs {
            assert_eq!(run.weights[0], PolicyWeights::zeros(2));
            for j in (7..run.weights.len()).step_by(7) {
                assert_eq!(run.weights[j], run.weights[j - 1]);
            }
        }
    }

    #[test]
    fn rejects_short_history_and_missing_drift() {
        let (market, _, path) = setup(2, 220, 5);
        let input =
            BacktestInput { path: &path, market: &market, drift: None, utility: PowerUtility::new(-1.0).unwrap() };
        assert!(matches!(
            run_backtest(input, &small_protocol(), &[Strategy::Bayesian], 0),
            Err(DrbcError::InsufficientHistory { .. })
        ));
        let protocol = TradingProtocol { eval_window: Some(10), ..small_protocol() };
        assert!(run_backtest(input, &protocol, &[Strategy::Oracle], 0).is_err());
    }
}
