//! Run configuration: JSON file, environment overrides and presets.
//!
//! Loading order: file (or the `config` block of a manifest), then
//! `DRBC_CFG__section__key=value` overrides, then `--seed`, then protocol
//! presets. The merged document is deserialized once with unknown keys
//! rejected, so every error names the offending path.

use std::path::Path;

use drbc_core::backtest::suite::{GridCell, SuiteConfig, SweepConfig, SyntheticMarket};
use drbc_core::backtest::{Strategy, TradingProtocol};
use drbc_core::calibration::QuantileMode;
use drbc_core::{KappaLaw, QuadratureMethod, WindowingSpec};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "DRBC_CFG__";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub market: Option<MarketSection>,
    pub drift: Option<DriftSection>,
    pub simulate: Option<SimulateSection>,
    pub windowing: Option<WindowingSpec>,
    pub utility: Option<UtilitySection>,
    pub calibration: Option<CalibrationSection>,
    pub robust: Option<RobustSection>,
    pub protocol: Option<TradingProtocol>,
    pub backtest: Option<BacktestSection>,
    pub grid: Option<SuiteConfig>,
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketSection {
    pub r: f64,
    /// Rows of the volatility matrix.
    pub sigma: Vec<Vec<f64>>,
    pub dt: f64,
    #[serde(default = "one")]
    pub horizon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DriftSection {
    /// Frequencies given explicitly or drawn from `kappa_law` with the run seed.
    Sinusoidal {
        b0: f64,
        kappa: Option<Vec<f64>>,
        kappa_law: Option<KappaLaw>,
    },
    Constant {
        b: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub n_steps: usize,
    /// Initial prices; all ones when omitted.
    pub s0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySection {
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub confidence: f64,
    pub quantile: QuantileMode,
    /// `None` picks the automatic rule for the dimension.
    pub quadrature: Option<QuadratureMethod>,
    pub x0: f64,
    /// Grid index the prior windows end at; the last price when omitted.
    pub end_index: Option<usize>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { confidence: 0.95, quantile: QuantileMode::Analytic, quadrature: None, x0: 1.0, end_index: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSection {
    pub tau: f64,
    /// Multiplier on the calibrated radius.
    pub delta_scale: f64,
}

impl Default for RobustSection {
    fn default() -> Self {
        Self { tau: 1.0, delta_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestSection {
    pub strategies: Vec<Strategy>,
    pub n_seeds: usize,
    pub cell: GridCell,
    pub market: SyntheticMarket,
    pub trade_steps: usize,
    pub histogram: HistogramSpec,
    /// Market parameters used with `--prices`.
    pub prices: PriceSource,
}

impl Default for BacktestSection {
    fn default() -> Self {
        Self {
            strategies: Strategy::table_set(),
            n_seeds: 1,
            cell: GridCell::headline(),
            market: SyntheticMarket::default(),
            trade_steps: 252,
            histogram: HistogramSpec::default(),
            prices: PriceSource::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HistogramSpec {
    pub lo: f64,
    pub hi: f64,
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { lo: -10.0, hi: 10.0, bins: 40 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriceSource {
    pub dt: f64,
    /// Trading (cash) rate.
    pub rate: f64,
    pub alpha: f64,
    /// Known volatility; when omitted the Ledoit–Wolf estimate of the first
    /// lookback window stands in (the engine re-estimates it when the
    /// protocol asks for Ledoit–Wolf volatility).
    pub sigma: Option<Vec<Vec<f64>>>,
}

impl Default for PriceSource {
    fn default() -> Self {
        Self { dt: 1.0 / 252.0, rate: 0.05, alpha: -1.0, sigma: None }
    }
}

fn one() -> f64 {
    1.0
}

/// Reads the config document; a manifest is accepted in place of a config.
pub fn read_document(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    let doc: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: invalid JSON: {e}", path.display())))?;
    match doc {
        Value::Object(mut map) if map.contains_key("manifest_version") => match map.remove("config") {
            Some(cfg @ Value::Object(_)) => Ok(cfg),
            _ => Err(CliError::Config("manifest has no config object".into())),
        },
        Value::Object(_) => Ok(doc),
        _ => Err(CliError::Config("config must be a JSON object".into())),
    }
}

/// Applies `DRBC_CFG__a__b=value` pairs; values are parsed as JSON when
/// possible and taken as strings otherwise.
pub fn apply_env_overrides<I>(doc: &mut Value, vars: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut pairs: Vec<(String, String)> = vars.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    // deterministic regardless of environment order
    pairs.sort();
    for (key, raw) in pairs {
        let path: Vec<&str> = key[ENV_PREFIX.len()..].split("__").collect();
        if path.iter().any(|p| p.is_empty()) {
            return Err(CliError::Config(format!("malformed override variable {key}")));
        }
        let value = serde_json::from_str(&raw).unwrap_or(Value::String(raw));
        set_path(doc, &path, value).map_err(|e| CliError::Config(format!("{key}: {e}")))?;
    }
    Ok(())
}

fn set_path(doc: &mut Value, path: &[&str], value: Value) -> Result<(), String> {
    let mut cur = doc;
    for (i, key) in path.iter().enumerate() {
        if cur.is_null() {
            *cur = Value::Object(Map::new());
        }
        let map = cur.as_object_mut().ok_or_else(|| format!("'{}' is not an object", path[..i].join(".")))?;
        if i + 1 == path.len() {
            map.insert((*key).to_string(), value);
            return Ok(());
        }
        cur = map.entry((*key).to_string()).or_insert(Value::Null);
    }
    unreachable!("path is non-empty")
}

/// Replaces `{"preset": name, ...}` protocol blocks by the preset with the
/// remaining keys merged over it.
fn resolve_presets(doc: &mut Value) -> Result<(), CliError> {
    let slots: [&[&str]; 3] = [&["protocol"], &["grid", "protocol"], &["sweep", "protocol"]];
    for slot in slots {
        let Some(block) = slot.iter().try_fold(&mut *doc, |v, k| v.get_mut(*k)) else { continue };
        let Some(map) = block.as_object_mut() else { continue };
        let Some(name) = map.remove("preset") else { continue };
        let base = match name.as_str() {
            Some("synthetic") => TradingProtocol::default(),
            Some("monthly_real") => TradingProtocol::monthly_real(),
            _ => {
                return Err(CliError::Config(format!(
                    "{}.preset: unknown preset {name}, expected \"synthetic\" or \"monthly_real\"",
                    slot.join(".")
                )))
            }
        };
        let mut merged = serde_json::to_value(base).expect("protocol serializes");
        merge(&mut merged, Value::Object(std::mem::take(map)));
        *block = merged;
    }
    Ok(())
}

/// Recursive object merge; non-object values replace.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Full resolution of a config document into a typed config.
pub fn resolve<I>(mut doc: Value, env: I, seed: Option<u64>) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = (String, String)>,
{
    apply_env_overrides(&mut doc, env)?;
    if let Some(seed) = seed {
        set_path(&mut doc, &["seed"], Value::from(seed)).map_err(CliError::Config)?;
    }
    resolve_presets(&mut doc)?;
    let mut cfg: RunConfig = serde_path_to_error::deserialize(doc).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(format!("config: {inner}"))
        } else {
            CliError::Config(format!("config at {path}: {inner}"))
        }
    })?;
    cfg.seed.get_or_insert(0);
    Ok(cfg)
}

/// A required section, or a config error naming it.
pub fn section<'a, T>(value: &'a Option<T>, name: &str, command: &str) -> Result<&'a T, CliError> {
    value.as_ref().ok_or_else(|| CliError::Config(format!("missing field `{name}`: required by `{command}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn env(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn missing_sigma_is_named() {
        let doc = json!({"market": {"r": 0.01, "dt": 0.004}});
        let err = resolve(doc, env(&[]), None).unwrap_err().to_string();
        assert!(err.contains("market") && err.contains("sigma"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = resolve(json!({"markte": {}}), env(&[]), None).unwrap_err().to_string();
        assert!(err.contains("markte"), "{err}");
        let err = resolve(json!({"protocol": {"lookback": 3}}), env(&[]), None).unwrap_err().to_string();
        assert!(err.contains("protocol") && err.contains("lookback"), "{err}");
    }

    #[test]
    fn env_overrides_and_seed() {
        let doc = json!({"backtest": {"n_seeds": 2}});
        let vars = env(&[
            ("DRBC_CFG__backtest__n_seeds", "5"),
            ("DRBC_CFG__backtest__cell", r#"{"b0": 0.2, "steps_per_day": 6, "kappa": "volatile"}"#),
            ("DRBC_CFG__backtest__histogram__bins", "7"),
            ("DRBC_CFG__seed", "9"),
            ("UNRELATED", "1"),
        ]);
        let cfg = resolve(doc, vars, None).unwrap();
        let bt = cfg.backtest.unwrap();
        assert_eq!(bt.n_seeds, 5);
        assert_eq!(bt.cell.kappa, KappaLaw::Volatile);
        assert_eq!(bt.histogram.bins, 7);
        // a partial object for a section without defaults is still rejected
        let partial = env(&[("DRBC_CFG__backtest__cell__kappa", "volatile")]);
        assert!(resolve(json!({"backtest": {}}), partial, None).is_err());
        assert_eq!(cfg.seed, Some(9));
        let cfg = resolve(json!({}), env(&[("DRBC_CFG__seed", "9")]), Some(4)).unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert!(resolve(json!({}), env(&[("DRBC_CFG__seed__x", "1")]), None).is_err());
    }

    #[test]
    fn presets_merge_overrides() {
        let doc = json!({"protocol": {"preset": "monthly_real", "lookback_steps": 1300}});
        let p = resolve(doc, env(&[]), None).unwrap().protocol.unwrap();
        assert_eq!(p, TradingProtocol { lookback_steps: 1300, ..TradingProtocol::monthly_real() });
        let doc = json!({"sweep": {"protocol": {"preset": "synthetic"}}});
        assert_eq!(resolve(doc, env(&[]), None).unwrap().sweep.unwrap().protocol, TradingProtocol::default());
        assert!(resolve(json!({"protocol": {"preset": "weekly"}}), env(&[]), None).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let doc = json!({
            "market": {"r": 0.01, "sigma": [[0.2]], "dt": 0.01},
            "drift": {"sinusoidal": {"b0": 0.4, "kappa_law": "smooth"}},
            "protocol": {"preset": "monthly_real"}
        });
        let cfg = resolve(doc, env(&[]), Some(3)).unwrap();
        let again = resolve(serde_json::to_value(&cfg).unwrap(), env(&[]), None).unwrap();
        assert_eq!(cfg, again);
    }
}
