//! Run configuration files.
//!
//! A run is described by one TOML file. Every key has a default, so an empty
//! file is a valid reference run. Any key can be overridden from the process
//! environment with `P2PGRID__` followed by the key path in upper case, with
//! `__` between path segments and array indices as plain numbers:
//!
//! ```text
//! P2PGRID__SEED=3
//! P2PGRID__LEARNER__LR_ACTOR=1e-3
//! P2PGRID__FLEET__2__E0=5.0
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toml::Value;

use crate::env::{EnvConfig, MarketThresholds};
use crate::market::{MechanismKind, MrdaConfig};
use crate::marl::Hyperparams;
use crate::microgrid::MicrogridParams;
use crate::policy::{ScriptRule, ScriptedPolicy};
use crate::scenario::{DailyProfile, DisruptionConfig, PriceSchedule};

pub const ENV_PREFIX: &str = "P2PGRID__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("invalid config field `{field}`: {message}")]
    Invalid { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: &str, message: impl ToString) -> Self {
        ConfigError::Invalid {
            field: field.to_string(),
            message: message.to_string(),
        }
    }
}

/// Either the bundled data set or explicit paths, one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileSource {
    Named(String),
    Files(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmergencySource {
    Values(Vec<f64>),
    /// `"bundled"` or a path to an `hour,emergency` CSV.
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSection {
    pub feed_in: f64,
    pub day_ahead: f64,
    pub emergency: EmergencySource,
}

impl Default for PriceSection {
    fn default() -> Self {
        let bundled = PriceSchedule::bundled();
        PriceSection {
            feed_in: bundled.feed_in,
            day_ahead: bundled.day_ahead,
            emergency: EmergencySource::Named("bundled".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DisruptionSource {
    /// `"reference"`, `"literal"` or `"none"`.
    Preset(String),
    Custom(DisruptionConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub horizon: usize,
    pub dt: f64,
    pub process_noise: f64,
    pub observation_noise: f64,
    pub carry_over_energy: bool,
    pub disruption: DisruptionSource,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        let r = EnvConfig::reference();
        ScenarioSection {
            horizon: r.horizon,
            dt: r.dt,
            process_noise: r.process_noise,
            observation_noise: r.observation_noise,
            carry_over_energy: r.carry_over_energy,
            disruption: DisruptionSource::Preset("reference".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObservationSection {
    pub window_past: usize,
    pub window_future: usize,
    pub feature_scale: f64,
}

impl Default for ObservationSection {
    fn default() -> Self {
        let r = EnvConfig::reference();
        ObservationSection {
            window_past: r.window_past,
            window_future: r.window_future,
            feature_scale: r.feature_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub rule: String,
    pub margin: f64,
}

impl Default for PolicySection {
    fn default() -> Self {
        let p = ScriptedPolicy::default();
        PolicySection {
            rule: p.rule.to_string(),
            margin: p.margin,
        }
    }
}

/// The file-level view of a run. Paths are kept as written; they are
/// resolved against [`RunConfig::base_dir`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Episodes for `simulate` and `compare`; training uses `learner.episodes`.
    pub episodes: usize,
    pub mechanism: String,
    /// Mechanisms compared by `compare`.
    pub mechanisms: Vec<String>,
    pub fleet: Vec<MicrogridParams>,
    pub profiles: ProfileSource,
    pub prices: PriceSection,
    pub thresholds: MarketThresholds,
    pub mrda: MrdaConfig,
    pub scenario: ScenarioSection,
    pub observation: ObservationSection,
    pub policy: PolicySection,
    pub learner: Hyperparams,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            episodes: 10,
            mechanism: MechanismKind::Jpq.name().into(),
            mechanisms: MechanismKind::ALL.iter().map(|m| m.name().to_string()).collect(),
            fleet: MicrogridParams::reference_fleet(),
            profiles: ProfileSource::Named("bundled".into()),
            prices: PriceSection::default(),
            thresholds: MarketThresholds::default(),
            mrda: MrdaConfig::default(),
            scenario: ScenarioSection::default(),
            observation: ObservationSection::default(),
            policy: PolicySection::default(),
            learner: Hyperparams::desk(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn parse_mechanism(field: &str, name: &str) -> Result<MechanismKind, ConfigError> {
    name.parse()
        .map_err(|_| ConfigError::invalid(field, format!("unknown mechanism {name:?}; expected jpq, greedy, mrda or vvda")))
}

fn defaults_value() -> Result<Value, ConfigError> {
    Value::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Recursively overlays `top` onto `base`. Tables merge key by key; any
/// other value replaces the base value.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Table(b), Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an override string as a TOML value, falling back to a string.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, path: &[String], value: Value, key: &str) -> Result<(), ConfigError> {
    let (last, parents) = path.split_last().ok_or_else(|| ConfigError::invalid(key, "empty key"))?;
    let mut node = root;
    for seg in parents {
        node = match node {
            Value::Table(t) => t
                .entry(seg.clone())
                .or_insert_with(|| Value::Table(toml::Table::new())),
            Value::Array(a) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| ConfigError::invalid(key, format!("{seg:?} is not an array index")))?;
                let len = a.len();
                a.get_mut(idx)
                    .ok_or_else(|| ConfigError::invalid(key, format!("index {idx} out of range for {len} entries")))?
            }
            _ => return Err(ConfigError::invalid(key, format!("{seg:?} is not a table or array"))),
        };
    }
    match node {
        Value::Table(t) => {
            t.insert(last.clone(), value);
        }
        Value::Array(a) => {
            let idx: usize = last
                .parse()
                .map_err(|_| ConfigError::invalid(key, format!("{last:?} is not an array index")))?;
            let len = a.len();
            *a.get_mut(idx)
                .ok_or_else(|| ConfigError::invalid(key, format!("index {idx} out of range for {len} entries")))? = value;
        }
        _ => return Err(ConfigError::invalid(key, "parent is not a table or array")),
    }
    Ok(())
}

impl RunConfig {
    /// Parses TOML text on top of the defaults and applies overrides.
    pub fn from_toml_str<I>(text: &str, base_dir: &Path, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let file: Value = text
            .parse::<toml::Table>()
            .map(Value::Table)
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut merged = defaults_value()?;
        merge(&mut merged, file);
        let mut overrides: Vec<(String, String)> = vars
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX))
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            set_path(&mut merged, &path, parse_scalar(&raw), &key)?;
        }
        let mut cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `P2PGRID__*` variables from the process
    /// environment.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::load_with(path, std::env::vars())
    }

    pub fn load_with<I>(path: &Path, vars: I) -> Result<Self, ConfigError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml_str(&text, &base, vars)
    }

    /// Defaults plus environment overrides, for runs without a file.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_toml_str("", Path::new("."), std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string_pretty(self).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn mechanism_kind(&self) -> Result<MechanismKind, ConfigError> {
        parse_mechanism("mechanism", &self.mechanism)
    }

    pub fn mechanism_kinds(&self) -> Result<Vec<MechanismKind>, ConfigError> {
        let kinds = self
            .mechanisms
            .iter()
            .enumerate()
            .map(|(i, m)| parse_mechanism(&format!("mechanisms[{i}]"), m))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if kinds[..i].contains(k) {
                return Err(ConfigError::invalid("mechanisms", format!("{k} listed twice")));
            }
        }
        Ok(kinds)
    }

    pub fn policy(&self) -> Result<ScriptedPolicy, ConfigError> {
        let rule: ScriptRule = self.policy.rule.parse().map_err(|e| ConfigError::invalid("policy.rule", e))?;
        let p = ScriptedPolicy::new(rule, self.policy.margin);
        p.validate().map_err(|e| ConfigError::invalid("policy.margin", e))?;
        Ok(p)
    }

    fn disruption(&self) -> Result<DisruptionConfig, ConfigError> {
        match &self.scenario.disruption {
            DisruptionSource::Custom(c) => Ok(c.clone()),
            DisruptionSource::Preset(name) => match name.as_str() {
                "reference" => Ok(DisruptionConfig::reference()),
                "literal" => Ok(DisruptionConfig::literal()),
                "none" => Ok(DisruptionConfig::none()),
                other => Err(ConfigError::invalid(
                    "scenario.disruption",
                    format!("unknown preset {other:?}; expected reference, literal, none or a table"),
                )),
            },
        }
    }

    fn profiles(&self) -> Result<Vec<DailyProfile>, ConfigError> {
        match &self.profiles {
            ProfileSource::Named(name) if name == "bundled" => Ok((0..self.fleet.len()).map(DailyProfile::bundled).collect()),
            ProfileSource::Named(other) => Err(ConfigError::invalid(
                "profiles",
                format!("expected \"bundled\" or a list of CSV paths, got {other:?}"),
            )),
            ProfileSource::Files(paths) => paths
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    DailyProfile::read_csv(&self.resolve(p)).map_err(|e| ConfigError::invalid(&format!("profiles[{i}]"), e))
                })
                .collect(),
        }
    }

    fn prices(&self) -> Result<PriceSchedule, ConfigError> {
        let p = &self.prices;
        let schedule = match &p.emergency {
            EmergencySource::Values(v) => PriceSchedule {
                feed_in: p.feed_in,
                day_ahead: p.day_ahead,
                emergency: v.clone(),
            },
            EmergencySource::Named(name) if name == "bundled" => PriceSchedule {
                feed_in: p.feed_in,
                day_ahead: p.day_ahead,
                ..PriceSchedule::bundled()
            },
            EmergencySource::Named(path) => PriceSchedule::read_csv(&self.resolve(Path::new(path)), p.feed_in, p.day_ahead)
                .map_err(|e| ConfigError::invalid("prices.emergency", e))?,
        };
        schedule.validate().map_err(|e| ConfigError::invalid("prices", e))?;
        Ok(schedule)
    }

    /// Builds the environment for `mechanism`, loading referenced files.
    pub fn env_config_for(&self, mechanism: MechanismKind) -> Result<EnvConfig, ConfigError> {
        let cfg = EnvConfig {
            fleet: self.fleet.clone(),
            profiles: self.profiles()?,
            prices: self.prices()?,
            mechanism,
            mrda: self.mrda,
            thresholds: self.thresholds,
            disruption: self.disruption()?,
            horizon: self.scenario.horizon,
            dt: self.scenario.dt,
            window_past: self.observation.window_past,
            window_future: self.observation.window_future,
            process_noise: self.scenario.process_noise,
            observation_noise: self.scenario.observation_noise,
            feature_scale: self.observation.feature_scale,
            carry_over_energy: self.scenario.carry_over_energy,
        };
        cfg.validate().map_err(|e| ConfigError::invalid("scenario", e))?;
        Ok(cfg)
    }

    pub fn env_config(&self) -> Result<EnvConfig, ConfigError> {
        self.env_config_for(self.mechanism_kind()?)
    }

    /// Checks every section, including referenced files.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.mechanism_kind()?;
        self.mechanism_kinds()?;
        self.policy()?;
        self.env_config()?;
        self.learner
            .validate()
            .map_err(|e| ConfigError::invalid("learner", e))?;
        Ok(())
    }

    /// SHA-256 over the resolved run: file contents rather than paths, so
    /// moving a profile does not change the hash but editing it does.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let env = self.env_config()?;
        let canonical = serde_json::json!({
            "seed": self.seed,
            "episodes": self.episodes,
            "mechanisms": self.mechanism_kinds()?,
            "env": env,
            "policy": self.policy()?,
            "learner": self.learner,
        });
        Ok(hex::encode(Sha256::digest(canonical.to_string().as_bytes())))
    }
}
