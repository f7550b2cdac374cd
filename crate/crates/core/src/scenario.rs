//! Daily profiles, stochastic realizations, PV disruptions and price schedules.

use std::f64::consts::PI;
use std::path::Path;

use chrono::NaiveDateTime;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market::PriceEnvelope;
use crate::microgrid::MicrogridParams;
use crate::rng::{purpose, SeedStream};

pub const HOURS_PER_DAY: usize = 24;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("series holds fewer than 24 hourly samples")]
    EmptySeries,
    #[error("series is not clean hourly data: {0}")]
    NonHourlyData(String),
    #[error("hour {0} is outside the schedule")]
    IndexOutOfRange(usize),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("invalid price schedule: {0}")]
    InvalidSchedule(String),
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

/// Normalized 24-hour load and PV shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DailyProfile {
    pub load: [f64; HOURS_PER_DAY],
    pub pv: [f64; HOURS_PER_DAY],
}

fn gaussian(t: f64, center: f64, width: f64) -> f64 {
    (-(t - center).powi(2) / (2.0 * width * width)).exp()
}

fn pv_bell(center: f64, width: f64) -> [f64; HOURS_PER_DAY] {
    std::array::from_fn(|h| {
        let t = h as f64;
        if (6.0..=19.0).contains(&t) {
            gaussian(t, center, width)
        } else {
            0.0
        }
    })
}

fn residential_load(floor: f64, morning: f64, evening_hour: f64) -> [f64; HOURS_PER_DAY] {
    let raw: [f64; HOURS_PER_DAY] = std::array::from_fn(|h| {
        let t = h as f64;
        morning * gaussian(t, 7.5, 1.5) + gaussian(t, evening_hour, 2.2) + 0.15 * gaussian(t, 13.0, 3.0)
    });
    let max = raw.iter().cloned().fold(f64::MIN, f64::max);
    raw.map(|v| floor + (1.0 - floor) * v / max)
}

impl DailyProfile {
    /// Synthetic residential shapes: evening-peak load and a midday PV bell.
    /// Four archetypes are bundled; agent `i` gets archetype `i mod 4`.
    pub fn bundled(agent: usize) -> Self {
        match agent % 4 {
            0 => DailyProfile {
                load: residential_load(0.35, 0.55, 19.0),
                pv: pv_bell(12.5, 2.6),
            },
            1 => DailyProfile {
                load: residential_load(0.30, 0.45, 20.0),
                pv: pv_bell(12.0, 2.8),
            },
            2 => DailyProfile {
                load: residential_load(0.40, 0.65, 18.5),
                pv: pv_bell(13.0, 2.5),
            },
            _ => DailyProfile {
                load: residential_load(0.30, 0.40, 19.5),
                pv: pv_bell(12.5, 3.0),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, series) in [("load", &self.load), ("pv", &self.pv)] {
            if let Some((h, v)) = series.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(ScenarioError::InvalidProfile(format!(
                    "{name}[{h}] = {v} is outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Reads a profile file: either `hour,load,pv` with 24 normalized rows,
    /// or `timestamp,load,pv` raw hourly data that is reduced with
    /// [`normalize_annual`].
    pub fn read_csv(path: &Path) -> Result<Self, ScenarioError> {
        let csv_err = |source| ScenarioError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err)?;
        let headers = reader.headers().map_err(csv_err)?.clone();
        let first = headers.get(0).unwrap_or_default();
        let mut rows = Vec::new();
        for record in reader.records() {
            rows.push(record.map_err(csv_err)?);
        }
        let field = |r: &csv::StringRecord, i: usize| -> Result<f64, ScenarioError> {
            r.get(i)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| ScenarioError::InvalidProfile(format!("bad field {i} in row {r:?}")))
        };
        match first {
            "hour" => {
                if rows.len() != HOURS_PER_DAY {
                    return Err(ScenarioError::InvalidProfile(format!(
                        "expected 24 rows, found {}",
                        rows.len()
                    )));
                }
                let mut profile = DailyProfile {
                    load: [0.0; HOURS_PER_DAY],
                    pv: [0.0; HOURS_PER_DAY],
                };
                for r in &rows {
                    let hour = field(r, 0)? as usize;
                    if hour >= HOURS_PER_DAY {
                        return Err(ScenarioError::IndexOutOfRange(hour));
                    }
                    profile.load[hour] = field(r, 1)?;
                    profile.pv[hour] = field(r, 2)?;
                }
                profile.validate()?;
                Ok(profile)
            }
            "timestamp" => {
                let records = rows
                    .iter()
                    .map(|r| {
                        let ts = parse_timestamp(r.get(0).unwrap_or_default())?;
                        // NaN fields are kept so normalization reports them
                        let value = |i| r.get(i).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
                        Ok(HourlyRecord {
                            timestamp: ts,
                            load: value(1),
                            pv: value(2),
                        })
                    })
                    .collect::<Result<Vec<_>, ScenarioError>>()?;
                normalize_annual(&records)
            }
            other => Err(ScenarioError::InvalidProfile(format!(
                "unrecognized header column {other:?}, expected hour or timestamp"
            ))),
        }
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["hour", "load", "pv"])?;
        for h in 0..HOURS_PER_DAY {
            w.write_record([h.to_string(), self.load[h].to_string(), self.pv[h].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Unix seconds or `YYYY-MM-DD HH:MM[:SS]` (a `T` separator also works), UTC.
fn parse_timestamp(s: &str) -> Result<i64, ScenarioError> {
    if let Ok(secs) = s.parse::<i64>() {
        return Ok(secs);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%dT%H:%M"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.and_utc().timestamp());
        }
    }
    Err(ScenarioError::NonHourlyData(format!("unparseable timestamp {s:?}")))
}

/// One raw measurement; `timestamp` is in Unix seconds (UTC).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourlyRecord {
    pub timestamp: i64,
    pub load: f64,
    pub pv: f64,
}

fn min_max(values: [f64; HOURS_PER_DAY]) -> [f64; HOURS_PER_DAY] {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range <= 0.0 {
        return [0.0; HOURS_PER_DAY];
    }
    values.map(|v| ((v - lo) / range).clamp(0.0, 1.0))
}

/// Averages a long hourly series per hour of day, then min-max scales each
/// signal to `[0, 1]`. A constant signal maps to all zeros.
pub fn normalize_annual(records: &[HourlyRecord]) -> Result<DailyProfile, ScenarioError> {
    if records.len() < HOURS_PER_DAY {
        return Err(ScenarioError::EmptySeries);
    }
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].timestamp - pair[0].timestamp != 3600 {
            return Err(ScenarioError::NonHourlyData(format!(
                "gap of {} s after row {i}",
                pair[1].timestamp - pair[0].timestamp
            )));
        }
    }
    let mut sums = [[0.0f64; HOURS_PER_DAY]; 2];
    let mut counts = [0usize; HOURS_PER_DAY];
    for (i, r) in records.iter().enumerate() {
        if !r.load.is_finite() || !r.pv.is_finite() {
            return Err(ScenarioError::NonHourlyData(format!("non-finite value in row {i}")));
        }
        let hour = r.timestamp.div_euclid(3600).rem_euclid(HOURS_PER_DAY as i64) as usize;
        sums[0][hour] += r.load;
        sums[1][hour] += r.pv;
        counts[hour] += 1;
    }
    let mean = |s: &[f64; HOURS_PER_DAY]| -> [f64; HOURS_PER_DAY] {
        std::array::from_fn(|h| s[h] / counts[h] as f64)
    };
    Ok(DailyProfile {
        load: min_max(mean(&sums[0])),
        pv: min_max(mean(&sums[1])),
    })
}

/// Realized load and generation for one agent over the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realization {
    pub load: Vec<f64>,
    pub gen: Vec<f64>,
}

/// Noiseless forecast: the profile scaled by the agent's peaks.
pub fn forecast(profile: &DailyProfile, params: &MicrogridParams, horizon: usize) -> Realization {
    Realization {
        load: (0..horizon).map(|t| params.l_max * profile.load[t % HOURS_PER_DAY]).collect(),
        gen: (0..horizon).map(|t| params.g_max * profile.pv[t % HOURS_PER_DAY]).collect(),
    }
}

/// Adds Gaussian process noise in normalized units, then scales and clamps
/// to `[0, peak]`. Each hour draws from its own stream.
pub fn sample_realization(
    profile: &DailyProfile,
    params: &MicrogridParams,
    noise_sigma: f64,
    horizon: usize,
    stream: SeedStream,
) -> Realization {
    let draw = |base: f64, peak: f64, tag: u64, hour: usize| -> f64 {
        let noise = if noise_sigma > 0.0 {
            let normal = Normal::new(0.0, noise_sigma).expect("sigma is finite and positive");
            normal.sample(&mut stream.path(&[tag, hour as u64]).rng())
        } else {
            0.0
        };
        (peak * (base + noise)).clamp(0.0, peak)
    };
    Realization {
        load: (0..horizon)
            .map(|t| draw(profile.load[t % HOURS_PER_DAY], params.l_max, purpose::LOAD, t))
            .collect(),
        gen: (0..horizon)
            .map(|t| draw(profile.pv[t % HOURS_PER_DAY], params.g_max, purpose::PV, t))
            .collect(),
    }
}

fn default_drop_range() -> (f64, f64) {
    (0.5, 0.9)
}

fn default_ramp_hours() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptionConfig {
    /// Hourly probability of a one-hour sudden drop.
    pub p_sudden: f64,
    /// Hourly probability that a gradual decline starts.
    pub p_gradual: f64,
    /// Hourly probability of a complete failure.
    pub p_failure: f64,
    /// Sudden drops scale the hour by a factor drawn from `U(lo, hi)`.
    #[serde(default = "default_drop_range")]
    pub drop_range: (f64, f64),
    /// Hours a gradual decline takes to reach 50 % output.
    #[serde(default = "default_ramp_hours")]
    pub ramp_hours: usize,
    /// Failure length in hours; `None` lasts to the end of the episode.
    #[serde(default)]
    pub failure_hours: Option<usize>,
}

impl Default for DisruptionConfig {
    fn default() -> Self {
        DisruptionConfig::reference()
    }
}

impl DisruptionConfig {
    /// Probabilities used by the reference experiments: 15 % / 10 % / 1 %.
    pub fn reference() -> Self {
        DisruptionConfig {
            p_sudden: 0.15,
            p_gradual: 0.10,
            p_failure: 0.01,
            drop_range: default_drop_range(),
            ramp_hours: default_ramp_hours(),
            failure_hours: None,
        }
    }

    /// The literal 85 % / 10 % / 1 % reading of the published rates.
    pub fn literal() -> Self {
        DisruptionConfig {
            p_sudden: 0.85,
            ..DisruptionConfig::reference()
        }
    }

    pub fn none() -> Self {
        DisruptionConfig {
            p_sudden: 0.0,
            p_gradual: 0.0,
            p_failure: 0.0,
            ..DisruptionConfig::reference()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in [
            ("p_sudden", self.p_sudden),
            ("p_gradual", self.p_gradual),
            ("p_failure", self.p_failure),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("disruption.{name} must lie in [0, 1], got {p}"));
            }
        }
        let (lo, hi) = self.drop_range;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(format!("disruption.drop_range must satisfy 0 <= lo <= hi <= 1, got ({lo}, {hi})"));
        }
        if self.ramp_hours == 0 {
            return Err("disruption.ramp_hours must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisruptionEvent {
    SuddenDrop { hour: usize, factor: f64 },
    GradualDecline { start: usize, ramp_hours: usize },
    Failure { start: usize, hours: Option<usize> },
}

/// Samples the three event types independently for every hour.
pub fn sample_disruptions(cfg: &DisruptionConfig, horizon: usize, stream: SeedStream) -> Vec<DisruptionEvent> {
    let mut events = Vec::new();
    for hour in 0..horizon {
        let mut rng = stream.path(&[purpose::DISRUPTION, hour as u64]).rng();
        let (u_sudden, u_factor, u_gradual, u_failure): (f64, f64, f64, f64) =
            (rng.random(), rng.random(), rng.random(), rng.random());
        if u_sudden < cfg.p_sudden {
            let (lo, hi) = cfg.drop_range;
            events.push(DisruptionEvent::SuddenDrop {
                hour,
                factor: lo + (hi - lo) * u_factor,
            });
        }
        if u_gradual < cfg.p_gradual {
            events.push(DisruptionEvent::GradualDecline {
                start: hour,
                ramp_hours: cfg.ramp_hours,
            });
        }
        if u_failure < cfg.p_failure {
            events.push(DisruptionEvent::Failure {
                start: hour,
                hours: cfg.failure_hours,
            });
        }
    }
    events
}

/// Applies events multiplicatively to a generation series.
pub fn apply_disruptions(gen: &[f64], events: &[DisruptionEvent]) -> Vec<f64> {
    let n = gen.len();
    let mut factor = vec![1.0; n];
    for ev in events {
        match *ev {
            DisruptionEvent::SuddenDrop { hour, factor: f } => {
                if hour < n {
                    factor[hour] *= f;
                }
            }
            DisruptionEvent::GradualDecline { start, ramp_hours } => {
                let ramp = ramp_hours.max(1) as f64;
                for (k, slot) in factor.iter_mut().enumerate().skip(start) {
                    let progress = (((k - start) + 1) as f64 / ramp).min(1.0);
                    *slot *= 1.0 - 0.5 * progress;
                }
            }
            DisruptionEvent::Failure { start, hours } => {
                let end = hours.map_or(n, |h| (start + h).min(n));
                for slot in factor.iter_mut().take(end).skip(start) {
                    *slot = 0.0;
                }
            }
        }
    }
    gen.iter().zip(&factor).map(|(g, f)| (g * f).max(0.0)).collect()
}

pub fn apply_pv_disruption(gen: &[f64], cfg: &DisruptionConfig, stream: SeedStream) -> Vec<f64> {
    apply_disruptions(gen, &sample_disruptions(cfg, gen.len(), stream))
}

fn default_day_ahead() -> f64 {
    1.0
}

/// Main-grid prices: constant feed-in and day-ahead, hourly emergency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriceSchedule {
    pub feed_in: f64,
    #[serde(default = "default_day_ahead")]
    pub day_ahead: f64,
    pub emergency: Vec<f64>,
}

impl Default for PriceSchedule {
    fn default() -> Self {
        PriceSchedule::bundled()
    }
}

impl PriceSchedule {
    pub const FEED_IN: f64 = 0.2;
    pub const EMERGENCY_RANGE: (f64, f64) = (1.5, 3.5);

    /// Fixed 0.2 feed-in and a smooth double-peak emergency curve spanning
    /// exactly `[1.5, 3.5]` with peaks in the morning and the evening.
    pub fn bundled() -> Self {
        let raw: Vec<f64> = (0..HOURS_PER_DAY)
            .map(|h| {
                let t = h as f64;
                0.7 * gaussian(t, 8.0, 2.0) + gaussian(t, 19.0, 2.5)
            })
            .collect();
        let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (e_lo, e_hi) = Self::EMERGENCY_RANGE;
        PriceSchedule {
            feed_in: Self::FEED_IN,
            day_ahead: default_day_ahead(),
            emergency: raw.iter().map(|v| e_lo + (e_hi - e_lo) * (v - lo) / (hi - lo)).collect(),
        }
    }

    pub fn flat(feed_in: f64, day_ahead: f64, emergency: f64) -> Self {
        PriceSchedule {
            feed_in,
            day_ahead,
            emergency: vec![emergency; HOURS_PER_DAY],
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.emergency.is_empty() {
            return Err(ScenarioError::InvalidSchedule("emergency schedule is empty".into()));
        }
        for (h, &e) in self.emergency.iter().enumerate() {
            PriceEnvelope::new(self.feed_in, self.day_ahead, e)
                .map_err(|err| ScenarioError::InvalidSchedule(format!("hour {h}: {err}")))?;
        }
        Ok(())
    }

    pub fn emergency_price(&self, hour: usize) -> Result<f64, ScenarioError> {
        self.emergency
            .get(hour)
            .copied()
            .ok_or(ScenarioError::IndexOutOfRange(hour))
    }

    /// Envelope for `hour`, cycling the schedule when the horizon is longer.
    pub fn envelope(&self, hour: usize) -> PriceEnvelope {
        PriceEnvelope {
            feed_in: self.feed_in,
            day_ahead: self.day_ahead,
            emergency: self.emergency[hour % self.emergency.len()],
        }
    }

    /// Reads `hour,emergency` rows; feed-in and day-ahead come from the caller.
    pub fn read_csv(path: &Path, feed_in: f64, day_ahead: f64) -> Result<Self, ScenarioError> {
        let csv_err = |source| ScenarioError::Csv {
            path: path.display().to_string(),
            source,
        };
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(csv_err)?;
        let mut pairs = Vec::new();
        for record in reader.records() {
            let r = record.map_err(csv_err)?;
            let hour: usize = r
                .get(0)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ScenarioError::InvalidSchedule(format!("bad hour in {r:?}")))?;
            let price: f64 = r
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ScenarioError::InvalidSchedule(format!("bad price in {r:?}")))?;
            pairs.push((hour, price));
        }
        pairs.sort_by_key(|p| p.0);
        if pairs.iter().enumerate().any(|(i, p)| p.0 != i) {
            return Err(ScenarioError::InvalidSchedule("hours must be 0..n without gaps".into()));
        }
        let schedule = PriceSchedule {
            feed_in,
            day_ahead,
            emergency: pairs.into_iter().map(|p| p.1).collect(),
        };
        schedule.validate()?;
        Ok(schedule)
    }
}

/// Phase of the hour on the daily circle, as `(sin, cos)`.
pub fn hour_encoding(hour: usize) -> (f64, f64) {
    let angle = 2.0 * PI * (hour % HOURS_PER_DAY) as f64 / HOURS_PER_DAY as f64;
    (angle.sin(), angle.cos())
}
