//! Command implementations: simulate, compare, train and export.
//!
//! Every command writes only deterministic content, so rerunning with the
//! same configuration and seed reproduces its files byte for byte.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::env::{Action, Env, EnvConfig, EnvError, Observation, TrajectoryRecord};
use crate::market::MechanismKind;
use crate::marl::{Checkpoint, Learner, LstmState, MarlError, Trainer, CHECKPOINT_VERSION};
use crate::metrics::{mean_community, write_metrics_csv, EpisodeAccumulator, EpisodeMetrics, MetricRow, METRIC_NAMES};
use crate::policy::ScriptedPolicy;
use crate::rng::{episode_seed, purpose, SeedStream};

pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const METRICS_FILE: &str = "metrics.csv";
pub const COMPARISON_FILE: &str = "comparison.csv";
pub const DELTAS_FILE: &str = "comparison_deltas.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unknown export format {0:?}; expected tidy-csv")]
    UnknownFormat(String),
    #[error("{path} line {line}: {message}")]
    Trajectory { path: PathBuf, line: usize, message: String },
}

impl SimError {
    /// Whether the failure was caused by the configuration rather than by
    /// the run itself.
    pub fn is_config(&self) -> bool {
        match self {
            SimError::Config(_) => true,
            SimError::Env(EnvError::ConfigInvalid(_)) => true,
            SimError::Marl(MarlError::InvalidHyperparams(_)) => true,
            SimError::Marl(MarlError::Env(EnvError::ConfigInvalid(_))) => true,
            _ => false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, SimError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Who chooses the actions in a simulation.
#[derive(Debug, Clone)]
pub enum Agents {
    Scripted(ScriptedPolicy),
    /// Mean actions of a trained learner.
    Learned(Box<Learner>),
}

/// Plays one episode. The environment seed and the policy stream depend only
/// on `(seed, episode)`, so two mechanisms driven with the same arguments see
/// the same random numbers.
pub fn run_episode(
    env: &mut Env,
    agents: &Agents,
    seed: u64,
    episode: usize,
    mut on_step: Option<&mut dyn FnMut(TrajectoryRecord) -> Result<(), SimError>>,
) -> Result<EpisodeMetrics, SimError> {
    let dt = env.config().dt;
    let scale = env.config().feature_scale;
    let fleet = env.config().fleet.clone();
    let mut obs: Vec<Observation> = env.reset(episode_seed(seed, episode));
    let mut rng: ChaCha8Rng = SeedStream::new(seed).path(&[purpose::POLICY, episode as u64]).rng();
    let mut states: Vec<LstmState> = match agents {
        Agents::Learned(l) => l.actors.iter().map(|a| LstmState::zeros(1, a.hidden())).collect(),
        Agents::Scripted(_) => Vec::new(),
    };
    let mut acc = EpisodeAccumulator::new(env.n_agents(), dt);
    loop {
        let actions: Vec<Action> = match agents {
            Agents::Scripted(p) => obs.iter().zip(&fleet).map(|(o, f)| p.act(o, f, dt, &mut rng)).collect(),
            Agents::Learned(l) => {
                let features: Vec<Vec<f64>> = obs.iter().map(|o| o.features(scale)).collect();
                l.greedy_actions(&features, &mut states)?
            }
        };
        let step = env.step(&actions)?;
        acc.record(&step);
        let done = step.done;
        let next = step.observations.clone();
        if let Some(f) = on_step.as_mut() {
            f(TrajectoryRecord::new(episode, obs, actions, &step))?;
        }
        obs = next;
        if done {
            break;
        }
    }
    Ok(acc.finish(episode))
}

/// Plays `episodes` episodes without recording trajectories.
pub fn run_episodes(env_config: EnvConfig, agents: &Agents, seed: u64, episodes: usize) -> Result<Vec<EpisodeMetrics>, SimError> {
    let mut env = Env::new(env_config)?;
    (0..episodes).map(|ep| run_episode(&mut env, agents, seed, ep, None)).collect()
}

fn write_metrics_file(path: &Path, n_agents: usize, rows: &[EpisodeMetrics]) -> Result<(), SimError> {
    let mut w = create(path)?;
    write_metrics_csv(&mut w, n_agents, rows)?;
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct SimulateOutput {
    pub metrics: Vec<EpisodeMetrics>,
    pub trajectory_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, SimError> {
    Checkpoint::load(path).map_err(|e| match e {
        MarlError::Io(source) => SimError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => SimError::Marl(other),
    })
}

/// Runs `episodes` episodes of the configured mechanism and writes a JSON
/// lines trajectory plus a per-episode metrics CSV into `out`. Agents follow
/// the scripted policy, or the learner stored in `checkpoint` when given.
pub fn cmd_simulate(cfg: &RunConfig, episodes: usize, out: &Path, checkpoint: Option<&Path>) -> Result<SimulateOutput, SimError> {
    let env_config = cfg.env_config()?;
    let agents = match checkpoint {
        None => Agents::Scripted(cfg.policy()?),
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.learner.n_agents() != env_config.n_agents() {
                return Err(ConfigError::Invalid {
                    field: "fleet".into(),
                    message: format!(
                        "checkpoint holds {} agents, config has {}",
                        ck.learner.n_agents(),
                        env_config.n_agents()
                    ),
                }
                .into());
            }
            Agents::Learned(Box::new(ck.learner))
        }
    };
    let n = env_config.n_agents();
    let mut env = Env::new(env_config)?;
    let trajectory_path = out.join(TRAJECTORY_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let mut traj = create(&trajectory_path)?;
    let mut metrics = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut sink = |rec: TrajectoryRecord| -> Result<(), SimError> {
            serde_json::to_writer(&mut traj, &rec)?;
            traj.write_all(b"\n").map_err(io_err(&trajectory_path))
        };
        metrics.push(run_episode(&mut env, &agents, cfg.seed, ep, Some(&mut sink))?);
    }
    traj.flush().map_err(io_err(&trajectory_path))?;
    write_metrics_file(&metrics_path, n, &metrics)?;
    Ok(SimulateOutput {
        metrics,
        trajectory_path,
        metrics_path,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mechanism: MechanismKind,
    pub mean: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonDelta {
    pub a: MechanismKind,
    pub b: MechanismKind,
    /// `a − b` for each metric.
    pub delta: MetricRow,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub deltas: Vec<ComparisonDelta>,
    pub episodes: Vec<Vec<EpisodeMetrics>>,
}

impl Comparison {
    pub fn row(&self, kind: MechanismKind) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.mechanism == kind).map(|r| &r.mean)
    }
}

fn diff(a: &MetricRow, b: &MetricRow) -> MetricRow {
    MetricRow {
        reward: a.reward - b.reward,
        emergency_kwh: a.emergency_kwh - b.emergency_kwh,
        feedin_kwh: a.feedin_kwh - b.feedin_kwh,
        storage_kwh: a.storage_kwh - b.storage_kwh,
    }
}

/// Paired comparison: every mechanism sees the same scenario draws and the
/// same scripted agents. Arms run on separate threads.
pub fn compare(cfg: &RunConfig, mechanisms: &[MechanismKind], episodes: usize) -> Result<Comparison, SimError> {
    if mechanisms.len() < 2 {
        return Err(ConfigError::Invalid {
            field: "mechanisms".into(),
            message: format!("comparison needs at least two mechanisms, got {}", mechanisms.len()),
        }
        .into());
    }
    let agents = Agents::Scripted(cfg.policy()?);
    let configs = mechanisms
        .iter()
        .map(|&m| cfg.env_config_for(m))
        .collect::<Result<Vec<_>, _>>()?;
    let results: Vec<Result<Vec<EpisodeMetrics>, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs
            .into_iter()
            .map(|c| {
                let agents = &agents;
                s.spawn(move || run_episodes(c, agents, cfg.seed, episodes))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("comparison arm panicked")).collect()
    });
    let per_arm = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let rows: Vec<ComparisonRow> = mechanisms
        .iter()
        .zip(&per_arm)
        .map(|(&mechanism, eps)| ComparisonRow {
            mechanism,
            mean: mean_community(eps),
        })
        .collect();
    let mut deltas = Vec::new();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            deltas.push(ComparisonDelta {
                a: rows[i].mechanism,
                b: rows[j].mechanism,
                delta: diff(&rows[i].mean, &rows[j].mean),
            });
        }
    }
    Ok(Comparison {
        rows,
        deltas,
        episodes: per_arm,
    })
}

/// Runs [`compare`] and writes `comparison.csv`, `comparison_deltas.csv` and
/// one metrics CSV per mechanism.
pub fn cmd_compare(cfg: &RunConfig, mechanisms: &[MechanismKind], episodes: usize, out: &Path) -> Result<Comparison, SimError> {
    let cmp = compare(cfg, mechanisms, episodes)?;
    let n = cfg.fleet.len();

    let path = out.join(COMPARISON_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["mechanism".to_string()];
    header.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    w.write_record(&header)?;
    for r in &cmp.rows {
        let mut rec = vec![r.mechanism.to_string()];
        rec.extend(r.mean.values().iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = out.join(DELTAS_FILE);
    let mut w = csv::Writer::from_writer(create(&path)?);
    let mut header = vec!["a".to_string(), "b".to_string()];
    header.extend(METRIC_NAMES.iter().map(|m| format!("delta_{m}")));
    w.write_record(&header)?;
    for d in &cmp.deltas {
        let mut rec = vec![d.a.to_string(), d.b.to_string()];
        rec.extend(d.delta.values().iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(io_err(&path))?;

    for (r, eps) in cmp.rows.iter().zip(&cmp.episodes) {
        write_metrics_file(&out.join(format!("metrics_{}.csv", r.mechanism)), n, eps)?;
    }
    Ok(cmp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub training_hash: String,
    pub seed: u64,
    pub mechanism: MechanismKind,
    pub episodes: usize,
    pub crate_version: String,
    pub checkpoint_version: u32,
}

/// Hash of everything that shapes a training run except its length, so a
/// resumed run may ask for more episodes.
pub fn training_hash(cfg: &RunConfig) -> Result<String, ConfigError> {
    let mut c = cfg.clone();
    c.episodes = 0;
    c.learner.episodes = 0;
    c.hash()
}

#[derive(Debug)]
pub struct TrainOutput {
    pub trainer: Trainer,
    pub manifest: Manifest,
}

/// Trains until `cfg.learner.episodes` episodes have been played in total,
/// optionally continuing from a checkpoint, then writes the checkpoint, the
/// metrics CSV and a manifest into `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutput, SimError> {
    let env_config = cfg.env_config()?;
    cfg.learner.validate()?;
    let hash = training_hash(cfg)?;
    let mut trainer = match resume {
        None => Trainer::new(env_config.clone(), cfg.learner.clone(), cfg.seed)?,
        Some(path) => {
            let ck = load_checkpoint(path)?;
            if ck.config_hash != hash {
                return Err(ConfigError::Invalid {
                    field: "resume".into(),
                    message: format!(
                        "checkpoint was written for config {} but the current config hashes to {hash}",
                        ck.config_hash
                    ),
                }
                .into());
            }
            ck.into_trainer(env_config.clone())?
        }
    };
    let remaining = cfg.learner.episodes.saturating_sub(trainer.next_episode());
    trainer.train(remaining)?;

    let ck_path = out.join(CHECKPOINT_FILE);
    let mut w = create(&ck_path)?;
    w.write_all(Checkpoint::from_trainer(&trainer, &hash).to_json()?.as_bytes())
        .map_err(io_err(&ck_path))?;
    w.flush().map_err(io_err(&ck_path))?;
    write_metrics_file(&out.join(METRICS_FILE), env_config.n_agents(), &trainer.metrics)?;

    let manifest = Manifest {
        config_hash: cfg.hash()?,
        training_hash: hash,
        seed: cfg.seed,
        mechanism: env_config.mechanism,
        episodes: trainer.next_episode(),
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        checkpoint_version: CHECKPOINT_VERSION,
    };
    let path = out.join(MANIFEST_FILE);
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n").map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    Ok(TrainOutput { trainer, manifest })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    /// Long format: `episode,metric,agent,value`.
    TidyCsv,
}

impl FromStr for ExportFormat {
    type Err = SimError;
    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "tidy-csv" | "tidy" | "csv" => Ok(ExportFormat::TidyCsv),
            other => Err(SimError::UnknownFormat(other.to_string())),
        }
    }
}

/// Per-episode metrics recomputed from a JSON lines trajectory.
pub fn read_trajectory_metrics(path: &Path) -> Result<Vec<EpisodeMetrics>, SimError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut per_episode: BTreeMap<usize, EpisodeAccumulator> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line).map_err(|e| SimError::Trajectory {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let acc = per_episode
            .entry(rec.episode)
            .or_insert_with(|| EpisodeAccumulator::new(rec.settlements.len(), 1.0));
        acc.record_settlements(&rec.settlements, &rec.rewards);
    }
    Ok(per_episode.into_iter().map(|(ep, acc)| acc.finish(ep)).collect())
}

/// Writes plot-ready rows for every episode, metric and agent, plus the
/// community aggregate. Returns the number of data rows.
pub fn cmd_export(trajectory: &Path, format: &str, out: &Path) -> Result<usize, SimError> {
    let ExportFormat::TidyCsv = format.parse()?;
    let metrics = read_trajectory_metrics(trajectory)?;
    let mut w = csv::Writer::from_writer(create(out)?);
    w.write_record(["episode", "metric", "agent", "value"])?;
    let mut rows = 0;
    for m in &metrics {
        for (k, name) in METRIC_NAMES.iter().enumerate() {
            let community = m.community.values()[k].to_string();
            w.write_record([m.episode.to_string().as_str(), name, "community", community.as_str()])?;
            rows += 1;
            for (i, a) in m.agents.iter().enumerate() {
                w.write_record([m.episode.to_string(), name.to_string(), i.to_string(), a.values()[k].to_string()])?;
                rows += 1;
            }
        }
    }
    w.flush().map_err(io_err(out))?;
    Ok(rows)
}
