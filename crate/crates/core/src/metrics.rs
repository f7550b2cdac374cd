//! Per-episode summaries: reward, emergency purchases, feed-in and storage.

use serde::{Deserialize, Serialize};

use crate::env::StepResult;
use crate::microgrid::SettlementRecord;

pub const METRIC_NAMES: [&str; 4] = ["reward", "emergency_kwh", "feedin_kwh", "storage_kwh"];

/// Hourly means over one episode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub reward: f64,
    pub emergency_kwh: f64,
    pub feedin_kwh: f64,
    pub storage_kwh: f64,
}

impl MetricRow {
    pub fn values(&self) -> [f64; 4] {
        [self.reward, self.emergency_kwh, self.feedin_kwh, self.storage_kwh]
    }

    fn add(&mut self, other: &MetricRow) {
        self.reward += other.reward;
        self.emergency_kwh += other.emergency_kwh;
        self.feedin_kwh += other.feedin_kwh;
        self.storage_kwh += other.storage_kwh;
    }

    fn scaled(&self, s: f64) -> MetricRow {
        MetricRow {
            reward: self.reward * s,
            emergency_kwh: self.emergency_kwh * s,
            feedin_kwh: self.feedin_kwh * s,
            storage_kwh: self.storage_kwh * s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    /// Sum over agents of each agent's hourly mean.
    pub community: MetricRow,
    pub agents: Vec<MetricRow>,
    pub max_balance_residual: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeAccumulator {
    sums: Vec<MetricRow>,
    steps: usize,
    max_residual: f64,
    dt: f64,
}

impl EpisodeAccumulator {
    pub fn new(n_agents: usize, dt: f64) -> Self {
        EpisodeAccumulator {
            sums: vec![MetricRow::default(); n_agents],
            steps: 0,
            max_residual: 0.0,
            dt,
        }
    }

    pub fn record(&mut self, step: &StepResult) {
        self.record_settlements(&step.settlements, &step.rewards);
        self.max_residual = self.max_residual.max(step.max_balance_residual(self.dt));
    }

    /// Adds one hour from stored settlements, e.g. a replayed trajectory.
    pub fn record_settlements(&mut self, settlements: &[SettlementRecord], rewards: &[f64]) {
        for ((sum, s), r) in self.sums.iter_mut().zip(settlements).zip(rewards) {
            sum.add(&MetricRow {
                reward: *r,
                emergency_kwh: s.q_e,
                feedin_kwh: s.q_fit,
                storage_kwh: s.energy,
            });
        }
        self.steps += 1;
    }

    pub fn finish(&self, episode: usize) -> EpisodeMetrics {
        let s = if self.steps > 0 { 1.0 / self.steps as f64 } else { 0.0 };
        let agents: Vec<MetricRow> = self.sums.iter().map(|m| m.scaled(s)).collect();
        let mut community = MetricRow::default();
        for a in &agents {
            community.add(a);
        }
        EpisodeMetrics {
            episode,
            community,
            agents,
            max_balance_residual: self.max_residual,
        }
    }
}

pub fn metrics_header(n_agents: usize) -> Vec<String> {
    let mut h = vec!["episode".to_string()];
    h.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
    for i in 0..n_agents {
        h.extend(METRIC_NAMES.iter().map(|m| format!("agent{i}_{m}")));
    }
    h.push("max_balance_residual".into());
    h
}

/// Wide CSV: one row per episode, community columns then per-agent columns.
pub fn write_metrics_csv<W: std::io::Write>(writer: W, n_agents: usize, rows: &[EpisodeMetrics]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(metrics_header(n_agents))?;
    for m in rows {
        let mut rec = vec![m.episode.to_string()];
        rec.extend(m.community.values().iter().map(f64::to_string));
        for a in &m.agents {
            rec.extend(a.values().iter().map(f64::to_string));
        }
        rec.push(m.max_balance_residual.to_string());
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean community metrics over a set of episodes.
pub fn mean_community(rows: &[EpisodeMetrics]) -> MetricRow {
    if rows.is_empty() {
        return MetricRow::default();
    }
    let mut acc = MetricRow::default();
    for r in rows {
        acc.add(&r.community);
    }
    acc.scaled(1.0 / rows.len() as f64)
}
