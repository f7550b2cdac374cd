use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::{Learner, Trainer, UpdateStats};
use super::{Hyperparams, MarlError};
use crate::env::EnvConfig;
use crate::metrics::EpisodeMetrics;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "p2pgrid-checkpoint";

/// Everything needed to continue a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Index of the first episode not yet run.
    pub next_episode: usize,
    pub update_count: usize,
    pub hyper: Hyperparams,
    pub learner: Learner,
    pub metrics: Vec<EpisodeMetrics>,
    pub updates: Vec<UpdateStats>,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    checksum: String,
    payload: serde_json::Value,
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, config_hash: &str) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed: trainer.seed(),
            next_episode: trainer.next_episode(),
            update_count: trainer.update_count(),
            hyper: trainer.hyper().clone(),
            learner: trainer.learner.clone(),
            metrics: trainer.metrics.clone(),
            updates: trainer.updates.clone(),
        }
    }

    /// Rebuilds a trainer that continues at `next_episode`.
    pub fn into_trainer(self, env_config: EnvConfig) -> Result<Trainer, MarlError> {
        let mut t = Trainer::with_learner(
            env_config,
            self.hyper,
            self.seed,
            self.learner,
            self.next_episode,
            self.update_count,
        )?;
        t.metrics = self.metrics;
        t.updates = self.updates;
        Ok(t)
    }

    /// JSON text with a SHA-256 checksum over the canonical payload.
    pub fn to_json(&self) -> Result<String, MarlError> {
        let payload = serde_json::to_value(self).map_err(|e| MarlError::Checkpoint(e.to_string()))?;
        let checksum = digest(&payload.to_string());
        let env = Envelope {
            format: FORMAT.to_string(),
            checksum,
            payload,
        };
        serde_json::to_string(&env).map_err(|e| MarlError::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, MarlError> {
        let env: Envelope =
            serde_json::from_str(text).map_err(|e| MarlError::Checkpoint(format!("unreadable checkpoint: {e}")))?;
        if env.format != FORMAT {
            return Err(MarlError::Checkpoint(format!("unexpected format tag {:?}", env.format)));
        }
        let found = digest(&env.payload.to_string());
        if found != env.checksum {
            return Err(MarlError::ChecksumMismatch {
                expected: env.checksum,
                found,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(env.payload).map_err(|e| MarlError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(MarlError::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), MarlError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, MarlError> {
        Checkpoint::from_json(&fs::read_to_string(path)?)
    }
}
