//! Recurrent multi-agent PPO with centralized critics.
//!
//! Each agent owns an LSTM actor that sees only its local observation and a
//! critic that sees every agent's observation. Gradients come from the
//! in-crate tape in [`tape`].

mod buffer;
mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod ppo;
pub mod tape;
pub mod tensor;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::EnvError;

pub use buffer::{AgentEpisode, RolloutBuffer};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use nn::{CriticNet, LstmState, Module, PolicyNet};
pub use optim::{sgd_update, Optimizer, OptimizerKind};
pub use ppo::{actor_loss, compute_gae, critic_loss, importance_ratio};
pub use tensor::Tensor;
pub use train::{evaluate, policy_forward, train, Learner, Trainer, UpdateStats};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error("non-finite value in network input")]
    NonFiniteInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("checkpoint checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Learner settings. Network sizes default to a laptop-sized preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub epochs: usize,
    /// Minibatch size in steps; rounded down to whole episodes.
    pub minibatch: usize,
    pub episodes: usize,
    /// Episodes collected between updates.
    pub buffer_episodes: usize,
    pub lstm_hidden: usize,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub optimizer: OptimizerKind,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Multiplier applied to rewards before they enter the learner.
    pub reward_scale: f64,
    pub init_log_std: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams::desk()
    }
}

impl Hyperparams {
    pub fn desk() -> Self {
        Hyperparams {
            gamma: 0.95,
            lambda: 0.95,
            clip_eps: 0.2,
            entropy_coef: 0.01,
            lr_actor: 3e-4,
            lr_critic: 1e-3,
            epochs: 10,
            minibatch: 512,
            episodes: 500,
            buffer_episodes: 4,
            lstm_hidden: 32,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![128, 64],
            optimizer: OptimizerKind::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 0.5,
            reward_scale: 0.1,
            init_log_std: -0.5,
        }
    }

    /// Network sizes and buffer length of the full-scale experiments.
    pub fn full_scale() -> Self {
        Hyperparams {
            episodes: 7000,
            lstm_hidden: 128,
            actor_hidden: vec![512, 512],
            critic_hidden: vec![2056, 1024],
            buffer_episodes: 1024 / 24,
            ..Hyperparams::desk()
        }
    }

    pub fn optimizer(&self) -> Optimizer {
        match self.optimizer {
            OptimizerKind::Sgd => Optimizer::sgd(),
            OptimizerKind::Adam => Optimizer::adam(self.adam_beta1, self.adam_beta2, self.adam_eps),
        }
    }

    pub fn validate(&self) -> Result<(), MarlError> {
        let bad = |m: String| Err(MarlError::InvalidHyperparams(m));
        for (name, v) in [("gamma", self.gamma), ("lambda", self.lambda)] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must lie in (0, 1), got {v}"));
            }
        }
        if !(self.clip_eps > 0.0) {
            return bad(format!("clip_eps must be positive, got {}", self.clip_eps));
        }
        if self.epochs < 1 {
            return bad("epochs must be >= 1".into());
        }
        if self.buffer_episodes < 1 {
            return bad("buffer_episodes must be >= 1".into());
        }
        if self.lstm_hidden < 1 || self.actor_hidden.contains(&0) || self.critic_hidden.contains(&0) {
            return bad("layer widths must be >= 1".into());
        }
        for (name, v) in [
            ("entropy_coef", self.entropy_coef),
            ("lr_actor", self.lr_actor),
            ("lr_critic", self.lr_critic),
            ("max_grad_norm", self.max_grad_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.reward_scale > 0.0 && self.reward_scale.is_finite()) {
            return bad(format!("reward_scale must be positive, got {}", self.reward_scale));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        Hyperparams::desk().validate().unwrap();
        Hyperparams::full_scale().validate().unwrap();
        let bad = Hyperparams {
            gamma: 1.0,
            ..Hyperparams::desk()
        };
        assert!(bad.validate().is_err());
        let bad = Hyperparams {
            epochs: 0,
            ..Hyperparams::desk()
        };
        assert!(bad.validate().is_err());
    }
}
