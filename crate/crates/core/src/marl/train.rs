//! Rollout collection and per-agent PPO updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::buffer::{AgentEpisode, RolloutBuffer};
use super::dist;
use super::nn::{CriticNet, LstmState, Module, PolicyNet, PolicyOutput};
use super::optim::{clip_grad_norm, sgd_update, Optimizer};
use super::ppo::{actor_loss_tape, compute_gae, critic_loss_tape, normalize_advantages};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{Hyperparams, MarlError};
use crate::env::{Action, Env, EnvConfig, Observation};
use crate::metrics::{EpisodeAccumulator, EpisodeMetrics};
use crate::rng::{episode_seed, purpose, SeedStream};

/// Per-agent networks and optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    pub actors: Vec<PolicyNet>,
    pub critics: Vec<CriticNet>,
    pub actor_opts: Vec<Optimizer>,
    pub critic_opts: Vec<Optimizer>,
}

impl Learner {
    pub fn new(env: &EnvConfig, hyper: &Hyperparams, seed: u64) -> Self {
        let n = env.n_agents();
        let obs_dim = env.obs_dim();
        let init = SeedStream::new(seed).child(purpose::INIT);
        let actors = (0..n)
            .map(|i| {
                let mut rng = init.path(&[i as u64, 0]).rng();
                PolicyNet::init(&mut rng, obs_dim, hyper.lstm_hidden, &hyper.actor_hidden, hyper.init_log_std)
            })
            .collect();
        let critics = (0..n)
            .map(|i| {
                let mut rng = init.path(&[i as u64, 1]).rng();
                CriticNet::init(&mut rng, n * obs_dim, &hyper.critic_hidden)
            })
            .collect();
        Learner {
            actors,
            critics,
            actor_opts: vec![hyper.optimizer(); n],
            critic_opts: vec![hyper.optimizer(); n],
        }
    }

    pub fn n_agents(&self) -> usize {
        self.actors.len()
    }

    /// Deterministic actions (squashed means) for evaluation.
    pub fn greedy_actions(&self, features: &[Vec<f64>], states: &mut [LstmState]) -> Result<Vec<Action>, MarlError> {
        features
            .iter()
            .zip(self.actors.iter())
            .zip(states.iter_mut())
            .map(|((f, actor), state)| {
                let out = policy_forward(actor, f, state)?;
                let mean = [out.mean.data[0], out.mean.data[1], out.mean.data[2]];
                Ok(Action::from_array(dist::squash(&mean)))
            })
            .collect()
    }
}

/// One recurrent policy step on a single observation.
pub fn policy_forward(net: &PolicyNet, features: &[f64], state: &mut LstmState) -> Result<PolicyOutput, MarlError> {
    if features.len() != net.obs_dim() {
        return Err(MarlError::ShapeMismatch(format!(
            "observation has {} features, policy expects {}",
            features.len(),
            net.obs_dim()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(MarlError::NonFiniteInput);
    }
    Ok(net.step(&Tensor::row(features), state))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub update: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
}

/// Stateful training run; can be checkpointed between episodes.
#[derive(Debug)]
pub struct Trainer {
    env: Env,
    hyper: Hyperparams,
    seed: u64,
    pub learner: Learner,
    buffer: RolloutBuffer,
    pub metrics: Vec<EpisodeMetrics>,
    pub updates: Vec<UpdateStats>,
    next_episode: usize,
    update_count: usize,
}

impl Trainer {
    pub fn new(env_config: EnvConfig, hyper: Hyperparams, seed: u64) -> Result<Self, MarlError> {
        hyper.validate()?;
        let learner = Learner::new(&env_config, &hyper, seed);
        Trainer::with_learner(env_config, hyper, seed, learner, 0, 0)
    }

    pub fn with_learner(
        env_config: EnvConfig,
        hyper: Hyperparams,
        seed: u64,
        learner: Learner,
        next_episode: usize,
        update_count: usize,
    ) -> Result<Self, MarlError> {
        hyper.validate()?;
        let env = Env::new(env_config)?;
        if learner.n_agents() != env.n_agents() {
            return Err(MarlError::ShapeMismatch(format!(
                "learner has {} agents, environment has {}",
                learner.n_agents(),
                env.n_agents()
            )));
        }
        if learner.actors[0].obs_dim() != env.config().obs_dim() {
            return Err(MarlError::ShapeMismatch("observation size differs from the learner's".into()));
        }
        let buffer = RolloutBuffer::new(env.n_agents(), hyper.buffer_episodes);
        Ok(Trainer {
            env,
            hyper,
            seed,
            learner,
            buffer,
            metrics: Vec::new(),
            updates: Vec::new(),
            next_episode,
            update_count,
        })
    }

    pub fn next_episode(&self) -> usize {
        self.next_episode
    }

    pub fn update_count(&self) -> usize {
        self.update_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn env_config(&self) -> &EnvConfig {
        self.env.config()
    }

    /// Collects one episode and updates when the buffer is full.
    pub fn run_episode(&mut self) -> Result<EpisodeMetrics, MarlError> {
        let episode = self.next_episode;
        let metrics = self.collect(episode)?;
        self.next_episode += 1;
        self.metrics.push(metrics.clone());
        if self.buffer.is_full() {
            self.update()?;
        }
        Ok(metrics)
    }

    /// Runs `episodes` episodes, then spends any partially filled buffer.
    pub fn train(&mut self, episodes: usize) -> Result<(), MarlError> {
        for _ in 0..episodes {
            self.run_episode()?;
        }
        if !self.buffer.is_empty() {
            self.update()?;
        }
        Ok(())
    }

    fn collect(&mut self, episode: usize) -> Result<EpisodeMetrics, MarlError> {
        let n = self.env.n_agents();
        let scale = self.env.config().feature_scale;
        let dt = self.env.config().dt;
        let mut obs = self.env.reset(episode_seed(self.seed, episode));
        let mut rng = SeedStream::new(self.seed)
            .path(&[purpose::POLICY, episode as u64])
            .rng();
        let mut states: Vec<LstmState> = self
            .learner
            .actors
            .iter()
            .map(|a| LstmState::zeros(1, a.hidden()))
            .collect();
        let mut records = vec![AgentEpisode::default(); n];
        let mut joint_seq = Vec::new();
        let mut acc = EpisodeAccumulator::new(n, dt);

        loop {
            let features: Vec<Vec<f64>> = obs.iter().map(|o| o.features(scale)).collect();
            let joint: Vec<f64> = features.concat();
            let joint_t = Tensor::row(&joint);
            let mut actions = Vec::with_capacity(n);
            for i in 0..n {
                let out = policy_forward(&self.learner.actors[i], &features[i], &mut states[i])?;
                let u = dist::sample(&out.mean.data, &out.log_std.data, &mut rng);
                let logp = dist::log_prob(&u, &out.mean.data, &out.log_std.data);
                actions.push(Action::from_array(dist::squash(&u)));
                let value = self.learner.critics[i].forward(&joint_t).item();
                let r = &mut records[i];
                r.obs.push(features[i].clone());
                r.u.push(u);
                r.logp.push(logp);
                r.values.push(value);
            }
            let step = self.env.step(&actions)?;
            acc.record(&step);
            for (r, reward) in records.iter_mut().zip(&step.rewards) {
                r.rewards.push(reward * self.hyper.reward_scale);
                r.dones.push(step.done);
            }
            joint_seq.push(joint);
            obs = step.observations;
            if step.done {
                break;
            }
        }
        self.buffer.push(records, joint_seq);
        Ok(acc.finish(episode))
    }

    fn update(&mut self) -> Result<(), MarlError> {
        let h = self.hyper.clone();
        let n_eps = self.buffer.episodes();
        let horizon = self.buffer.joint[0].len();
        let chunk = (h.minibatch / horizon).clamp(1, n_eps);
        let mut stats = UpdateStats {
            update: self.update_count,
            ..Default::default()
        };
        let mut batches = 0usize;

        for agent in 0..self.learner.n_agents() {
            let episodes = &self.buffer.agents[agent];
            let advantages: Vec<Vec<f64>> = episodes
                .iter()
                .map(|e| compute_gae(&e.rewards, &e.values, 0.0, h.gamma, h.lambda))
                .collect();
            let returns: Vec<Vec<f64>> = advantages
                .iter()
                .zip(episodes)
                .map(|(a, e)| a.iter().zip(&e.values).map(|(a, v)| a + v).collect())
                .collect();

            for epoch in 0..h.epochs {
                let mut order: Vec<usize> = (0..n_eps).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(
                    SeedStream::new(self.seed)
                        .path(&[purpose::SHUFFLE, self.update_count as u64, agent as u64, epoch as u64])
                        .value(),
                );
                order.shuffle(&mut rng);
                for mb in order.chunks(chunk) {
                    let (a_loss, ent) = actor_step(
                        &mut self.learner.actors[agent],
                        &mut self.learner.actor_opts[agent],
                        episodes,
                        &advantages,
                        mb,
                        &h,
                    )?;
                    let c_loss = critic_step(
                        &mut self.learner.critics[agent],
                        &mut self.learner.critic_opts[agent],
                        &self.buffer.joint,
                        &returns,
                        mb,
                        &h,
                    )?;
                    stats.actor_loss += a_loss;
                    stats.entropy += ent;
                    stats.critic_loss += c_loss;
                    batches += 1;
                }
            }
        }
        let b = batches.max(1) as f64;
        stats.actor_loss /= b;
        stats.critic_loss /= b;
        stats.entropy /= b;
        self.updates.push(stats);
        self.update_count += 1;
        self.buffer.clear();
        Ok(())
    }
}

/// Flattened time-major minibatch: row `t·B + b` is step `t` of episode `mb[b]`.
fn time_major<T: Clone>(mb: &[usize], horizon: usize, get: impl Fn(usize, usize) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(mb.len() * horizon);
    for t in 0..horizon {
        for &e in mb {
            out.push(get(e, t));
        }
    }
    out
}

/// Actor loss on a minibatch of whole episodes, replayed from a zero state.
pub(crate) fn actor_loss_on_batch(
    net: &PolicyNet,
    tape: &mut Tape,
    p: &[Var],
    episodes: &[AgentEpisode],
    advantages: &[Vec<f64>],
    mb: &[usize],
    clip_eps: f64,
    entropy_coef: f64,
) -> (Var, Var) {
    let horizon = episodes[mb[0]].len();
    let seq: Vec<Var> = (0..horizon)
        .map(|t| {
            let rows: Vec<Vec<f64>> = mb.iter().map(|&e| episodes[e].obs[t].clone()).collect();
            tape.leaf(Tensor::from_rows(&rows))
        })
        .collect();
    let (mean, log_std) = net.forward_tape(tape, p, &seq);
    let u_rows: Vec<Vec<f64>> = time_major(mb, horizon, |e, t| episodes[e].u[t].to_vec());
    let u = Tensor::from_rows(&u_rows);
    let logp_old = time_major(mb, horizon, |e, t| episodes[e].logp[t]);
    let mut adv = time_major(mb, horizon, |e, t| advantages[e][t]);
    normalize_advantages(&mut adv);
    let logp_new = dist::log_prob_tape(tape, &u, mean, log_std);
    let entropy = dist::entropy_tape(tape, log_std);
    let loss = actor_loss_tape(tape, logp_new, &logp_old, &adv, entropy, clip_eps, entropy_coef);
    (loss, entropy)
}

fn apply(module: &mut impl Module, opt: &mut Optimizer, mut grads: Vec<Tensor>, lr: f64, max_norm: f64) -> Result<(), MarlError> {
    clip_grad_norm(&mut grads, max_norm);
    let mut params = module.tensors_mut();
    sgd_update(&mut params, &grads, lr, opt)
}

fn actor_step(
    net: &mut PolicyNet,
    opt: &mut Optimizer,
    episodes: &[AgentEpisode],
    advantages: &[Vec<f64>],
    mb: &[usize],
    h: &Hyperparams,
) -> Result<(f64, f64), MarlError> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let (loss, entropy) = actor_loss_on_batch(net, &mut tape, &p, episodes, advantages, mb, h.clip_eps, h.entropy_coef);
    let loss_value = tape.value(loss).item();
    let ent = tape.value(entropy);
    let mean_entropy = ent.sum() / ent.len() as f64;
    let grads = tape.backward(loss);
    let g: Vec<Tensor> = p.iter().map(|&v| grads.get(v)).collect();
    apply(net, opt, g, h.lr_actor, h.max_grad_norm)?;
    Ok((loss_value, mean_entropy))
}

fn critic_step(
    net: &mut CriticNet,
    opt: &mut Optimizer,
    joint: &[Vec<Vec<f64>>],
    returns: &[Vec<f64>],
    mb: &[usize],
    h: &Hyperparams,
) -> Result<f64, MarlError> {
    let horizon = joint[mb[0]].len();
    let rows = time_major(mb, horizon, |e, t| joint[e][t].clone());
    let targets = time_major(mb, horizon, |e, t| returns[e][t]);
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let x = tape.leaf(Tensor::from_rows(&rows));
    let v = net.forward_tape(&mut tape, &p, x);
    let loss = critic_loss_tape(&mut tape, v, &targets);
    let loss_value = tape.value(loss).item();
    let grads = tape.backward(loss);
    let g: Vec<Tensor> = p.iter().map(|&v| grads.get(v)).collect();
    apply(net, opt, g, h.lr_critic, h.max_grad_norm)?;
    Ok(loss_value)
}

/// Trains from scratch for `hyper.episodes` episodes.
pub fn train(
    env_config: EnvConfig,
    hyper: Hyperparams,
    seed: u64,
) -> Result<(Learner, Vec<EpisodeMetrics>), MarlError> {
    let episodes = hyper.episodes;
    let mut trainer = Trainer::new(env_config, hyper, seed)?;
    trainer.train(episodes)?;
    Ok((trainer.learner, trainer.metrics))
}

/// Runs the learned policy with mean actions; used for evaluation.
pub fn evaluate(learner: &Learner, env: &mut Env, seed: u64, episodes: usize) -> Result<Vec<EpisodeMetrics>, MarlError> {
    let scale = env.config().feature_scale;
    let dt = env.config().dt;
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut obs: Vec<Observation> = env.reset(episode_seed(seed, ep));
        let mut states: Vec<LstmState> = learner.actors.iter().map(|a| LstmState::zeros(1, a.hidden())).collect();
        let mut acc = EpisodeAccumulator::new(env.n_agents(), dt);
        loop {
            let features: Vec<Vec<f64>> = obs.iter().map(|o| o.features(scale)).collect();
            let actions = learner.greedy_actions(&features, &mut states)?;
            let step = env.step(&actions)?;
            acc.record(&step);
            obs = step.observations;
            if step.done {
                break;
            }
        }
        out.push(acc.finish(ep));
    }
    Ok(out)
}
