//! Advantage estimation and the clipped-surrogate losses.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Generalized advantage estimates by backward recursion.
///
/// `values[l]` is the value of state `l`; `bootstrap` is the value after the
/// last reward (0 for a terminated episode).
pub fn compute_gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len(), "rewards and values differ in length");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for l in (0..n).rev() {
        let next = if l + 1 < n { values[l + 1] } else { bootstrap };
        let delta = rewards[l] + gamma * next - values[l];
        running = delta + gamma * lambda * running;
        adv[l] = running;
    }
    adv
}

pub fn importance_ratio(logp_new: f64, logp_old: f64) -> f64 {
    (logp_new - logp_old).exp()
}

/// Shifts to zero mean and scales to unit variance. A constant batch maps to zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a = if std > 1e-12 { (*a - mean) / std } else { 0.0 };
    }
}

fn clipped_objective(rho: f64, adv: f64, eps: f64) -> f64 {
    (rho * adv).min(rho.clamp(1.0 - eps, 1.0 + eps) * adv)
}

/// `−mean(min(ρÂ, clip(ρ, 1−ε, 1+ε)Â) + c·H)`.
///
/// The entropy term enters as a bonus: raising `c` pushes the policy towards
/// higher entropy.
pub fn actor_loss(ratios: &[f64], advantages: &[f64], entropies: &[f64], eps: f64, c: f64) -> f64 {
    let n = ratios.len() as f64;
    -ratios
        .iter()
        .zip(advantages)
        .zip(entropies)
        .map(|((&rho, &a), &h)| clipped_objective(rho, a, eps) + c * h)
        .sum::<f64>()
        / n
}

pub fn critic_loss(values: &[f64], targets: &[f64]) -> f64 {
    let n = values.len() as f64;
    values.iter().zip(targets).map(|(v, t)| (v - t).powi(2)).sum::<f64>() / n
}

/// Tape version of [`actor_loss`] given new log-probs (`n x 1`), per-row
/// entropies (`n x 1`) and data for the old log-probs and advantages.
pub fn actor_loss_tape(
    tape: &mut Tape,
    logp_new: Var,
    logp_old: &[f64],
    advantages: &[f64],
    entropy: Var,
    eps: f64,
    c: f64,
) -> Var {
    let old = tape.leaf(Tensor::column(logp_old));
    let diff = tape.sub(logp_new, old);
    let rho = tape.exp(diff);
    ratio_loss_tape(tape, rho, advantages, entropy, eps, c)
}

/// Clipped-surrogate loss from a ratio node; exposed so the ratio itself can
/// be differentiated.
pub fn ratio_loss_tape(tape: &mut Tape, rho: Var, advantages: &[f64], entropy: Var, eps: f64, c: f64) -> Var {
    let adv = tape.leaf(Tensor::column(advantages));
    let surr1 = tape.mul(rho, adv);
    let clipped = tape.clamp(rho, 1.0 - eps, 1.0 + eps);
    let surr2 = tape.mul(clipped, adv);
    let surr = tape.min(surr1, surr2);
    let bonus = tape.scale(entropy, c);
    let objective = tape.add(surr, bonus);
    let mean = tape.mean(objective);
    tape.scale(mean, -1.0)
}

pub fn critic_loss_tape(tape: &mut Tape, values: Var, targets: &[f64]) -> Var {
    let t = tape.leaf(Tensor::column(targets));
    let diff = tape.sub(values, t);
    let sq = tape.square(diff);
    tape.mean(sq)
}
