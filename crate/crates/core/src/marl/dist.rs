//! Squashed diagonal Gaussian over the action box.
//!
//! A pre-squash sample `u` maps to `price = tanh(u₀)`,
//! `qty = (tanh(u₁) + 1) / 2` and `reservation = (tanh(u₂) + 1) / 2`.

use std::f64::consts::LN_2;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::nn::ACTION_DIM;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

pub fn squash(u: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
    [u[0].tanh(), 0.5 * (u[1].tanh() + 1.0), 0.5 * (u[2].tanh() + 1.0)]
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `ln(1 − tanh²(x))`, stable for large `|x|`.
fn log_dtanh(x: f64) -> f64 {
    2.0 * (LN_2 - x - softplus(-2.0 * x))
}

/// Log-Jacobian of the squash at `u`.
pub fn squash_log_det(u: &[f64; ACTION_DIM]) -> f64 {
    log_dtanh(u[0]) + log_dtanh(u[1]) - LN_2 + log_dtanh(u[2]) - LN_2
}

pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((&u, &m), &s)| {
            let z = (u - m) * (-s).exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// Log-density of the squashed action whose pre-squash value is `u`.
pub fn log_prob(u: &[f64; ACTION_DIM], mean: &[f64], log_std: &[f64]) -> f64 {
    gaussian_log_prob(u, mean, log_std) - squash_log_det(u)
}

/// Closed-form entropy of the pre-squash Gaussian.
pub fn entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| s + 0.5 + HALF_LN_2PI).sum()
}

pub fn sample<R: Rng>(mean: &[f64], log_std: &[f64], rng: &mut R) -> [f64; ACTION_DIM] {
    std::array::from_fn(|k| {
        let z: f64 = StandardNormal.sample(rng);
        mean[k] + log_std[k].exp() * z
    })
}

/// Per-row log-density on the tape, as an `n x 1` column. `u` is data;
/// `mean` and `log_std` are `n x 3` nodes.
pub fn log_prob_tape(tape: &mut Tape, u: &Tensor, mean: Var, log_std: Var) -> Var {
    let uv = tape.leaf(u.clone());
    let diff = tape.sub(uv, mean);
    let neg_log_std = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_log_std);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.square(z);
    let half_z2 = tape.scale(z2, -0.5);
    let per_dim = tape.sub(half_z2, log_std);
    let summed = tape.sum_cols(per_dim);
    let correction: Vec<f64> = (0..u.rows)
        .map(|r| {
            let row = u.row_slice(r);
            -(ACTION_DIM as f64) * HALF_LN_2PI - squash_log_det(&[row[0], row[1], row[2]])
        })
        .collect();
    let c = tape.leaf(Tensor::column(&correction));
    tape.add(summed, c)
}

/// Per-row entropy on the tape, as an `n x 1` column.
pub fn entropy_tape(tape: &mut Tape, log_std: Var) -> Var {
    let s = tape.sum_cols(log_std);
    tape.add_scalar(s, ACTION_DIM as f64 * (0.5 + HALF_LN_2PI))
}
