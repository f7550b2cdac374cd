use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::MarlError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `θ ← θ − lr·g`.
    Sgd,
    /// Bias-corrected adaptive moments.
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Optimizer {
    pub fn sgd() -> Self {
        Optimizer {
            kind: OptimizerKind::Sgd,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn adam(beta1: f64, beta2: f64, eps: f64) -> Self {
        Optimizer {
            kind: OptimizerKind::Adam,
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// Applies one update to `params` in place.
pub fn sgd_update(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64, opt: &mut Optimizer) -> Result<(), MarlError> {
    if params.len() != grads.len() {
        return Err(MarlError::ShapeMismatch(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(MarlError::ShapeMismatch(format!(
                "tensor {i}: parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    match opt.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (x, d) in p.data.iter_mut().zip(&g.data) {
                    *x -= lr * d;
                }
            }
        }
        OptimizerKind::Adam => {
            if opt.m.is_empty() {
                opt.m = grads.iter().map(|g| Tensor::zeros(g.rows, g.cols)).collect();
                opt.v = opt.m.clone();
            }
            if opt.m.len() != grads.len() || opt.m.iter().zip(grads).any(|(m, g)| m.shape() != g.shape()) {
                return Err(MarlError::ShapeMismatch("optimizer state does not match parameters".into()));
            }
            opt.step += 1;
            let t = opt.step as i32;
            let c1 = 1.0 - opt.beta1.powi(t);
            let c2 = 1.0 - opt.beta2.powi(t);
            for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(opt.m.iter_mut().zip(opt.v.iter_mut())) {
                for k in 0..g.data.len() {
                    let d = g.data[k];
                    m.data[k] = opt.beta1 * m.data[k] + (1.0 - opt.beta1) * d;
                    v.data[k] = opt.beta2 * v.data[k] + (1.0 - opt.beta2) * d * d;
                    let m_hat = m.data[k] / c1;
                    let v_hat = v.data[k] / c2;
                    p.data[k] -= lr * m_hat / (v_hat.sqrt() + opt.eps);
                }
            }
        }
    }
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::norm_sq).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}
