//! Finite-difference verification of tape gradients.

use super::nn::Module;
use super::tape::{Tape, Var};
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, element)` with the largest error.
    pub worst: (usize, usize),
    pub checked: usize,
    /// Elements re-measured with a smaller step because of a nearby kink.
    pub refined: usize,
    pub passed: bool,
}

/// Builds a scalar loss on `tape` from the bound parameters of a module.
pub type LossFn<'a, M> = dyn Fn(&M, &mut Tape, &[Var]) -> Var + 'a;

pub fn loss_value<M: Module>(net: &M, loss: &LossFn<M>) -> f64 {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let out = loss(net, &mut tape, &p);
    tape.value(out).item()
}

pub fn analytic_gradients<M: Module>(net: &M, loss: &LossFn<M>) -> Vec<Tensor> {
    let mut tape = Tape::new();
    let p = net.bind(&mut tape);
    let out = loss(net, &mut tape, &p);
    let grads = tape.backward(out);
    p.iter().map(|&v| grads.get(v)).collect()
}

/// Central difference of `loss` in element `k` of tensor `ti`, plus the two
/// one-sided quotients.
fn differences<M: Module>(probe: &mut M, loss: &LossFn<M>, ti: usize, k: usize, h: f64, base: f64) -> (f64, f64, f64) {
    let original = probe.tensors()[ti].data[k];
    probe.tensors_mut()[ti].data[k] = original + h;
    let plus = loss_value(probe, loss);
    probe.tensors_mut()[ti].data[k] = original - h;
    let minus = loss_value(probe, loss);
    probe.tensors_mut()[ti].data[k] = original;
    ((plus - minus) / (2.0 * h), (plus - base) / h, (base - minus) / h)
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compares `analytic` against central differences with step [`FD_STEP`].
/// The relative error uses `max(|a|, |n|, 1e-3)` as denominator.
///
/// ReLU, clamp and min are not differentiable everywhere. When a mismatch
/// coincides with disagreeing one-sided quotients the stencil straddles a
/// kink, and the element is re-measured with steps 10 and 100 times smaller.
pub fn compare_gradients<M: Module + Clone>(
    net: &M,
    loss: &LossFn<M>,
    analytic: &[Tensor],
    tol: f64,
) -> GradCheckReport {
    let mut probe = net.clone();
    let base = loss_value(net, loss);
    let mut max_rel_error: f64 = 0.0;
    let mut worst = (0, 0);
    let mut checked = 0;
    let mut refined = 0;
    let n_tensors = net.tensors().len();
    for ti in 0..n_tensors {
        let len = net.tensors()[ti].len();
        for k in 0..len {
            let a = analytic[ti].data[k];
            let (mut numeric, fwd, bwd) = differences(&mut probe, loss, ti, k, FD_STEP, base);
            let mut rel = rel_error(a, numeric);
            if rel >= tol && rel_error(fwd, bwd) >= tol {
                refined += 1;
                for h in [FD_STEP / 10.0, FD_STEP / 100.0] {
                    numeric = differences(&mut probe, loss, ti, k, h, base).0;
                    rel = rel_error(a, numeric);
                    if rel < tol {
                        break;
                    }
                }
            }
            if rel > max_rel_error || !rel.is_finite() {
                max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                worst = (ti, k);
            }
            checked += 1;
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        checked,
        refined,
        passed: max_rel_error < tol,
    }
}

pub fn gradient_check<M: Module + Clone>(net: &M, loss: &LossFn<M>, tol: f64) -> GradCheckReport {
    let analytic = analytic_gradients(net, loss);
    compare_gradients(net, loss, &analytic, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marl::nn::{Activation, Linear, Lstm, Mlp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn quadratic(net: &Linear, tape: &mut Tape, p: &[Var]) -> Var {
        let _ = net;
        let x = tape.leaf(Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]));
        let xw = tape.matmul(x, p[0]);
        let y = tape.add_row(xw, p[1]);
        let target = tape.leaf(Tensor::from_vec(2, 2, vec![1.0, 0.0, -1.0, 2.0]));
        let d = tape.sub(y, target);
        let sq = tape.square(d);
        tape.mean(sq)
    }

    #[test]
    fn linear_quadratic_is_nearly_exact() {
        let net = Linear::init(&mut ChaCha8Rng::seed_from_u64(1), 3, 2, 1.0);
        let report = gradient_check(&net, &quadratic, 1e-4);
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn mlp_and_lstm_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(&mut rng, &[3, 4, 2], Activation::Tanh, false);
        let loss = |net: &Mlp, tape: &mut Tape, p: &[Var]| {
            let x = tape.leaf(Tensor::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.3, -0.7]));
            let y = net.forward_tape(tape, p, x);
            let sq = tape.square(y);
            tape.sum(sq)
        };
        assert!(gradient_check(&mlp, &loss, 1e-4).passed);

        let lstm = Lstm::init(&mut rng, 2, 3);
        let loss = |net: &Lstm, tape: &mut Tape, p: &[Var]| {
            let mut h = tape.leaf(Tensor::zeros(2, 3));
            let mut c = tape.leaf(Tensor::zeros(2, 3));
            for t in 0..4 {
                let x = tape.leaf(Tensor::from_vec(2, 2, vec![0.1 * t as f64, -0.5, 0.7, 0.2 * t as f64]));
                (h, c) = net.step_tape(tape, p, x, h, c);
            }
            let sq = tape.square(h);
            tape.sum(sq)
        };
        let report = gradient_check(&lstm, &loss, 1e-4);
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn kink_inside_stencil_is_remeasured() {
        // relu(w + b) with w + b = 3e-6: the kink lies within one step.
        let net = Linear {
            w: Tensor::scalar(0.3),
            b: Tensor::row(&[-0.3 + 3e-6]),
        };
        let loss = |_: &Linear, tape: &mut Tape, p: &[Var]| {
            let x = tape.leaf(Tensor::scalar(1.0));
            let xw = tape.matmul(x, p[0]);
            let y = tape.add_row(xw, p[1]);
            let r = tape.relu(y);
            tape.sum(r)
        };
        let report = gradient_check(&net, &loss, 1e-4);
        assert!(report.passed, "{report:?}");
        assert_eq!(report.refined, 2);

        let mut wrong = analytic_gradients(&net, &loss);
        wrong[0].data[0] = 0.5;
        assert!(!compare_gradients(&net, &loss, &wrong, 1e-4).passed);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let net = Linear::init(&mut ChaCha8Rng::seed_from_u64(1), 3, 2, 1.0);
        let mut analytic = analytic_gradients(&net, &quadratic);
        analytic[0].data[3] += 0.1;
        let report = compare_gradients(&net, &quadratic, &analytic, 1e-4);
        assert!(!report.passed);
        assert_eq!(report.worst, (0, 3));
    }
}
