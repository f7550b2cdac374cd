//! Network building blocks with a tape path for training and a plain path
//! for fast rollouts.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::{sigmoid, Tensor};

/// Anything with trainable tensors in a fixed order.
pub trait Module {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on the tape as a leaf, in [`Module::tensors`] order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Glorot-uniform weights scaled by `gain`, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
        Linear {
            w: uniform(rng, fan_in, fan_out, bound),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(fan_in, fan_out),
            b: Tensor::zeros(1, fan_out),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.w).add_row(&self.b)
    }

    fn forward_tape(tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let xw = tape.matmul(x, p[0]);
        tape.add_row(xw, p[1])
    }
}

impl Module for Linear {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

/// Stack of linear layers. Hidden layers use `activation`; the last layer
/// is activated only when `activate_output` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    pub fn init(rng: &mut ChaCha8Rng, sizes: &[usize], activation: Activation, activate_output: bool) -> Self {
        let gain = match activation {
            Activation::Relu => 2f64.sqrt(),
            Activation::Tanh => 1.0,
        };
        Mlp {
            layers: sizes.windows(2).map(|w| Linear::init(rng, w[0], w[1], gain)).collect(),
            activation,
            activate_output,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.cols)
    }

    fn activated(&self, i: usize) -> bool {
        i + 1 < self.layers.len() || self.activate_output
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h);
            if self.activated(i) {
                let act = self.activation;
                h = h.map(|v| act.apply(v));
            }
        }
        h
    }

    pub fn forward_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        let mut h = x;
        for i in 0..self.layers.len() {
            h = Linear::forward_tape(tape, &p[2 * i..2 * i + 2], h);
            if self.activated(i) {
                h = self.activation.on_tape(tape, h);
            }
        }
        h
    }
}

impl Module for Mlp {
    fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

/// Single-layer LSTM. Gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: Tensor,
    pub wh: Tensor,
    pub b: Tensor,
}

/// Hidden and cell state for a batch, each `batch x hidden`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(batch, hidden),
            c: Tensor::zeros(batch, hidden),
        }
    }
}

impl Lstm {
    /// Forget-gate bias starts at 1.
    pub fn init(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> Self {
        let bx = (6.0 / (input + 4 * hidden) as f64).sqrt();
        let bh = (6.0 / (hidden + 4 * hidden) as f64).sqrt();
        let mut b = Tensor::zeros(1, 4 * hidden);
        b.data[hidden..2 * hidden].fill(1.0);
        Lstm {
            wx: uniform(rng, input, 4 * hidden, bx),
            wh: uniform(rng, hidden, 4 * hidden, bh),
            b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.wh.rows
    }

    pub fn step(&self, x: &Tensor, state: &LstmState) -> LstmState {
        let n = self.hidden();
        let z = x.matmul(&self.wx).add(&state.h.matmul(&self.wh)).add_row(&self.b);
        let mut h = Tensor::zeros(x.rows, n);
        let mut c = Tensor::zeros(x.rows, n);
        for r in 0..x.rows {
            let zr = z.row_slice(r);
            for k in 0..n {
                let i = sigmoid(zr[k]);
                let f = sigmoid(zr[n + k]);
                let g = zr[2 * n + k].tanh();
                let o = sigmoid(zr[3 * n + k]);
                let cv = f * state.c.get(r, k) + i * g;
                c.set(r, k, cv);
                h.set(r, k, o * cv.tanh());
            }
        }
        LstmState { h, c }
    }

    /// One step on the tape; returns `(h, c)`.
    pub fn step_tape(&self, tape: &mut Tape, p: &[Var], x: Var, h: Var, c: Var) -> (Var, Var) {
        let n = self.hidden();
        let zx = tape.matmul(x, p[0]);
        let zh = tape.matmul(h, p[1]);
        let z = tape.add(zx, zh);
        let z = tape.add_row(z, p[2]);
        let zi = tape.slice_cols(z, 0, n);
        let zf = tape.slice_cols(z, n, 2 * n);
        let zg = tape.slice_cols(z, 2 * n, 3 * n);
        let zo = tape.slice_cols(z, 3 * n, 4 * n);
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c_next = tape.add(fc, ig);
        let tc = tape.tanh(c_next);
        let h_next = tape.mul(o, tc);
        (h_next, c_next)
    }
}

impl Module for Lstm {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.wx, &self.wh, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.wx, &mut self.wh, &mut self.b]
    }
}

pub const ACTION_DIM: usize = 3;
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Recurrent actor: LSTM encoder, ReLU trunk, then a linear head producing
/// pre-squash means and log standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub lstm: Lstm,
    pub trunk: Mlp,
    pub head: Linear,
}

/// Pre-squash Gaussian parameters, each `batch x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub mean: Tensor,
    pub log_std: Tensor,
}

impl PolicyNet {
    pub fn init(
        rng: &mut ChaCha8Rng,
        obs_dim: usize,
        lstm_hidden: usize,
        trunk_hidden: &[usize],
        init_log_std: f64,
    ) -> Self {
        let lstm = Lstm::init(rng, obs_dim, lstm_hidden);
        let mut sizes = vec![lstm_hidden];
        sizes.extend_from_slice(trunk_hidden);
        let trunk = Mlp::init(rng, &sizes, Activation::Relu, true);
        let mut head = Linear::init(rng, *sizes.last().unwrap(), 2 * ACTION_DIM, 0.01);
        head.b.data[ACTION_DIM..].fill(init_log_std);
        PolicyNet { lstm, trunk, head }
    }

    pub fn obs_dim(&self) -> usize {
        self.lstm.wx.rows
    }

    pub fn hidden(&self) -> usize {
        self.lstm.hidden()
    }

    /// Advances the recurrent state by one observation batch and returns the
    /// action distribution parameters.
    pub fn step(&self, obs: &Tensor, state: &mut LstmState) -> PolicyOutput {
        *state = self.lstm.step(obs, state);
        let out = self.head.forward(&self.trunk.forward(&state.h));
        PolicyOutput {
            mean: out.slice_cols(0, ACTION_DIM),
            log_std: out.slice_cols(ACTION_DIM, 2 * ACTION_DIM).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX)),
        }
    }

    /// Runs a batch of sequences from a zero state. `seq[t]` is the
    /// `batch x obs_dim` input at time `t`. Returns the means and log-stds of
    /// every step stacked time-major: row `t·batch + b`.
    pub fn forward_tape(&self, tape: &mut Tape, p: &[Var], seq: &[Var]) -> (Var, Var) {
        let batch = tape.value(seq[0]).rows;
        let n = self.hidden();
        let (lp, rest) = p.split_at(3);
        let (tp, hp) = rest.split_at(rest.len() - 2);
        let mut h = tape.leaf(Tensor::zeros(batch, n));
        let mut c = tape.leaf(Tensor::zeros(batch, n));
        let mut hs = Vec::with_capacity(seq.len());
        for &x in seq {
            (h, c) = self.lstm.step_tape(tape, lp, x, h, c);
            hs.push(h);
        }
        let all_h = tape.concat_rows(&hs);
        let trunk = self.trunk.forward_tape(tape, tp, all_h);
        let out = Linear::forward_tape(tape, hp, trunk);
        let mean = tape.slice_cols(out, 0, ACTION_DIM);
        let raw_log_std = tape.slice_cols(out, ACTION_DIM, 2 * ACTION_DIM);
        let log_std = tape.clamp(raw_log_std, LOG_STD_MIN, LOG_STD_MAX);
        (mean, log_std)
    }
}

impl Module for PolicyNet {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.lstm.tensors();
        v.extend(self.trunk.tensors());
        v.extend(self.head.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.lstm.tensors_mut();
        v.extend(self.trunk.tensors_mut());
        v.extend(self.head.tensors_mut());
        v
    }
}

/// Centralized value network over all agents' observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub mlp: Mlp,
}

impl CriticNet {
    pub fn init(rng: &mut ChaCha8Rng, joint_obs_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![joint_obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut mlp = Mlp::init(rng, &sizes, Activation::Tanh, false);
        let last = mlp.layers.last_mut().unwrap();
        last.w = last.w.map(|v| v * 0.1);
        CriticNet { mlp }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.layers[0].w.rows
    }

    /// Values for a `batch x joint_obs_dim` input, as a `batch x 1` column.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.mlp.forward(x)
    }

    pub fn forward_tape(&self, tape: &mut Tape, p: &[Var], x: Var) -> Var {
        self.mlp.forward_tape(tape, p, x)
    }
}

impl Module for CriticNet {
    fn tensors(&self) -> Vec<&Tensor> {
        self.mlp.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.mlp.tensors_mut()
    }
}
