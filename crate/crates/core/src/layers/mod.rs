//! Neural building blocks: dense, convolution, peephole LSTM, bidirectional
//! wrapper, batch normalization, dropout, and the residual block.
//!
//! Layers own their parameters as plain buffers and bind them onto a tape by
//! name each forward pass. Weight updates happen outside the tape, between
//! passes, through [`HasParams`].

mod conv;
mod lstm;
mod norm;
mod residual;

pub use conv::{Conv2d, ConvBlock};
pub use lstm::{BiLstm, Lstm, LstmState};
pub use norm::BatchNorm;
pub use residual::ResidualBlock;

use rand::Rng;
use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Forward-pass mode. Train mode samples dropout masks and uses batch
/// statistics; infer mode is deterministic and uses running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// One named trainable tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        Param { name: name.into(), shape: shape.to_vec(), values }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Param::new(name, shape, vec![0.0; n])
    }

    /// Registers this parameter on the tape (cached by name within a pass).
    pub fn bind(&self, tape: &mut Tape) -> Result<Var> {
        tape.param(&self.name, &self.values, &self.shape)
    }
}

/// Access to a layer's parameters and persistent state, in a stable order.
pub trait HasParams {
    fn visit_params(&self, f: &mut dyn FnMut(&Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));
    /// Non-trainable tensors that still persist in checkpoints (batch-norm
    /// running statistics).
    fn visit_state(&self, _f: &mut dyn FnMut(&str, &[f64])) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Vec<f64>)) {}
}

/// Glorot uniform samples: U(-L, L) with L = sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// The LSTM initialization exception: U(-0.1, 0.1).
pub fn lstm_uniform(rng: &mut dyn RngCore, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-0.1..0.1)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Linear => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }

    pub fn apply_vec(self, x: &mut [f64]) {
        match self {
            Activation::Linear => {}
            Activation::Relu => x.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Tanh => x.iter_mut().for_each(|v| *v = v.tanh()),
            Activation::Sigmoid => x.iter_mut().for_each(|v| *v = crate::kernels::sigmoid(*v)),
        }
    }
}

/// Fully connected layer: `activation(x W + b)`.
pub struct Dense {
    w: Param,
    b: Param,
    pub activation: Activation,
}

impl Dense {
    pub fn new(
        prefix: &str,
        d_in: usize,
        d_out: usize,
        activation: Activation,
        rng: &mut dyn RngCore,
    ) -> Self {
        Dense {
            w: Param::new(
                format!("{prefix}.w"),
                &[d_in, d_out],
                glorot_uniform(rng, d_in, d_out, d_in * d_out),
            ),
            b: Param::zeros(format!("{prefix}.b"), &[d_out]),
            activation,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.w.bind(tape)?;
        let b = self.b.bind(tape)?;
        let y = tape.affine(x, w, Some(b))?;
        self.activation.apply(tape, y)
    }

    /// Kernel-path forward for a single row vector.
    pub fn forward_vec(&self, x: &[f64]) -> Vec<f64> {
        let d_out = self.w.shape[1];
        let mut y = crate::kernels::matvec(x, &self.w.values, d_out);
        for (v, b) in y.iter_mut().zip(&self.b.values) {
            *v += b;
        }
        self.activation.apply_vec(&mut y);
        y
    }

    pub fn output_dim(&self) -> usize {
        self.w.shape[1]
    }
}

impl HasParams for Dense {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Inverted dropout: train mode scales surviving units by `1/keep_prob` so
/// inference is the identity. Numerically equivalent to the weight-scaling
/// rule (train with a plain mask, multiply by `keep_prob` at inference).
pub struct Dropout {
    pub keep_prob: f64,
}

impl Dropout {
    pub fn new(keep_prob: f64) -> Self {
        assert!(keep_prob > 0.0 && keep_prob <= 1.0, "keep_prob must be in (0, 1]");
        Dropout { keep_prob }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        if mode == Mode::Infer || self.keep_prob >= 1.0 {
            return Ok(x);
        }
        let scale = 1.0 / self.keep_prob;
        let mask: Vec<f64> = (0..tape.value(x).len())
            .map(|_| if rng.gen_bool(self.keep_prob) { scale } else { 0.0 })
            .collect();
        tape.mul_mask(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn dense_identity_relu_passes_nonnegative_input() {
        let mut rng = stream_rng(1, Stream::Init);
        let mut d = Dense::new("t", 2, 2, Activation::Relu, &mut rng);
        d.visit_params_mut(&mut |p| {
            if p.name.ends_with(".w") {
                p.values = vec![1.0, 0.0, 0.0, 1.0];
            }
        });
        let mut t = Tape::new();
        let x = t.constant(vec![0.5, 2.0], &[1, 2]).unwrap();
        let y = d.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[0.5, 2.0]);
    }

    #[test]
    fn dense_zero_weights_give_bias() {
        let mut rng = stream_rng(2, Stream::Init);
        let mut d = Dense::new("t", 3, 1, Activation::Relu, &mut rng);
        d.visit_params_mut(&mut |p| {
            if p.name.ends_with(".w") {
                p.values.iter_mut().for_each(|v| *v = 0.0);
            } else {
                p.values = vec![1.0];
            }
        });
        let mut t = Tape::new();
        let x = t.constant(vec![0.3, -0.7, 2.0], &[1, 3]).unwrap();
        let y = d.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[1.0]);
    }

    #[test]
    fn dense_relu_clips_negative_preactivation() {
        let mut rng = stream_rng(3, Stream::Init);
        let mut d = Dense::new("t", 1, 1, Activation::Relu, &mut rng);
        d.visit_params_mut(&mut |p| {
            if p.name.ends_with(".w") {
                p.values = vec![-2.0];
            }
        });
        let mut t = Tape::new();
        let x = t.constant(vec![1.0], &[1, 1]).unwrap();
        let y = d.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y), &[0.0]);
    }

    #[test]
    fn dense_taped_and_vec_paths_agree() {
        let mut rng = stream_rng(4, Stream::Init);
        let d = Dense::new("t", 5, 3, Activation::Tanh, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| f64::from(i) * 0.3 - 0.7).collect();
        let mut t = Tape::new();
        let xv = t.constant(x.clone(), &[1, 5]).unwrap();
        let taped = d.forward(&mut t, xv).unwrap();
        assert_eq!(t.value(taped), d.forward_vec(&x).as_slice());
    }

    #[test]
    fn glorot_bound_holds() {
        let mut rng = stream_rng(5, Stream::Init);
        let vals = glorot_uniform(&mut rng, 100, 100, 10_000);
        let bound = (6.0 / 200.0f64).sqrt();
        assert!(vals.iter().all(|v| v.abs() <= bound));
        let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
        // 3 sigma of the sample mean for U(-L, L): 3 * L/sqrt(3)/sqrt(n).
        assert!(mean.abs() < 3.0 * bound / (3.0f64).sqrt() / 100.0, "mean {mean}");
    }

    #[test]
    fn dropout_keep_one_is_identity() {
        let mut rng = stream_rng(6, Stream::Dropout);
        let drop = Dropout::new(1.0);
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0], &[2]).unwrap();
        let y = drop.forward(&mut t, x, Mode::Train, &mut rng).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn dropout_infer_is_identity() {
        let mut rng = stream_rng(7, Stream::Dropout);
        let drop = Dropout::new(0.5);
        let mut t = Tape::new();
        let x = t.constant(vec![2.0], &[1]).unwrap();
        let y = drop.forward(&mut t, x, Mode::Infer, &mut rng).unwrap();
        assert_eq!(t.value(y), &[2.0]);
        // Weight-scaling view of the same rule: a classic mask at train time
        // with a keep_prob multiply at inference maps [2] to [1]; dividing
        // the train-time mask by keep_prob instead moves that factor so the
        // inference side becomes the identity.
        let classic_infer: Vec<f64> = t.value(y).iter().map(|v| v * drop.keep_prob).collect();
        assert_eq!(classic_infer, vec![1.0]);
    }

    #[test]
    fn dropout_mean_matches_identity() {
        for &keep in &[0.5, 0.8] {
            let mut rng = stream_rng(8, Stream::Dropout);
            let drop = Dropout::new(keep);
            let x = vec![1.5, -2.0, 0.7];
            let mut sums = vec![0.0; 3];
            let n = 100_000;
            for _ in 0..n {
                let mut t = Tape::new();
                let xv = t.constant(x.clone(), &[3]).unwrap();
                let y = drop.forward(&mut t, xv, Mode::Train, &mut rng).unwrap();
                for (s, v) in sums.iter_mut().zip(t.value(y)) {
                    *s += v;
                }
            }
            for (s, v) in sums.iter().zip(&x) {
                let mc = s / f64::from(n);
                assert!((mc - v).abs() / v.abs() < 0.02, "keep {keep}: {mc} vs {v}");
            }
        }
    }
}
