use rand::RngCore;

use super::{glorot_uniform, BatchNorm, Dropout, HasParams, Mode, Param};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::Padding;

/// 2-D convolution over `[batch, freq, time, channels]` tensors.
pub struct Conv2d {
    w: Param,
    b: Param,
    pub stride: (usize, usize),
    pub padding: Padding,
}

impl Conv2d {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
        rng: &mut dyn RngCore,
    ) -> Self {
        let (k_f, k_t) = kernel;
        let fan_in = k_f * k_t * in_channels;
        let fan_out = k_f * k_t * out_channels;
        let n = out_channels * fan_in;
        Conv2d {
            w: Param::new(
                format!("{prefix}.w"),
                &[out_channels, k_f, k_t, in_channels],
                glorot_uniform(rng, fan_in, fan_out, n),
            ),
            b: Param::zeros(format!("{prefix}.b"), &[out_channels]),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.w.bind(tape)?;
        let b = self.b.bind(tape)?;
        tape.conv2d(x, w, b, self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.w.shape[0]
    }
}

impl HasParams for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w);
        f(&self.b);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Front convolutional block: conv, batch norm, relu, dropout.
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub dropout: Dropout,
}

impl ConvBlock {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        keep_prob: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        ConvBlock {
            conv: Conv2d::new(
                &format!("{prefix}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                Padding::Same,
                rng,
            ),
            bn: BatchNorm::new(&format!("{prefix}.bn"), out_channels),
            dropout: Dropout::new(keep_prob),
        }
    }

    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        self.dropout.forward(tape, y, mode, rng)
    }
}

impl HasParams for ConvBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
    }
    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.bn.visit_state(f);
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.bn.visit_state_mut(f);
    }
}
