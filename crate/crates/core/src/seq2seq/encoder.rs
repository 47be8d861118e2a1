use rand::RngCore;

use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{
    Activation, BatchNorm, BiLstm, ConvBlock, Dense, Dropout, HasParams, Mode, Param,
    ResidualBlock,
};

/// Deep convolutional encoder: conv block, residual blocks, per-timestep
/// flatten, dense block, then a stack of bidirectional LSTMs. The conv
/// block's 1x3 stride is the only time reduction, so S' = ceil(T / 3).
pub struct Encoder {
    conv: ConvBlock,
    residual: Vec<ResidualBlock>,
    dense: Dense,
    dense_bn: BatchNorm,
    lstms: Vec<BiLstm>,
    dropout: Dropout,
    n_freq: usize,
    n_channels: usize,
    time_stride: usize,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let keep = cfg.keep_prob;
        let conv = ConvBlock::new(
            "enc.conv",
            cfg.n_channels,
            cfg.conv_maps,
            (3, 3),
            (1, cfg.time_stride),
            keep,
            rng,
        );
        let mut residual = Vec::new();
        let mut ch = cfg.conv_maps;
        for i in 0..cfg.residual_blocks {
            residual.push(ResidualBlock::new(
                &format!("enc.res{i}"),
                ch,
                cfg.residual_maps,
                keep,
                rng,
            ));
            ch = cfg.residual_maps;
        }
        let flat = cfg.n_freq * cfg.residual_maps;
        let dense = Dense::new("enc.dense", flat, cfg.dense_units, Activation::Linear, rng);
        let dense_bn = BatchNorm::new("enc.dense_bn", cfg.dense_units);
        let mut lstms = Vec::new();
        let mut width = cfg.dense_units;
        for i in 0..cfg.enc_lstm_layers {
            lstms.push(BiLstm::new(&format!("enc.lstm{i}"), width, cfg.enc_lstm_units, rng));
            width = 2 * cfg.enc_lstm_units;
        }
        Encoder {
            conv,
            residual,
            dense,
            dense_bn,
            lstms,
            dropout: Dropout::new(keep),
            n_freq: cfg.n_freq,
            n_channels: cfg.n_channels,
            time_stride: cfg.time_stride,
        }
    }

    /// Output width of the encoder state sequence.
    pub fn output_width(&self) -> usize {
        self.lstms.last().map_or(0, BiLstm::output_dim)
    }

    /// Downsampled length for a given input frame count.
    pub fn out_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.time_stride)
    }

    /// Runs the encoder over a padded `[B, n_freq, T, n_channels]` batch.
    /// `lens` holds each utterance's true frame count. Returns the state
    /// sequence `[B * S', width]` and the per-utterance valid length in
    /// downsampled steps.
    pub fn forward(
        &mut self,
        t: &mut Tape,
        x: Var,
        lens: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, Vec<usize>)> {
        let shape = t.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.n_freq || shape[3] != self.n_channels {
            return Err(Error::Data(format!(
                "encoder expects [batch, {}, T, {}] features, got {shape:?}",
                self.n_freq, self.n_channels
            )));
        }
        let (batch, frames) = (shape[0], shape[2]);
        if batch != lens.len() {
            return Err(Error::Data(format!(
                "batch size {batch} does not match {} lengths",
                lens.len()
            )));
        }
        if frames == 0 || lens.iter().any(|&l| l == 0 || l > frames) {
            return Err(Error::Data(format!(
                "utterance lengths must be in 1..={frames}, got {lens:?}"
            )));
        }

        let mut y = self.conv.forward(t, x, mode, rng)?;
        for block in &mut self.residual {
            y = block.forward(t, y, mode, rng)?;
        }
        let y = t.flatten_conv(y)?;
        let y = self.dense.forward(t, y)?;
        let y = self.dense_bn.forward(t, y, mode)?;
        let y = t.relu(y)?;
        let mut y = self.dropout.forward(t, y, mode, rng)?;

        let steps = self.out_len(frames);
        let enc_lens: Vec<usize> = lens.iter().map(|&l| self.out_len(l)).collect();
        for lstm in &self.lstms {
            y = lstm.forward_seq(t, y, batch, steps, &enc_lens)?;
            y = self.dropout.forward(t, y, mode, rng)?;
        }
        Ok((y, enc_lens))
    }
}

impl HasParams for Encoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        for r in &self.residual {
            r.visit_params(f);
        }
        self.dense.visit_params(f);
        self.dense_bn.visit_params(f);
        for l in &self.lstms {
            l.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        for r in &mut self.residual {
            r.visit_params_mut(f);
        }
        self.dense.visit_params_mut(f);
        self.dense_bn.visit_params_mut(f);
        for l in &mut self.lstms {
            l.visit_params_mut(f);
        }
    }
    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv.visit_state(f);
        for r in &self.residual {
            r.visit_state(f);
        }
        self.dense_bn.visit_state(f);
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.conv.visit_state_mut(f);
        for r in &mut self.residual {
            r.visit_state_mut(f);
        }
        self.dense_bn.visit_state_mut(f);
    }
}
