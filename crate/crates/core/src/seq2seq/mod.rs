//! The full model: deep convolutional encoder feeding a stack of
//! bidirectional LSTMs, and an attention decoder with input feeding.

mod decoder;
mod encoder;
mod verify;

pub use decoder::{DecState, Decoder, StepOutput};
pub use encoder::Encoder;
pub use verify::model_gradcheck;

use rand::RngCore;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureTensor;
use crate::layers::{HasParams, Mode, Param};
use crate::rng::{stream_rng, Stream};

/// Architecture hyperparameters. The default instance is the full-size
/// recognizer; [`ModelConfig::tiny`] is the desk-scale variant used for
/// gradient checking.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_freq: usize,
    pub n_channels: usize,
    pub conv_maps: usize,
    /// Time-axis stride of the conv block; the only time reduction.
    pub time_stride: usize,
    pub residual_blocks: usize,
    pub residual_maps: usize,
    pub dense_units: usize,
    /// Encoder LSTM units per direction.
    pub enc_lstm_units: usize,
    pub enc_lstm_layers: usize,
    pub dec_lstm_units: usize,
    pub attn_units: usize,
    /// Label count including the end-of-sequence symbol.
    pub vocab: usize,
    pub keep_prob: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_freq: 41,
            n_channels: 3,
            conv_maps: 128,
            time_stride: 3,
            residual_blocks: 3,
            residual_maps: 64,
            dense_units: 1024,
            enc_lstm_units: 256,
            enc_lstm_layers: 3,
            dec_lstm_units: 256,
            attn_units: 256,
            vocab: 62,
            keep_prob: 0.5,
        }
    }
}

impl ModelConfig {
    /// Desk-scale configuration for gradient checks: same topology, small
    /// widths, dropout off.
    pub fn tiny(vocab: usize) -> Self {
        ModelConfig {
            conv_maps: 8,
            residual_blocks: 1,
            residual_maps: 4,
            dense_units: 16,
            enc_lstm_units: 8,
            enc_lstm_layers: 1,
            dec_lstm_units: 8,
            attn_units: 8,
            vocab,
            keep_prob: 1.0,
            ..ModelConfig::default()
        }
    }

    pub fn eos(&self) -> usize {
        self.vocab - 1
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_freq", self.n_freq),
            ("n_channels", self.n_channels),
            ("conv_maps", self.conv_maps),
            ("time_stride", self.time_stride),
            ("residual_maps", self.residual_maps),
            ("dense_units", self.dense_units),
            ("enc_lstm_units", self.enc_lstm_units),
            ("enc_lstm_layers", self.enc_lstm_layers),
            ("dec_lstm_units", self.dec_lstm_units),
            ("attn_units", self.attn_units),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab < 2 {
            return Err(Error::Config(
                "vocab must hold at least one label plus end-of-sequence".into(),
            ));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must be in (0, 1], got {}",
                self.keep_prob
            )));
        }
        Ok(())
    }
}

/// Result of a teacher-forced pass: per-step log-probs stacked as
/// `[batch * steps, vocab]` (row `b * steps + t`), the matching flattened
/// target layout with `None` on padding, and the per-step alignments.
pub struct TeacherForced {
    pub log_probs: Var,
    pub targets: Vec<Option<usize>>,
    pub steps: usize,
    pub alignments: Vec<Var>,
}

pub struct Seq2Seq {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Seq2Seq {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        let encoder = Encoder::new(&cfg, &mut rng);
        let decoder = Decoder::new(&cfg, &mut rng);
        Ok(Seq2Seq { cfg, encoder, decoder })
    }

    /// Runs encoder and teacher-forced decoder over a padded batch.
    ///
    /// `x` is `[B, n_freq, T, n_channels]`, `lens` the true frame counts,
    /// `targets` the label sequences without end-of-sequence (appended
    /// here). Decoder input at step t is the ground-truth token t-1.
    pub fn teacher_forced(
        &mut self,
        t: &mut Tape,
        x: Var,
        lens: &[usize],
        targets: &[Vec<usize>],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<TeacherForced> {
        let batch = lens.len();
        if targets.len() != batch {
            return Err(Error::Data(format!(
                "{} target sequences for batch of {batch}",
                targets.len()
            )));
        }
        if let Some(i) = targets.iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("empty target sequence at batch index {i}")));
        }
        for seq in targets {
            for &tok in seq {
                if tok >= self.cfg.vocab {
                    return Err(Error::Data(format!(
                        "target token {tok} out of vocabulary (size {})",
                        self.cfg.vocab
                    )));
                }
            }
        }

        let (enc, enc_lens) = self.encoder.forward(t, x, lens, mode, rng)?;
        let eos = self.cfg.eos();
        let steps = targets.iter().map(Vec::len).max().unwrap() + 1;

        let mut h = t.constant(
            vec![0.0; batch * self.cfg.dec_lstm_units],
            &[batch, self.cfg.dec_lstm_units],
        )?;
        let mut c = h;
        let mut attn = t.constant(vec![0.0; batch * self.cfg.attn_units], &[batch, self.cfg.attn_units])?;
        let mut per_step = Vec::with_capacity(steps);
        let mut alignments = Vec::with_capacity(steps);
        let mut flat_targets = vec![None; batch * steps];

        for step in 0..steps {
            let mut prev = vec![None; batch];
            for b in 0..batch {
                if step > 0 && step - 1 < targets[b].len() {
                    prev[b] = Some(targets[b][step - 1]);
                }
                let len = targets[b].len();
                flat_targets[b * steps + step] = if step < len {
                    Some(targets[b][step])
                } else if step == len {
                    Some(eos)
                } else {
                    None
                };
            }
            let (logp, (h2, c2), attn2, align) =
                self.decoder.step(t, &prev, attn, h, c, enc, &enc_lens, mode, rng)?;
            h = h2;
            c = c2;
            attn = attn2;
            per_step.push(logp);
            alignments.push(align);
        }
        let log_probs = t.stack_time(&per_step)?;
        Ok(TeacherForced { log_probs, targets: flat_targets, steps, alignments })
    }

    /// Encodes a single utterance for decoding, returning the flat state
    /// sequence and its valid step count.
    pub fn encode_utterance(&mut self, feat: &FeatureTensor) -> Result<(Vec<f64>, usize)> {
        let mut t = Tape::new();
        let x = t.constant(
            feat.data.clone(),
            &[1, feat.n_freq, feat.n_frames, feat.n_channels],
        )?;
        let mut rng = stream_rng(0, Stream::Dropout);
        let (enc, enc_lens) =
            self.encoder.forward(&mut t, x, &[feat.n_frames], Mode::Infer, &mut rng)?;
        Ok((t.value(enc).to_vec(), enc_lens[0]))
    }

    /// Every trainable tensor as (name, shape) in visitation order.
    pub fn param_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.shape.clone())));
        out
    }

    /// Snapshot of all parameters as (name, values).
    pub fn param_values(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name.clone(), p.values.clone())));
        out
    }

    /// Collects parameters and persistent state into a checkpoint.
    pub fn to_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut ck = crate::checkpoint::Checkpoint::new();
        self.visit_params(&mut |p| {
            ck.insert(&p.name, &p.shape, p.values.clone()).expect("unique param names");
        });
        self.visit_state(&mut |name, vals| {
            ck.insert(name, &[vals.len()], vals.to_vec()).expect("unique state names");
        });
        ck
    }

    /// Restores parameters and persistent state from a checkpoint. Every
    /// model tensor must be present with a matching element count.
    pub fn restore_from(&mut self, ck: &crate::checkpoint::Checkpoint) -> Result<()> {
        let mut problems = Vec::new();
        self.visit_params_mut(&mut |p| match ck.get(&p.name) {
            Some((_, vals)) if vals.len() == p.values.len() => p.values = vals.to_vec(),
            Some(_) => problems.push(format!("{} has wrong size", p.name)),
            None => problems.push(format!("{} missing", p.name)),
        });
        self.visit_state_mut(&mut |name, slot| match ck.get(name) {
            Some((_, vals)) if vals.len() == slot.len() => slot.copy_from_slice(vals),
            Some(_) => problems.push(format!("{name} has wrong size")),
            None => problems.push(format!("{name} missing")),
        });
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "checkpoint does not match model: {}",
                problems.join(", ")
            )))
        }
    }

    /// Overwrites parameters from (name, values) pairs. Every model tensor
    /// must be present with a matching length.
    pub fn set_param_values(&mut self, values: &[(String, Vec<f64>)]) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_params_mut(&mut |p| {
            match values.iter().find(|(n, _)| n == &p.name) {
                Some((_, v)) if v.len() == p.values.len() => p.values = v.clone(),
                _ => missing.push(p.name.clone()),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("missing or misshaped tensors: {missing:?}")))
        }
    }
}

impl HasParams for Seq2Seq {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.encoder.visit_params(f);
        self.decoder.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.encoder.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }
    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.visit_state(f);
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.encoder.visit_state_mut(f);
    }
}
