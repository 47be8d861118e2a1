use rand::RngCore;

use super::ModelConfig;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::layers::{glorot_uniform, Dropout, HasParams, Lstm, LstmState, Mode, Param};

/// Attention decoder: a unidirectional LSTM whose input feeds back the
/// previous attentional vector alongside the previous token's one-hot,
/// Luong's general-score attention over the encoder states, and a softmax
/// output layer.
///
/// Scores are s(h, h_s) = (h W_a) . h_s, the attentional state is
/// tanh(W_c [c ; h]), and logits are W_s htilde.
pub struct Decoder {
    pub lstm: Lstm,
    w_a: Param,
    w_c: Param,
    w_s: Param,
    dropout: Dropout,
    pub vocab: usize,
    pub attn_units: usize,
    pub enc_width: usize,
}

/// Recurrent decode state: LSTM state plus the fed-back attentional vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DecState {
    pub lstm: LstmState,
    pub attentional: Vec<f64>,
}

/// Kernel-path result of one decode step.
pub struct StepOutput {
    pub log_probs: Vec<f64>,
    pub state: DecState,
    pub alignment: Vec<f64>,
    /// Alignment-weighted mix of the encoder states.
    pub context: Vec<f64>,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let enc_width = 2 * cfg.enc_lstm_units;
        let (u, a, v) = (cfg.dec_lstm_units, cfg.attn_units, cfg.vocab);
        Decoder {
            lstm: Lstm::new("dec.lstm", v + a, u, rng),
            w_a: Param::new(
                "dec.w_a",
                &[u, enc_width],
                glorot_uniform(rng, u, enc_width, u * enc_width),
            ),
            w_c: Param::new(
                "dec.w_c",
                &[enc_width + u, a],
                glorot_uniform(rng, enc_width + u, a, (enc_width + u) * a),
            ),
            w_s: Param::new("dec.w_s", &[a, v], glorot_uniform(rng, a, v, a * v)),
            dropout: Dropout::new(cfg.keep_prob),
            vocab: v,
            attn_units: a,
            enc_width,
        }
    }

    pub fn start_state(&self) -> DecState {
        DecState {
            lstm: LstmState::zeros(self.lstm.units),
            attentional: vec![0.0; self.attn_units],
        }
    }

    /// Builds the one-hot block for a batch of previous tokens. `None` is the
    /// start-of-sequence marker, encoded as the zero vector.
    pub fn one_hot_rows(&self, prev: &[Option<usize>]) -> Result<Vec<f64>> {
        let mut rows = vec![0.0; prev.len() * self.vocab];
        for (r, tok) in prev.iter().enumerate() {
            if let Some(tok) = *tok {
                if tok >= self.vocab {
                    return Err(Error::Data(format!(
                        "token {tok} out of vocabulary (size {})",
                        self.vocab
                    )));
                }
                rows[r * self.vocab + tok] = 1.0;
            }
        }
        Ok(rows)
    }

    /// One taped decode step over a batch.
    ///
    /// `enc` is `[B * S', enc_width]` with `enc_lens` valid positions per
    /// row batch; `prev_attn` is the fed-back attentional vector `[B, A]`.
    /// Returns per-row log-probs, the new LSTM state, the new attentional
    /// vector, and the alignment.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        t: &mut Tape,
        prev: &[Option<usize>],
        prev_attn: Var,
        h: Var,
        c: Var,
        enc: Var,
        enc_lens: &[usize],
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<(Var, (Var, Var), Var, Var)> {
        let batch = prev.len();
        let onehot = t.constant(self.one_hot_rows(prev)?, &[batch, self.vocab])?;
        let x = t.concat_cols(&[onehot, prev_attn])?;
        let (h_new, c_new) = self.lstm.step(t, x, h, c)?;
        let h_drop = self.dropout.forward(t, h_new, mode, rng)?;

        let w_a = self.w_a.bind(t)?;
        let steps = t.shape(enc)[0] / batch;
        let q = t.matmul(h_drop, w_a)?;
        let scores = t.attn_scores(q, enc, steps)?;
        let align = t.masked_softmax(scores, enc_lens)?;
        let ctx = t.attn_context(align, enc)?;

        let w_c = self.w_c.bind(t)?;
        let cat = t.concat_cols(&[ctx, h_drop])?;
        let pre = t.matmul(cat, w_c)?;
        let attentional = t.tanh(pre)?;
        let attn_drop = self.dropout.forward(t, attentional, mode, rng)?;

        let w_s = self.w_s.bind(t)?;
        let logits = t.matmul(attn_drop, w_s)?;
        let log_probs = t.log_softmax(logits)?;
        Ok((log_probs, (h_new, c_new), attn_drop, align))
    }

    /// Kernel-path step for one utterance during search. `enc` is the
    /// encoder state sequence `[s_valid * enc_width]` for this utterance.
    pub fn step_vec(
        &self,
        prev: Option<usize>,
        state: &DecState,
        enc: &[f64],
        s_valid: usize,
    ) -> Result<StepOutput> {
        if let Some(tok) = prev {
            if tok >= self.vocab {
                return Err(Error::Data(format!(
                    "token {tok} out of vocabulary (size {})",
                    self.vocab
                )));
            }
        }
        if s_valid == 0 || enc.len() < s_valid * self.enc_width {
            return Err(Error::Data(format!(
                "encoder sequence too short: {} values for {s_valid} steps",
                enc.len()
            )));
        }
        let mut x = vec![0.0; self.vocab + self.attn_units];
        if let Some(tok) = prev {
            x[tok] = 1.0;
        }
        x[self.vocab..].copy_from_slice(&state.attentional);
        let lstm = self.lstm.step_vec(&x, &state.lstm);

        let q = kernels::matvec(&lstm.h, &self.w_a.values, self.enc_width);
        let mut align = vec![0.0; s_valid];
        for (s, a) in align.iter_mut().enumerate() {
            let row = &enc[s * self.enc_width..(s + 1) * self.enc_width];
            *a = q.iter().zip(row).map(|(x, y)| x * y).sum();
        }
        kernels::softmax_row(&mut align);
        let mut ctx = vec![0.0; self.enc_width];
        for (s, &a) in align.iter().enumerate() {
            let row = &enc[s * self.enc_width..(s + 1) * self.enc_width];
            for (c, &e) in ctx.iter_mut().zip(row) {
                *c += a * e;
            }
        }

        let mut cat = ctx.clone();
        cat.extend_from_slice(&lstm.h);
        let mut attentional = kernels::matvec(&cat, &self.w_c.values, self.attn_units);
        attentional.iter_mut().for_each(|v| *v = v.tanh());

        let mut log_probs = kernels::matvec(&attentional, &self.w_s.values, self.vocab);
        kernels::log_softmax_row(&mut log_probs);
        Ok(StepOutput {
            log_probs,
            state: DecState { lstm, attentional },
            alignment: align,
            context: ctx,
        })
    }
}

impl HasParams for Decoder {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.lstm.visit_params(f);
        f(&self.w_a);
        f(&self.w_c);
        f(&self.w_s);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.lstm.visit_params_mut(f);
        f(&mut self.w_a);
        f(&mut self.w_c);
        f(&mut self.w_s);
    }
}
