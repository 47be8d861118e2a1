use rand::RngCore;

use super::{lstm_uniform, HasParams, Param};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::{lstm_cell, LstmCellRef};

/// Peephole LSTM layer. Gate pre-activations are packed `(i, f, c, o)` along
/// the columns of `[input, 4 * units]` and `[units, 4 * units]` matrices;
/// the peepholes are diagonal, so they live in per-unit vectors.
pub struct Lstm {
    w_x: Param,
    w_h: Param,
    b: Param,
    p_i: Param,
    p_f: Param,
    p_o: Param,
    pub input_dim: usize,
    pub units: usize,
}

/// Recurrent state carried between single-vector steps.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(units: usize) -> Self {
        LstmState { h: vec![0.0; units], c: vec![0.0; units] }
    }
}

impl Lstm {
    pub fn new(prefix: &str, input_dim: usize, units: usize, rng: &mut dyn RngCore) -> Self {
        Lstm {
            w_x: Param::new(
                format!("{prefix}.w_x"),
                &[input_dim, 4 * units],
                lstm_uniform(rng, input_dim * 4 * units),
            ),
            w_h: Param::new(
                format!("{prefix}.w_h"),
                &[units, 4 * units],
                lstm_uniform(rng, units * 4 * units),
            ),
            b: Param::zeros(format!("{prefix}.b"), &[4 * units]),
            p_i: Param::new(format!("{prefix}.p_i"), &[units], lstm_uniform(rng, units)),
            p_f: Param::new(format!("{prefix}.p_f"), &[units], lstm_uniform(rng, units)),
            p_o: Param::new(format!("{prefix}.p_o"), &[units], lstm_uniform(rng, units)),
            input_dim,
            units,
        }
    }

    /// One taped step over a batch: `x [B, D]`, `h`/`c` `[B, U]`.
    pub fn step(&self, t: &mut Tape, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let u = self.units;
        let w_x = self.w_x.bind(t)?;
        let w_h = self.w_h.bind(t)?;
        let b = self.b.bind(t)?;
        let p_i = self.p_i.bind(t)?;
        let p_f = self.p_f.bind(t)?;
        let p_o = self.p_o.bind(t)?;

        // Bias rides on the recurrent branch so the addition order matches
        // the fused kernel step bit for bit.
        let from_x = t.matmul(x, w_x)?;
        let from_h = t.affine(h, w_h, Some(b))?;
        let pre = t.add(from_x, from_h)?;
        let z_i = t.slice_cols(pre, 0, u)?;
        let z_f = t.slice_cols(pre, u, u)?;
        let z_c = t.slice_cols(pre, 2 * u, u)?;
        let z_o = t.slice_cols(pre, 3 * u, u)?;

        let peek_i = t.bcast_mul(p_i, c)?;
        let peek_f = t.bcast_mul(p_f, c)?;
        let i_pre = t.add(z_i, peek_i)?;
        let f_pre = t.add(z_f, peek_f)?;
        let i = t.sigmoid(i_pre)?;
        let f = t.sigmoid(f_pre)?;
        let g = t.tanh(z_c)?;

        let keep = t.mul(f, c)?;
        let write = t.mul(i, g)?;
        let c_new = t.add(keep, write)?;

        let peek_o = t.bcast_mul(p_o, c_new)?;
        let o_pre = t.add(z_o, peek_o)?;
        let o = t.sigmoid(o_pre)?;
        let c_act = t.tanh(c_new)?;
        let h_new = t.mul(o, c_act)?;
        Ok((h_new, c_new))
    }

    /// Unrolls the layer over a `[batch * steps, D]` sequence block with zero
    /// initial state, returning `[batch * steps, U]`.
    pub fn forward_seq(&self, t: &mut Tape, x: Var, batch: usize, steps: usize) -> Result<Var> {
        let zero = t.constant(vec![0.0; batch * self.units], &[batch, self.units])?;
        let (mut h, mut c) = (zero, zero);
        let mut outputs = Vec::with_capacity(steps);
        for step in 0..steps {
            let xt = t.select_time(x, batch, steps, step)?;
            let (h_new, c_new) = self.step(t, xt, h, c)?;
            h = h_new;
            c = c_new;
            outputs.push(h);
        }
        t.stack_time(&outputs)
    }

    fn cell_ref(&self) -> LstmCellRef<'_> {
        LstmCellRef {
            w_x: &self.w_x.values,
            w_h: &self.w_h.values,
            bias: &self.b.values,
            p_i: &self.p_i.values,
            p_f: &self.p_f.values,
            p_o: &self.p_o.values,
            units: self.units,
        }
    }

    /// Kernel-path step for one vector, used during decoding.
    pub fn step_vec(&self, x: &[f64], state: &LstmState) -> LstmState {
        let (h, c) = lstm_cell(&self.cell_ref(), x, &state.h, &state.c);
        LstmState { h, c }
    }
}

impl HasParams for Lstm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.w_x);
        f(&self.w_h);
        f(&self.b);
        f(&self.p_i);
        f(&self.p_f);
        f(&self.p_o);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w_x);
        f(&mut self.w_h);
        f(&mut self.b);
        f(&mut self.p_i);
        f(&mut self.p_f);
        f(&mut self.p_o);
    }
}

/// Bidirectional wrapper: a forward LSTM over the sequence and an independent
/// LSTM over the time-reversed sequence, re-reversed and concatenated, giving
/// `2 * units` output columns.
pub struct BiLstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
}

impl BiLstm {
    pub fn new(prefix: &str, input_dim: usize, units: usize, rng: &mut dyn RngCore) -> Self {
        BiLstm {
            fwd: Lstm::new(&format!("{prefix}.fwd"), input_dim, units, rng),
            bwd: Lstm::new(&format!("{prefix}.bwd"), input_dim, units, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.units
    }

    /// `x` is `[batch * steps, D]`; `lens` gives the valid step count per
    /// sequence so the backward pass starts from each sequence's last real
    /// frame rather than from padding.
    pub fn forward_seq(
        &self,
        t: &mut Tape,
        x: Var,
        batch: usize,
        steps: usize,
        lens: &[usize],
    ) -> Result<Var> {
        let f = self.fwd.forward_seq(t, x, batch, steps)?;
        let x_rev = t.reverse_time(x, batch, steps, lens)?;
        let b_scan = self.bwd.forward_seq(t, x_rev, batch, steps)?;
        let b = t.reverse_time(b_scan, batch, steps, lens)?;
        t.concat_cols(&[f, b])
    }
}

impl HasParams for BiLstm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.fwd.visit_params(f);
        self.bwd.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.fwd.visit_params_mut(f);
        self.bwd.visit_params_mut(f);
    }
}
