//! Tape operations: forward constructors and their reverse-mode rules.
//!
//! Rank-2 tensors are `[rows, cols]` row-major. Sequence batches are packed
//! as `[batch * steps, cols]` with row `b * steps + t`. Convolution tensors
//! are rank-4 `[batch, freq, time, channel]`.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, Padding};

use super::{Tape, Var};

/// One recorded operation. Variants carry whatever forward state backward
/// needs (saved activations, masks, geometry).
pub enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddBias { x: Var, b: Var, cols: usize },
    Relu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Conv2d { x: Var, w: Var, b: Var, dims: ConvDims },
    BnTrain { x: Var, gamma: Var, beta: Var, ch: usize, x_hat: Vec<f64>, inv_std: Vec<f64> },
    BnInfer { x: Var, gamma: Var, beta: Var, ch: usize, x_hat: Vec<f64>, inv_std: Vec<f64> },
    MulMask { x: Var, mask: Vec<f64> },
    Softmax { x: Var, cols: usize },
    LogSoftmax { x: Var, cols: usize },
    MaskedSoftmax { x: Var, cols: usize, lens: Vec<usize> },
    PickNll { logp: Var, cols: usize, targets: Vec<Option<usize>> },
    ConcatCols { parts: Vec<(Var, usize)>, cols: usize },
    SliceCols { x: Var, cols: usize, start: usize, width: usize },
    SelectTime { x: Var, batch: usize, steps: usize, cols: usize, t: usize },
    StackTime { parts: Vec<Var>, batch: usize, cols: usize },
    ReverseTime { x: Var, batch: usize, steps: usize, cols: usize, lens: Vec<usize> },
    FlattenConv { x: Var, batch: usize, in_f: usize, in_t: usize, in_c: usize },
    Reshape { x: Var },
    BcastMul { vec: Var, x: Var, cols: usize },
    AttnScores { q: Var, enc: Var, batch: usize, steps: usize, width: usize },
    AttnContext { attn: Var, enc: Var, batch: usize, steps: usize, width: usize },
    DotConst { x: Var, c: Vec<f64> },
    SumAll { x: Var },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Matmul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Conv2d { .. } => "conv2d",
            Op::BnTrain { .. } => "batchnorm_train",
            Op::BnInfer { .. } => "batchnorm_infer",
            Op::MulMask { .. } => "mul_mask",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::MaskedSoftmax { .. } => "masked_softmax",
            Op::PickNll { .. } => "pick_nll",
            Op::ConcatCols { .. } => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::SelectTime { .. } => "select_time",
            Op::StackTime { .. } => "stack_time",
            Op::ReverseTime { .. } => "reverse_time",
            Op::FlattenConv { .. } => "flatten_conv",
            Op::Reshape { .. } => "reshape",
            Op::BcastMul { .. } => "bcast_mul",
            Op::AttnScores { .. } => "attn_scores",
            Op::AttnContext { .. } => "attn_context",
            Op::DotConst { .. } => "dot_const",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Tape {
    fn rank2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(mismatch(op, s, &[0, 0])),
        }
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Add { a, b }, out, shape, needs, "add")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Mul { a, b }, out, shape, needs, "mul")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::Scale { x, c }, out, shape, needs, "scale")
    }

    /// `a` is `[m, k]`, `b` is `[k, n]`; result `[m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2(a, "matmul")?;
        let (k2, n) = self.rank2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        self.push(Op::Matmul { a, b, m, k, n }, out, vec![m, n], needs, "matmul")
    }

    /// Adds a `[cols]` bias vector to every row of `[rows, cols]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "add_bias")?;
        if self.shape(b) != [cols] {
            return Err(mismatch("add_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.value(b);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).chunks_exact(cols) {
            out.extend(row.iter().zip(bv).map(|(v, bb)| v + bb));
        }
        let needs = self.needs_grad(x) || self.needs_grad(b);
        self.push(Op::AddBias { x, b, cols }, out, vec![rows, cols], needs, "add_bias")
    }

    /// `x @ w`, optionally plus a broadcast bias.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::Relu { x }, out, shape, needs, "relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::Tanh { x }, out, shape, needs, "tanh")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.value(x).iter().map(|v| kernels::sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::Sigmoid { x }, out, shape, needs, "sigmoid")
    }

    /// 2-D convolution. `x` is `[b, f, t, c]`, `w` is `[k, kf, kt, c]`,
    /// `bias` is `[k]`; result `[b, of, ot, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Var,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let [batch, in_f, in_t, in_c] = xs[..] else {
            return Err(mismatch("conv2d", &xs, &ws));
        };
        let [k_count, k_f, k_t, w_c] = ws[..] else {
            return Err(mismatch("conv2d", &xs, &ws));
        };
        if w_c != in_c || self.shape(bias) != [k_count] {
            return Err(mismatch("conv2d", &xs, &ws));
        }
        if padding == Padding::Valid && (k_f > in_f || k_t > in_t) {
            return Err(Error::KernelTooLarge {
                kernel: vec![k_f, k_t],
                input: vec![in_f, in_t],
            });
        }
        let dims = ConvDims {
            batch,
            in_f,
            in_t,
            in_c,
            k_count,
            k_f,
            k_t,
            stride_f: stride.0,
            stride_t: stride.1,
            padding,
        };
        let out = kernels::conv2d_fwd(self.value(x), self.value(w), self.value(bias), &dims);
        let shape = vec![batch, dims.out_f(), dims.out_t(), k_count];
        let needs = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(bias);
        self.push(Op::Conv2d { x, w, b: bias, dims }, out, shape, needs, "conv2d")
    }

    /// Batch normalization with batch statistics. Normalizes per trailing-dim
    /// channel over all leading positions, so rank-4 conv activations pool
    /// over batch and both spatial axes. Returns the batch mean and
    /// population variance so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let shape = self.shape(x).to_vec();
        let ch = *shape.last().ok_or_else(|| mismatch("batchnorm_train", &shape, &[]))?;
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(mismatch("batchnorm_train", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let rows = xv.len() / ch;
        if rows == 0 {
            return Err(mismatch("batchnorm_train", &shape, &[ch]));
        }
        let mut mean = vec![0.0; ch];
        for row in xv.chunks_exact(ch) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= rows as f64;
        }
        let mut var = vec![0.0; ch];
        for row in xv.chunks_exact(ch) {
            for (c, (s, v)) in var.iter_mut().zip(row).enumerate() {
                let d = v - mean[c];
                *s += d * d;
            }
        }
        for s in var.iter_mut() {
            *s /= rows as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut x_hat = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(ch) {
            for (c, v) in row.iter().enumerate() {
                x_hat.push((v - mean[c]) * inv_std[c]);
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = Vec::with_capacity(x_hat.len());
        for row in x_hat.chunks_exact(ch) {
            for (c, v) in row.iter().enumerate() {
                out.push(gv[c] * v + bv[c]);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let v = self.push(
            Op::BnTrain { x, gamma, beta, ch, x_hat, inv_std },
            out,
            shape,
            needs,
            "batchnorm_train",
        )?;
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batchnorm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ch = *shape.last().ok_or_else(|| mismatch("batchnorm_infer", &shape, &[]))?;
        if self.shape(gamma) != [ch] || mean.len() != ch || var.len() != ch {
            return Err(mismatch("batchnorm_infer", &shape, &[mean.len()]));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xv = self.value(x);
        let mut x_hat = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(ch) {
            for (c, v) in row.iter().enumerate() {
                x_hat.push((v - mean[c]) * inv_std[c]);
            }
        }
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut out = Vec::with_capacity(x_hat.len());
        for row in x_hat.chunks_exact(ch) {
            for (c, v) in row.iter().enumerate() {
                out.push(gv[c] * v + bv[c]);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push(
            Op::BnInfer { x, gamma, beta, ch, x_hat, inv_std },
            out,
            shape,
            needs,
            "batchnorm_infer",
        )
    }

    /// Elementwise product with a constant mask (dropout and similar).
    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(mismatch("mul_mask", self.shape(x), &[mask.len()]));
        }
        let out: Vec<f64> = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::MulMask { x, mask }, out, shape, needs, "mul_mask")
    }

    /// Row-wise softmax over the last dimension of `[rows, cols]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "softmax")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            kernels::softmax_row(row);
        }
        let needs = self.needs_grad(x);
        self.push(Op::Softmax { x, cols }, out, vec![rows, cols], needs, "softmax")
    }

    /// Row-wise log-softmax over the last dimension of `[rows, cols]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "log_softmax")?;
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            kernels::log_softmax_row(row);
        }
        let needs = self.needs_grad(x);
        self.push(Op::LogSoftmax { x, cols }, out, vec![rows, cols], needs, "log_softmax")
    }

    /// Softmax over the first `lens[r]` entries of each row; the rest of the
    /// row gets exactly zero weight. Used to keep attention off padding.
    pub fn masked_softmax(&mut self, x: Var, lens: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "masked_softmax")?;
        if lens.len() != rows || lens.iter().any(|&l| l == 0 || l > cols) {
            return Err(mismatch("masked_softmax", self.shape(x), &[lens.len()]));
        }
        let mut out = vec![0.0; rows * cols];
        for (r, row) in self.value(x).chunks_exact(cols).enumerate() {
            let l = lens[r];
            let dst = &mut out[r * cols..r * cols + l];
            dst.copy_from_slice(&row[..l]);
            kernels::softmax_row(dst);
        }
        let needs = self.needs_grad(x);
        self.push(
            Op::MaskedSoftmax { x, cols, lens: lens.to_vec() },
            out,
            vec![rows, cols],
            needs,
            "masked_softmax",
        )
    }

    /// Sum of negative log-likelihoods: picks `logp[r, targets[r]]` for every
    /// row with a target and returns the scalar `-sum`. Rows with `None` are
    /// padding and contribute nothing. Divide by the valid count for a mean.
    pub fn pick_nll(&mut self, logp: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.rank2(logp, "pick_nll")?;
        if targets.len() != rows {
            return Err(mismatch("pick_nll", self.shape(logp), &[targets.len()]));
        }
        if targets.iter().flatten().any(|&t| t >= cols) {
            return Err(Error::Data(format!(
                "pick_nll target out of range for {cols} classes"
            )));
        }
        let lv = self.value(logp);
        let mut sum = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                sum -= lv[r * cols + t];
            }
        }
        let needs = self.needs_grad(logp);
        self.push(
            Op::PickNll { logp, cols, targets: targets.to_vec() },
            vec![sum],
            vec![1],
            needs,
            "pick_nll",
        )
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| mismatch("concat_cols", &[], &[]))?;
        let (rows, _) = self.rank2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push((p, c));
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            Op::ConcatCols { parts: widths, cols },
            out,
            vec![rows, cols],
            needs,
            "concat_cols",
        )
    }

    /// Column slice `[start, start + width)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "slice_cols")?;
        if start + width > cols {
            return Err(mismatch("slice_cols", self.shape(x), &[start, width]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + width]);
        }
        let needs = self.needs_grad(x);
        self.push(
            Op::SliceCols { x, cols, start, width },
            out,
            vec![rows, width],
            needs,
            "slice_cols",
        )
    }

    /// Picks time step `t` from a `[batch * steps, cols]` sequence batch,
    /// giving `[batch, cols]`.
    pub fn select_time(&mut self, x: Var, batch: usize, steps: usize, t: usize) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "select_time")?;
        if rows != batch * steps || t >= steps {
            return Err(mismatch("select_time", self.shape(x), &[batch, steps]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(batch * cols);
        for b in 0..batch {
            let r = b * steps + t;
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let needs = self.needs_grad(x);
        self.push(
            Op::SelectTime { x, batch, steps, cols, t },
            out,
            vec![batch, cols],
            needs,
            "select_time",
        )
    }

    /// Inverse of [`Tape::select_time`]: stacks per-step `[batch, cols]`
    /// tensors into `[batch * steps, cols]`.
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| mismatch("stack_time", &[], &[]))?;
        let (batch, cols) = self.rank2(first, "stack_time")?;
        for &p in parts {
            if self.shape(p) != [batch, cols] {
                return Err(mismatch("stack_time", self.shape(first), self.shape(p)));
            }
        }
        let steps = parts.len();
        let mut out = vec![0.0; batch * steps * cols];
        for (t, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for b in 0..batch {
                let dst = (b * steps + t) * cols;
                out[dst..dst + cols].copy_from_slice(&pv[b * cols..(b + 1) * cols]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs_grad(p));
        self.push(
            Op::StackTime { parts: parts.to_vec(), batch, cols },
            out,
            vec![batch * steps, cols],
            needs,
            "stack_time",
        )
    }

    /// Reverses each utterance's valid prefix in time; padding rows stay put.
    /// Applying it twice with the same lengths is the identity.
    pub fn reverse_time(&mut self, x: Var, batch: usize, steps: usize, lens: &[usize]) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "reverse_time")?;
        if rows != batch * steps || lens.len() != batch || lens.iter().any(|&l| l > steps) {
            return Err(mismatch("reverse_time", self.shape(x), &[batch, steps]));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for b in 0..batch {
            let l = lens[b];
            for t in 0..steps {
                let src = if t < l { b * steps + (l - 1 - t) } else { b * steps + t };
                let dst = (b * steps + t) * cols;
                out[dst..dst + cols].copy_from_slice(&xv[src * cols..(src + 1) * cols]);
            }
        }
        let needs = self.needs_grad(x);
        self.push(
            Op::ReverseTime { x, batch, steps, cols, lens: lens.to_vec() },
            out,
            vec![rows, cols],
            needs,
            "reverse_time",
        )
    }

    /// Reorders conv activations `[b, f, t, c]` into a sequence batch
    /// `[b * t, f * c]` whose column index is `f * c_dim + c`.
    pub fn flatten_conv(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [batch, in_f, in_t, in_c] = shape[..] else {
            return Err(mismatch("flatten_conv", &shape, &[0, 0, 0, 0]));
        };
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let cols = in_f * in_c;
        for b in 0..batch {
            for f in 0..in_f {
                for t in 0..in_t {
                    let src = ((b * in_f + f) * in_t + t) * in_c;
                    let dst = (b * in_t + t) * cols + f * in_c;
                    out[dst..dst + in_c].copy_from_slice(&xv[src..src + in_c]);
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push(
            Op::FlattenConv { x, batch, in_f, in_t, in_c },
            out,
            vec![batch * in_t, cols],
            needs,
            "flatten_conv",
        )
    }

    /// Same data, new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let len = self.value(x).len();
        if shape.iter().product::<usize>() != len {
            return Err(Error::BadShape { shape: shape.to_vec(), len });
        }
        let out = self.value(x).to_vec();
        let needs = self.needs_grad(x);
        self.push(Op::Reshape { x }, out, shape.to_vec(), needs, "reshape")
    }

    /// Broadcasts a `[cols]` vector across rows of `[rows, cols]` and
    /// multiplies elementwise (diagonal peephole connections).
    pub fn bcast_mul(&mut self, vec: Var, x: Var) -> Result<Var> {
        let (rows, cols) = self.rank2(x, "bcast_mul")?;
        if self.shape(vec) != [cols] {
            return Err(mismatch("bcast_mul", self.shape(vec), self.shape(x)));
        }
        let vv = self.value(vec);
        let mut out = Vec::with_capacity(rows * cols);
        for row in self.value(x).chunks_exact(cols) {
            out.extend(row.iter().zip(vv).map(|(a, b)| a * b));
        }
        let needs = self.needs_grad(vec) || self.needs_grad(x);
        self.push(Op::BcastMul { vec, x, cols }, out, vec![rows, cols], needs, "bcast_mul")
    }

    /// Bilinear attention scores. `q` is `[batch, width]` (the projected
    /// decoder state), `enc` is `[batch * steps, width]`; result `[batch,
    /// steps]` with entry `(b, s) = q_b . enc_{b,s}`.
    pub fn attn_scores(&mut self, q: Var, enc: Var, steps: usize) -> Result<Var> {
        let (batch, width) = self.rank2(q, "attn_scores")?;
        let (er, ec) = self.rank2(enc, "attn_scores")?;
        if er != batch * steps || ec != width {
            return Err(mismatch("attn_scores", self.shape(q), self.shape(enc)));
        }
        let (qv, ev) = (self.value(q), self.value(enc));
        let mut out = vec![0.0; batch * steps];
        for b in 0..batch {
            let qb = &qv[b * width..(b + 1) * width];
            for s in 0..steps {
                let eb = &ev[(b * steps + s) * width..(b * steps + s + 1) * width];
                out[b * steps + s] = qb.iter().zip(eb).map(|(a, c)| a * c).sum();
            }
        }
        let needs = self.needs_grad(q) || self.needs_grad(enc);
        self.push(
            Op::AttnScores { q, enc, batch, steps, width },
            out,
            vec![batch, steps],
            needs,
            "attn_scores",
        )
    }

    /// Attention-weighted average of encoder states. `attn` is `[batch,
    /// steps]`, `enc` is `[batch * steps, width]`; result `[batch, width]`.
    pub fn attn_context(&mut self, attn: Var, enc: Var) -> Result<Var> {
        let (batch, steps) = self.rank2(attn, "attn_context")?;
        let (er, width) = self.rank2(enc, "attn_context")?;
        if er != batch * steps {
            return Err(mismatch("attn_context", self.shape(attn), self.shape(enc)));
        }
        let (av, ev) = (self.value(attn), self.value(enc));
        let mut out = vec![0.0; batch * width];
        for b in 0..batch {
            let ob = &mut out[b * width..(b + 1) * width];
            for s in 0..steps {
                let a = av[b * steps + s];
                let eb = &ev[(b * steps + s) * width..(b * steps + s + 1) * width];
                for (o, e) in ob.iter_mut().zip(eb) {
                    *o += a * e;
                }
            }
        }
        let needs = self.needs_grad(attn) || self.needs_grad(enc);
        self.push(
            Op::AttnContext { attn, enc, batch, steps, width },
            out,
            vec![batch, width],
            needs,
            "attn_context",
        )
    }

    /// Dot product with a constant vector; scalar output. Handy for reducing
    /// an arbitrary tensor to a checkable loss in tests.
    pub fn dot_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(mismatch("dot_const", self.shape(x), &[c.len()]));
        }
        let sum: f64 = self.value(x).iter().zip(&c).map(|(a, b)| a * b).sum();
        let needs = self.needs_grad(x);
        self.push(Op::DotConst { x, c }, vec![sum], vec![1], needs, "dot_const")
    }

    /// Sum of every element; scalar output.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let sum: f64 = self.value(x).iter().sum();
        let needs = self.needs_grad(x);
        self.push(Op::SumAll { x }, vec![sum], vec![1], needs, "sum_all")
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Applies one op's reverse rule, accumulating into the input gradients.
/// `out` is the tape index of the op's own output, `gout` the gradient that
/// arrived there.
#[allow(clippy::too_many_lines)]
pub(super) fn op_backward(
    values: &[Vec<f64>],
    _shapes: &[Vec<usize>],
    needs: &[bool],
    grads: &mut [Option<Vec<f64>>],
    op: &Op,
    out: usize,
    gout: &[f64],
) -> Result<()> {
    match *op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            if needs[a.0] {
                add_into(acc(grads, a, gout.len()), gout);
            }
            if needs[b.0] {
                add_into(acc(grads, b, gout.len()), gout);
            }
        }
        Op::Mul { a, b } => {
            if needs[a.0] {
                let bv = &values[b.0];
                let ga = acc(grads, a, gout.len());
                for i in 0..gout.len() {
                    ga[i] += gout[i] * bv[i];
                }
            }
            if needs[b.0] {
                let av = &values[a.0];
                let gb = acc(grads, b, gout.len());
                for i in 0..gout.len() {
                    gb[i] += gout[i] * av[i];
                }
            }
        }
        Op::Scale { x, c } => {
            if needs[x.0] {
                let gx = acc(grads, x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * c;
                }
            }
        }
        Op::Matmul { a, b, m, k, n } => {
            if needs[a.0] {
                let da = kernels::matmul_nt(gout, &values[b.0], m, n, k);
                add_into(acc(grads, a, m * k), &da);
            }
            if needs[b.0] {
                let db = kernels::matmul_tn(&values[a.0], gout, k, m, n);
                add_into(acc(grads, b, k * n), &db);
            }
        }
        Op::AddBias { x, b, cols } => {
            if needs[x.0] {
                add_into(acc(grads, x, gout.len()), gout);
            }
            if needs[b.0] {
                let gb = acc(grads, b, cols);
                for row in gout.chunks_exact(cols) {
                    add_into(gb, row);
                }
            }
        }
        Op::Relu { x } => {
            if needs[x.0] {
                let xv = &values[x.0];
                let gx = acc(grads, x, gout.len());
                for i in 0..gout.len() {
                    if xv[i] > 0.0 {
                        gx[i] += gout[i];
                    }
                }
            }
        }
        Op::Tanh { x } => {
            if needs[x.0] {
                let yv = &values[out];
                let gx = acc(grads, x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * (1.0 - yv[i] * yv[i]);
                }
            }
        }
        Op::Sigmoid { x } => {
            if needs[x.0] {
                let yv = &values[out];
                let gx = acc(grads, x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                }
            }
        }
        Op::Conv2d { x, w, b, ref dims } => {
            if needs[x.0] {
                let dx = kernels::conv2d_grad_x(gout, &values[w.0], dims);
                add_into(acc(grads, x, dx.len()), &dx);
            }
            if needs[w.0] {
                let dw = kernels::conv2d_grad_w(gout, &values[x.0], dims);
                add_into(acc(grads, w, dw.len()), &dw);
            }
            if needs[b.0] {
                let db = kernels::conv2d_grad_b(gout, dims);
                add_into(acc(grads, b, db.len()), &db);
            }
        }
        Op::BnTrain { x, gamma, beta, ch, ref x_hat, ref inv_std } => {
            let rows = gout.len() / ch;
            let mut sum_g = vec![0.0; ch];
            let mut sum_gx = vec![0.0; ch];
            for (grow, xrow) in gout.chunks_exact(ch).zip(x_hat.chunks_exact(ch)) {
                for c in 0..ch {
                    sum_g[c] += grow[c];
                    sum_gx[c] += grow[c] * xrow[c];
                }
            }
            if needs[beta.0] {
                add_into(acc(grads, beta, ch), &sum_g);
            }
            if needs[gamma.0] {
                add_into(acc(grads, gamma, ch), &sum_gx);
            }
            if needs[x.0] {
                let gv = &values[gamma.0];
                let n = rows as f64;
                let gx = acc(grads, x, gout.len());
                for r in 0..rows {
                    for c in 0..ch {
                        let i = r * ch + c;
                        gx[i] += gv[c] * inv_std[c] / n
                            * (n * gout[i] - sum_g[c] - x_hat[i] * sum_gx[c]);
                    }
                }
            }
        }
        Op::BnInfer { x, gamma, beta, ch, ref x_hat, ref inv_std } => {
            if needs[beta.0] {
                let gb = acc(grads, beta, ch);
                for row in gout.chunks_exact(ch) {
                    add_into(gb, row);
                }
            }
            if needs[gamma.0] {
                let gg = acc(grads, gamma, ch);
                for (grow, xrow) in gout.chunks_exact(ch).zip(x_hat.chunks_exact(ch)) {
                    for c in 0..ch {
                        gg[c] += grow[c] * xrow[c];
                    }
                }
            }
            if needs[x.0] {
                let gv = &values[gamma.0];
                let gx = acc(grads, x, gout.len());
                for (i, g) in gout.iter().enumerate() {
                    let c = i % ch;
                    gx[i] += g * gv[c] * inv_std[c];
                }
            }
        }
        Op::MulMask { x, ref mask } => {
            if needs[x.0] {
                let gx = acc(grads, x, gout.len());
                for i in 0..gout.len() {
                    gx[i] += gout[i] * mask[i];
                }
            }
        }
        Op::Softmax { x, cols } => {
            if needs[x.0] {
                let yv = &values[out];
                let gx = acc(grads, x, gout.len());
                for r in 0..gout.len() / cols {
                    let o = r * cols;
                    let dot: f64 = (0..cols).map(|j| gout[o + j] * yv[o + j]).sum();
                    for j in 0..cols {
                        gx[o + j] += yv[o + j] * (gout[o + j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax { x, cols } => {
            if needs[x.0] {
                let yv = &values[out];
                let gx = acc(grads, x, gout.len());
                for r in 0..gout.len() / cols {
                    let o = r * cols;
                    let sum: f64 = gout[o..o + cols].iter().sum();
                    for j in 0..cols {
                        gx[o + j] += gout[o + j] - yv[o + j].exp() * sum;
                    }
                }
            }
        }
        Op::MaskedSoftmax { x, cols, ref lens } => {
            if needs[x.0] {
                let yv = &values[out];
                let gx = acc(grads, x, gout.len());
                for (r, &l) in lens.iter().enumerate() {
                    let o = r * cols;
                    let dot: f64 = (0..l).map(|j| gout[o + j] * yv[o + j]).sum();
                    for j in 0..l {
                        gx[o + j] += yv[o + j] * (gout[o + j] - dot);
                    }
                }
            }
        }
        Op::PickNll { logp, cols, ref targets } => {
            if needs[logp.0] {
                let g = gout[0];
                let gl = acc(grads, logp, values[logp.0].len());
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        gl[r * cols + t] -= g;
                    }
                }
            }
        }
        Op::ConcatCols { ref parts, cols } => {
            let rows = gout.len() / cols;
            let mut off = 0;
            for &(p, w) in parts {
                if needs[p.0] {
                    let gp = acc(grads, p, rows * w);
                    for r in 0..rows {
                        add_into(&mut gp[r * w..(r + 1) * w], &gout[r * cols + off..r * cols + off + w]);
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, cols, start, width } => {
            if needs[x.0] {
                let rows = gout.len() / width;
                let gx = acc(grads, x, values[x.0].len());
                for r in 0..rows {
                    add_into(
                        &mut gx[r * cols + start..r * cols + start + width],
                        &gout[r * width..(r + 1) * width],
                    );
                }
            }
        }
        Op::SelectTime { x, batch, steps, cols, t } => {
            if needs[x.0] {
                let gx = acc(grads, x, values[x.0].len());
                for b in 0..batch {
                    let dst = (b * steps + t) * cols;
                    add_into(&mut gx[dst..dst + cols], &gout[b * cols..(b + 1) * cols]);
                }
            }
        }
        Op::StackTime { ref parts, batch, cols } => {
            let steps = parts.len();
            for (t, &p) in parts.iter().enumerate() {
                if needs[p.0] {
                    let gp = acc(grads, p, batch * cols);
                    for b in 0..batch {
                        let src = (b * steps + t) * cols;
                        add_into(&mut gp[b * cols..(b + 1) * cols], &gout[src..src + cols]);
                    }
                }
            }
        }
        Op::ReverseTime { x, batch, steps, cols, ref lens } => {
            if needs[x.0] {
                let gx = acc(grads, x, gout.len());
                for b in 0..batch {
                    let l = lens[b];
                    for t in 0..steps {
                        let src = if t < l { b * steps + (l - 1 - t) } else { b * steps + t };
                        add_into(
                            &mut gx[src * cols..(src + 1) * cols],
                            &gout[(b * steps + t) * cols..(b * steps + t + 1) * cols],
                        );
                    }
                }
            }
        }
        Op::FlattenConv { x, batch, in_f, in_t, in_c } => {
            if needs[x.0] {
                let cols = in_f * in_c;
                let gx = acc(grads, x, gout.len());
                for b in 0..batch {
                    for f in 0..in_f {
                        for t in 0..in_t {
                            let xi = ((b * in_f + f) * in_t + t) * in_c;
                            let oi = (b * in_t + t) * cols + f * in_c;
                            add_into(&mut gx[xi..xi + in_c], &gout[oi..oi + in_c]);
                        }
                    }
                }
            }
        }
        Op::Reshape { x } => {
            if needs[x.0] {
                add_into(acc(grads, x, gout.len()), gout);
            }
        }
        Op::BcastMul { vec, x, cols } => {
            if needs[vec.0] {
                let xv = &values[x.0];
                let gv = acc(grads, vec, cols);
                for (grow, xrow) in gout.chunks_exact(cols).zip(xv.chunks_exact(cols)) {
                    for c in 0..cols {
                        gv[c] += grow[c] * xrow[c];
                    }
                }
            }
            if needs[x.0] {
                let vv = &values[vec.0];
                let gx = acc(grads, x, gout.len());
                for (i, g) in gout.iter().enumerate() {
                    gx[i] += g * vv[i % cols];
                }
            }
        }
        Op::AttnScores { q, enc, batch, steps, width } => {
            if needs[q.0] {
                let ev = &values[enc.0];
                let gq = acc(grads, q, batch * width);
                for b in 0..batch {
                    for s in 0..steps {
                        let g = gout[b * steps + s];
                        let eb = &ev[(b * steps + s) * width..(b * steps + s + 1) * width];
                        for (d, e) in gq[b * width..(b + 1) * width].iter_mut().zip(eb) {
                            *d += g * e;
                        }
                    }
                }
            }
            if needs[enc.0] {
                let qv = &values[q.0];
                let ge = acc(grads, enc, batch * steps * width);
                for b in 0..batch {
                    let qb = &qv[b * width..(b + 1) * width];
                    for s in 0..steps {
                        let g = gout[b * steps + s];
                        let dst = (b * steps + s) * width;
                        for (d, qq) in ge[dst..dst + width].iter_mut().zip(qb) {
                            *d += g * qq;
                        }
                    }
                }
            }
        }
        Op::AttnContext { attn, enc, batch, steps, width } => {
            if needs[attn.0] {
                let ev = &values[enc.0];
                let ga = acc(grads, attn, batch * steps);
                for b in 0..batch {
                    let gb = &gout[b * width..(b + 1) * width];
                    for s in 0..steps {
                        let eb = &ev[(b * steps + s) * width..(b * steps + s + 1) * width];
                        ga[b * steps + s] += gb.iter().zip(eb).map(|(g, e)| g * e).sum::<f64>();
                    }
                }
            }
            if needs[enc.0] {
                let av = &values[attn.0];
                let ge = acc(grads, enc, batch * steps * width);
                for b in 0..batch {
                    let gb = &gout[b * width..(b + 1) * width];
                    for s in 0..steps {
                        let a = av[b * steps + s];
                        let dst = (b * steps + s) * width;
                        for (d, g) in ge[dst..dst + width].iter_mut().zip(gb) {
                            *d += a * g;
                        }
                    }
                }
            }
        }
        Op::DotConst { x, ref c } => {
            if needs[x.0] {
                let g = gout[0];
                let gx = acc(grads, x, c.len());
                for (d, cc) in gx.iter_mut().zip(c) {
                    *d += g * cc;
                }
            }
        }
        Op::SumAll { x } => {
            if needs[x.0] {
                let g = gout[0];
                let gx = acc(grads, x, values[x.0].len());
                for d in gx.iter_mut() {
                    *d += g;
                }
            }
        }
    }
    Ok(())
}
