//! Dense numeric kernels shared by the autodiff tape and the inference path.
//!
//! Every kernel comes in a sequential form (`*_seq`) and, with the `parallel`
//! feature, a rayon form (`*_par`). The unsuffixed entry points dispatch on
//! build features and job size. Parallel decomposition is always over disjoint
//! output chunks with a fixed inner summation order, so the parallel and
//! sequential paths produce bit-identical results; benches compare their
//! throughput directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the rayon fork/join overhead dominates.
const PAR_MIN_WORK: usize = 1 << 15;

/// Run `f(chunk_index, chunk)` over equal-size chunks of `out`.
/// `f` must depend only on the chunk index for bit-stable output.
fn for_each_chunk<F>(out: &mut [f64], chunk: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    debug_assert!(chunk > 0 && out.len() % chunk == 0);
    #[cfg(feature = "parallel")]
    {
        if work >= PAR_MIN_WORK {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    let _ = work;
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn matmul_row(out_row: &mut [f64], i: usize, a: &[f64], b: &[f64], k: usize, n: usize) {
    for l in 0..k {
        let a_il = a[i * k + l];
        let b_row = &b[l * n..(l + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a_il * bv;
        }
    }
}

/// `a` is `m x k`, `b` is `k x n`; returns `a @ b` as `m x n`, row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        for_each_chunk(&mut out, n, m * k * n, |i, row| matmul_row(row, i, a, b, k, n));
    }
    out
}

/// Sequential matmul, exposed for benchmarking against the dispatched form.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_mut(n.max(1)).enumerate().take(m) {
        matmul_row(row, i, a, b, k, n);
    }
    out
}

/// Rayon matmul without the size threshold, for benchmarking.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if n > 0 {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, row)| matmul_row(row, i, a, b, k, n));
    }
    out
}

/// `a` is `m x k`, `b` is `n x k`; returns `a @ b^T` as `m x n`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        for_each_chunk(&mut out, n, m * k * n, |i, row| {
            let a_row = &a[i * k..(i + 1) * k];
            for (j, o) in row.iter_mut().enumerate() {
                let b_row = &b[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a_row[l] * b_row[l];
                }
                *o = acc;
            }
        });
    }
    out
}

/// `a` is `k x m`, `b` is `k x n`; returns `a^T @ b` as `m x n`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    if n > 0 {
        for_each_chunk(&mut out, n, m * k * n, |i, row| {
            for l in 0..k {
                let a_li = a[l * m + i];
                let b_row = &b[l * n..(l + 1) * n];
                for (o, &bv) in row.iter_mut().zip(b_row) {
                    *o += a_li * bv;
                }
            }
        });
    }
    out
}

/// Row vector times matrix: `x` is `k`, `w` is `k x n`; returns `n`.
pub fn matvec(x: &[f64], w: &[f64], n: usize) -> Vec<f64> {
    let k = x.len();
    debug_assert_eq!(w.len(), k * n);
    let mut out = vec![0.0; n];
    for l in 0..k {
        let xv = x[l];
        let w_row = &w[l * n..(l + 1) * n];
        for (o, &wv) in out.iter_mut().zip(w_row) {
            *o += xv * wv;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 2-D convolution over (batch, freq, time, channel) tensors
// ---------------------------------------------------------------------------

/// Zero-padding rule for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent `ceil(in / stride)`; total pad
    /// `max((out-1)*stride + kernel - in, 0)` split floor-leading.
    Same,
    /// No padding; output extent `(in - kernel)/stride + 1`.
    Valid,
}

impl Padding {
    pub fn out_extent(self, input: usize, kernel: usize, stride: usize) -> usize {
        match self {
            Padding::Same => input.div_ceil(stride),
            Padding::Valid => {
                debug_assert!(kernel <= input);
                (input - kernel) / stride + 1
            }
        }
    }

    /// Leading-edge pad (the floor half of the total).
    pub fn pad_lead(self, input: usize, kernel: usize, stride: usize) -> usize {
        match self {
            Padding::Same => {
                let out = self.out_extent(input, kernel, stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                total / 2
            }
            Padding::Valid => 0,
        }
    }
}

/// Geometry of one convolution. Input is `(batch, in_f, in_t, in_c)` and
/// filters are `(k_count, k_f, k_t, in_c)`, both row-major.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub in_f: usize,
    pub in_t: usize,
    pub in_c: usize,
    pub k_count: usize,
    pub k_f: usize,
    pub k_t: usize,
    pub stride_f: usize,
    pub stride_t: usize,
    pub padding: Padding,
}

impl ConvDims {
    pub fn out_f(&self) -> usize {
        self.padding.out_extent(self.in_f, self.k_f, self.stride_f)
    }
    pub fn out_t(&self) -> usize {
        self.padding.out_extent(self.in_t, self.k_t, self.stride_t)
    }
    pub fn pad_f(&self) -> usize {
        self.padding.pad_lead(self.in_f, self.k_f, self.stride_f)
    }
    pub fn pad_t(&self) -> usize {
        self.padding.pad_lead(self.in_t, self.k_t, self.stride_t)
    }
    pub fn out_len(&self) -> usize {
        self.batch * self.out_f() * self.out_t() * self.k_count
    }
    fn work(&self) -> usize {
        self.out_len() * self.k_f * self.k_t * self.in_c
    }
}

fn conv2d_fwd_chunk(out: &mut [f64], b: usize, of: usize, x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) {
    let (out_t, kk) = (d.out_t(), d.k_count);
    let (pad_f, pad_t) = (d.pad_f(), d.pad_t());
    let f0 = (of * d.stride_f) as isize - pad_f as isize;
    for ot in 0..out_t {
        let t0 = (ot * d.stride_t) as isize - pad_t as isize;
        for k in 0..kk {
            let mut acc = bias[k];
            for kf in 0..d.k_f {
                let f = f0 + kf as isize;
                if f < 0 || f >= d.in_f as isize {
                    continue;
                }
                for kt in 0..d.k_t {
                    let t = t0 + kt as isize;
                    if t < 0 || t >= d.in_t as isize {
                        continue;
                    }
                    let xi = ((b * d.in_f + f as usize) * d.in_t + t as usize) * d.in_c;
                    let wi = ((k * d.k_f + kf) * d.k_t + kt) * d.in_c;
                    for c in 0..d.in_c {
                        acc += w[wi + c] * x[xi + c];
                    }
                }
            }
            out[ot * kk + k] = acc;
        }
    }
}

/// Forward convolution: `H_k = W_k * X + b_k` over every batch element.
pub fn conv2d_fwd(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (out_f, out_t) = (d.out_f(), d.out_t());
    let mut out = vec![0.0; d.out_len()];
    let chunk = out_t * d.k_count;
    if chunk > 0 {
        for_each_chunk(&mut out, chunk, d.work(), |idx, c| {
            conv2d_fwd_chunk(c, idx / out_f, idx % out_f, x, w, bias, d);
        });
    }
    out
}

/// Sequential forward convolution, for benchmarking.
pub fn conv2d_fwd_seq(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (out_f, out_t) = (d.out_f(), d.out_t());
    let mut out = vec![0.0; d.out_len()];
    let chunk = out_t * d.k_count;
    for (idx, c) in out.chunks_mut(chunk.max(1)).enumerate() {
        conv2d_fwd_chunk(c, idx / out_f, idx % out_f, x, w, bias, d);
    }
    out
}

/// Rayon forward convolution without the size threshold, for benchmarking.
#[cfg(feature = "parallel")]
pub fn conv2d_fwd_par(x: &[f64], w: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let (out_f, out_t) = (d.out_f(), d.out_t());
    let mut out = vec![0.0; d.out_len()];
    let chunk = out_t * d.k_count;
    if chunk > 0 {
        out.par_chunks_mut(chunk).enumerate().for_each(|(idx, c)| {
            conv2d_fwd_chunk(c, idx / out_f, idx % out_f, x, w, bias, d);
        });
    }
    out
}

/// Gradient w.r.t. the input, gather form: each input cell sums the output
/// positions whose receptive field covers it.
pub fn conv2d_grad_x(dout: &[f64], w: &[f64], d: &ConvDims) -> Vec<f64> {
    let (out_f, out_t, kk) = (d.out_f(), d.out_t(), d.k_count);
    let (pad_f, pad_t) = (d.pad_f(), d.pad_t());
    let mut dx = vec![0.0; d.batch * d.in_f * d.in_t * d.in_c];
    let chunk = d.in_t * d.in_c;
    for_each_chunk(&mut dx, chunk, d.work(), |idx, cell| {
        let (b, f) = (idx / d.in_f, idx % d.in_f);
        for t in 0..d.in_t {
            for kf in 0..d.k_f {
                // of * stride_f = f + pad_f - kf
                let num_f = f as isize + pad_f as isize - kf as isize;
                if num_f < 0 || num_f as usize % d.stride_f != 0 {
                    continue;
                }
                let of = num_f as usize / d.stride_f;
                if of >= out_f {
                    continue;
                }
                for kt in 0..d.k_t {
                    let num_t = t as isize + pad_t as isize - kt as isize;
                    if num_t < 0 || num_t as usize % d.stride_t != 0 {
                        continue;
                    }
                    let ot = num_t as usize / d.stride_t;
                    if ot >= out_t {
                        continue;
                    }
                    let doi = ((b * out_f + of) * out_t + ot) * kk;
                    for k in 0..kk {
                        let g = dout[doi + k];
                        let wi = ((k * d.k_f + kf) * d.k_t + kt) * d.in_c;
                        for c in 0..d.in_c {
                            cell[t * d.in_c + c] += g * w[wi + c];
                        }
                    }
                }
            }
        }
    });
    dx
}

/// Gradient w.r.t. the filters; one chunk per filter.
pub fn conv2d_grad_w(dout: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let (out_f, out_t, kk) = (d.out_f(), d.out_t(), d.k_count);
    let (pad_f, pad_t) = (d.pad_f(), d.pad_t());
    let mut dw = vec![0.0; kk * d.k_f * d.k_t * d.in_c];
    let chunk = d.k_f * d.k_t * d.in_c;
    for_each_chunk(&mut dw, chunk, d.work(), |k, wk| {
        for b in 0..d.batch {
            for of in 0..out_f {
                let f0 = (of * d.stride_f) as isize - pad_f as isize;
                for ot in 0..out_t {
                    let t0 = (ot * d.stride_t) as isize - pad_t as isize;
                    let g = dout[((b * out_f + of) * out_t + ot) * kk + k];
                    if g == 0.0 {
                        continue;
                    }
                    for kf in 0..d.k_f {
                        let f = f0 + kf as isize;
                        if f < 0 || f >= d.in_f as isize {
                            continue;
                        }
                        for kt in 0..d.k_t {
                            let t = t0 + kt as isize;
                            if t < 0 || t >= d.in_t as isize {
                                continue;
                            }
                            let xi = ((b * d.in_f + f as usize) * d.in_t + t as usize) * d.in_c;
                            let wi = (kf * d.k_t + kt) * d.in_c;
                            for c in 0..d.in_c {
                                wk[wi + c] += g * x[xi + c];
                            }
                        }
                    }
                }
            }
        }
    });
    dw
}

/// Gradient w.r.t. the bias.
pub fn conv2d_grad_b(dout: &[f64], d: &ConvDims) -> Vec<f64> {
    let kk = d.k_count;
    let mut db = vec![0.0; kk];
    for pos in dout.chunks_exact(kk) {
        for (acc, &g) in db.iter_mut().zip(pos) {
            *acc += g;
        }
    }
    db
}

// ---------------------------------------------------------------------------
// Row-wise softmax family
// ---------------------------------------------------------------------------

/// In-place stable softmax over one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// In-place stable log-softmax over one row.
pub fn log_softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    let log_z = max + sum.ln();
    for v in row.iter_mut() {
        *v -= log_z;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Peephole LSTM cell (inference form)
// ---------------------------------------------------------------------------

/// Packed LSTM weights. Gate order inside the `4u`-wide matrices is
/// (input, forget, candidate, output). Peepholes are diagonal vectors.
pub struct LstmCellRef<'a> {
    pub w_x: &'a [f64],
    pub w_h: &'a [f64],
    pub bias: &'a [f64],
    pub p_i: &'a [f64],
    pub p_f: &'a [f64],
    pub p_o: &'a [f64],
    pub units: usize,
}

/// One peephole LSTM step on plain vectors; returns `(h, c)`.
pub fn lstm_cell(wts: &LstmCellRef, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let u = wts.units;
    let mut pre = matvec(x, wts.w_x, 4 * u);
    let pre_h = matvec(h_prev, wts.w_h, 4 * u);
    for (p, (q, b)) in pre.iter_mut().zip(pre_h.iter().zip(wts.bias)) {
        *p += q + b;
    }
    let mut h = vec![0.0; u];
    let mut c = vec![0.0; u];
    for j in 0..u {
        let i_g = sigmoid(pre[j] + wts.p_i[j] * c_prev[j]);
        let f_g = sigmoid(pre[u + j] + wts.p_f[j] * c_prev[j]);
        let cand = pre[2 * u + j].tanh();
        c[j] = f_g * c_prev[j] + i_g * cand;
        let o_g = sigmoid(pre[3 * u + j] + wts.p_o[j] * c[j]);
        h[j] = o_g * c[j].tanh();
    }
    (h, c)
}
