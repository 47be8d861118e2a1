//! Property tests for tape-op invariants.

use asrkit::autodiff::Tape;
use asrkit::kernels::Padding;
use proptest::collection::vec;
use proptest::prelude::*;

fn finite_val() -> impl Strategy<Value = f64> {
    -10.0..10.0f64
}

proptest! {
    /// Softmax rows are a probability distribution.
    #[test]
    fn softmax_rows_normalize(rows in 1usize..5, cols in 1usize..8, seedvals in vec(-10.0..10.0f64, 40)) {
        let n = rows * cols;
        prop_assume!(seedvals.len() >= n);
        let mut t = Tape::new();
        let x = t.leaf(seedvals[..n].to_vec(), &[rows, cols]).unwrap();
        let y = t.softmax(x).unwrap();
        for row in t.value(y).chunks_exact(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
    }

    /// Log-softmax agrees with softmax and log-sums to zero.
    #[test]
    fn log_softmax_matches_softmax(cols in 1usize..8, seedvals in vec(-10.0..10.0f64, 8)) {
        prop_assume!(seedvals.len() >= cols);
        let mut t = Tape::new();
        let x = t.leaf(seedvals[..cols].to_vec(), &[1, cols]).unwrap();
        let s = t.softmax(x).unwrap();
        let ls = t.log_softmax(x).unwrap();
        let lse: f64 = t.value(ls).iter().map(|v| v.exp()).sum();
        prop_assert!((lse - 1.0).abs() < 1e-12);
        for (a, b) in t.value(s).iter().zip(t.value(ls)) {
            prop_assert!((a.ln() - b).abs() < 1e-10);
        }
    }

    /// Masked softmax puts exactly zero weight on padding and a proper
    /// distribution on the valid prefix.
    #[test]
    fn masked_softmax_respects_lengths(
        cols in 2usize..8,
        len_frac in 0.01f64..1.0,
        seedvals in vec(-10.0..10.0f64, 8),
    ) {
        prop_assume!(seedvals.len() >= cols);
        let len = ((cols as f64 * len_frac).ceil() as usize).clamp(1, cols);
        let mut t = Tape::new();
        let x = t.leaf(seedvals[..cols].to_vec(), &[1, cols]).unwrap();
        let y = t.masked_softmax(x, &[len]).unwrap();
        let yv = t.value(y);
        let valid_sum: f64 = yv[..len].iter().sum();
        prop_assert!((valid_sum - 1.0).abs() < 1e-12);
        prop_assert!(yv[len..].iter().all(|&p| p == 0.0));
    }

    /// SAME padding preserves `ceil(n / stride)` for any geometry.
    #[test]
    fn same_padding_output_extent(input in 1usize..50, kernel in 1usize..7, stride in 1usize..4) {
        let out = Padding::Same.out_extent(input, kernel, stride);
        prop_assert_eq!(out, input.div_ceil(stride));
    }

    /// Reversing a sequence batch twice restores it exactly.
    #[test]
    fn reverse_time_is_involution(
        batch in 1usize..3,
        steps in 1usize..6,
        cols in 1usize..4,
        lens_seed in vec(0usize..100, 3),
        seedvals in vec(finite_val(), 72),
    ) {
        let n = batch * steps * cols;
        prop_assume!(seedvals.len() >= n);
        let lens: Vec<usize> = (0..batch).map(|b| lens_seed[b] % (steps + 1)).collect();
        let mut t = Tape::new();
        let x = t.leaf(seedvals[..n].to_vec(), &[batch * steps, cols]).unwrap();
        let r = t.reverse_time(x, batch, steps, &lens).unwrap();
        let rr = t.reverse_time(r, batch, steps, &lens).unwrap();
        prop_assert_eq!(t.value(rr), t.value(x));
    }

    /// Slicing a concat recovers the original part bit for bit.
    #[test]
    fn concat_slice_round_trip(
        rows in 1usize..4,
        w1 in 1usize..4,
        w2 in 1usize..4,
        seedvals in vec(finite_val(), 24),
    ) {
        prop_assume!(seedvals.len() >= rows * (w1 + w2));
        let mut t = Tape::new();
        let a = t.leaf(seedvals[..rows * w1].to_vec(), &[rows, w1]).unwrap();
        let b = t.leaf(seedvals[rows * w1..rows * (w1 + w2)].to_vec(), &[rows, w2]).unwrap();
        let cat = t.concat_cols(&[a, b]).unwrap();
        let a2 = t.slice_cols(cat, 0, w1).unwrap();
        let b2 = t.slice_cols(cat, w1, w2).unwrap();
        prop_assert_eq!(t.value(a2), t.value(a));
        prop_assert_eq!(t.value(b2), t.value(b));
    }

    /// select_time inverts stack_time.
    #[test]
    fn stack_select_round_trip(batch in 1usize..3, cols in 1usize..4, seedvals in vec(finite_val(), 36)) {
        let steps = 3;
        prop_assume!(seedvals.len() >= batch * steps * cols);
        let mut t = Tape::new();
        let parts: Vec<_> = (0..steps)
            .map(|s| {
                t.leaf(seedvals[s * batch * cols..(s + 1) * batch * cols].to_vec(), &[batch, cols])
                    .unwrap()
            })
            .collect();
        let stacked = t.stack_time(&parts).unwrap();
        for (s, &p) in parts.iter().enumerate() {
            let back = t.select_time(stacked, batch, steps, s).unwrap();
            prop_assert_eq!(t.value(back), t.value(p));
        }
    }

    /// Gradient accumulates across branches: d/dx (c1.x + c2.x) = c1 + c2.
    #[test]
    fn fan_out_gradients_sum(n in 1usize..6, seedvals in vec(finite_val(), 18)) {
        prop_assume!(seedvals.len() >= 3 * n);
        let mut t = Tape::new();
        let x = t.leaf(seedvals[..n].to_vec(), &[n]).unwrap();
        let c1 = seedvals[n..2 * n].to_vec();
        let c2 = seedvals[2 * n..3 * n].to_vec();
        let l1 = t.dot_const(x, c1.clone()).unwrap();
        let l2 = t.dot_const(x, c2.clone()).unwrap();
        let loss = t.add(l1, l2).unwrap();
        t.backward(loss).unwrap();
        let g = t.grad(x).unwrap();
        for i in 0..n {
            prop_assert!((g[i] - (c1[i] + c2[i])).abs() < 1e-12);
        }
    }

    /// Matrix products associate up to rounding.
    #[test]
    fn matmul_associates(seedvals in vec(-2.0..2.0f64, 48)) {
        let (m, k, n, p) = (2, 3, 4, 2);
        prop_assume!(seedvals.len() >= m * k + k * n + n * p);
        let mut t = Tape::new();
        let a = t.leaf(seedvals[..m * k].to_vec(), &[m, k]).unwrap();
        let b = t.leaf(seedvals[m * k..m * k + k * n].to_vec(), &[k, n]).unwrap();
        let c = t
            .leaf(seedvals[m * k + k * n..m * k + k * n + n * p].to_vec(), &[n, p])
            .unwrap();
        let ab = t.matmul(a, b).unwrap();
        let ab_c = t.matmul(ab, c).unwrap();
        let bc = t.matmul(b, c).unwrap();
        let a_bc = t.matmul(a, bc).unwrap();
        for (x, y) in t.value(ab_c).iter().zip(t.value(a_bc)) {
            prop_assert!((x - y).abs() < 1e-9 * x.abs().max(y.abs()).max(1.0));
        }
    }

    /// flatten_conv is a pure permutation: same multiset, exact mapping.
    #[test]
    fn flatten_conv_permutes(b in 1usize..3, f in 1usize..4, s in 1usize..4, c in 1usize..3) {
        let n = b * f * s * c;
        let vals: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut t = Tape::new();
        let x = t.leaf(vals, &[b, f, s, c]).unwrap();
        let y = t.flatten_conv(x).unwrap();
        prop_assert_eq!(t.shape(y), &[b * s, f * c]);
        let yv = t.value(y);
        for bi in 0..b {
            for fi in 0..f {
                for si in 0..s {
                    for ci in 0..c {
                        let src = (((bi * f + fi) * s + si) * c + ci) as f64;
                        let dst = (bi * s + si) * (f * c) + fi * c + ci;
                        prop_assert_eq!(yv[dst], src);
                    }
                }
            }
        }
    }
}
