//! Whole-model gradient verification against finite differences.
//!
//! Builds a deterministic toy batch, takes one taped forward/backward pass
//! for the analytic gradients, then re-evaluates the loss under central
//! differences for every entry of every parameter tensor. Expensive, so
//! meant for small configurations.
//!
//! The checked objective is the batch cross entropy plus a fixed linear
//! probe `sum_i k_i * theta_i` with deterministic signs and |k_i| = 0.03.
//! The probe differentiates exactly, so it cannot mask a wrong backward
//! rule; its job is to keep every entry's gradient well away from zero,
//! where the relative-error denominator bottoms out at 1e-8 and central
//! differences measure only float cancellation noise.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{check_gradients, GradCheckOptions, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::rng::{stream_rng, stream_rng_at, Stream};
use crate::seq2seq::{ModelConfig, Seq2Seq};
use crate::training::loss::cross_entropy;

/// Deterministic two-utterance fixture of uniform noise features, both at
/// the full 9 frames. Equal lengths are deliberate: padded time steps see
/// all-zero inputs and zero-initialized biases, which parks their relu
/// inputs exactly on the kink where central differences and the analytic
/// subgradient disagree by construction.
fn fixture(cfg: &ModelConfig, seed: u64) -> (Vec<f64>, [usize; 4], Vec<usize>, Vec<Vec<usize>>) {
    let shape = [2, cfg.n_freq, 9, cfg.n_channels];
    let mut rng = stream_rng(seed, Stream::Synth);
    let features = (0..shape.iter().product::<usize>())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let v = cfg.vocab;
    let targets = vec![vec![1 % v, 2 % v, 3 % v], vec![v - 2, 0]];
    (features, shape, vec![9, 9], targets)
}

/// Probe coefficient magnitude, comfortably above both typical float noise
/// and the 1e-8 denominator floor.
const PROBE_SCALE: f64 = 3e-2;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn probe_coeffs(tensor_index: usize, n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = splitmix((tensor_index as u64) << 32 | i as u64);
            if h & 1 == 0 {
                PROBE_SCALE
            } else {
                -PROBE_SCALE
            }
        })
        .collect()
}

fn objective(
    cfg: &ModelConfig,
    seed: u64,
    params: &[(String, Vec<f64>)],
    features: &[f64],
    shape: &[usize],
    lens: &[usize],
    targets: &[Vec<usize>],
) -> Result<(Tape, crate::autodiff::Var, Seq2Seq)> {
    let mut model = Seq2Seq::new(cfg.clone(), seed)?;
    model.set_param_values(params)?;
    let mut t = Tape::new();
    let x = t.constant(features.to_vec(), shape)?;
    let mut rng = stream_rng_at(seed, Stream::Dropout, 0, 0);
    let out = model.teacher_forced(&mut t, x, lens, targets, Mode::Train, &mut rng)?;
    let mut loss = cross_entropy(&mut t, out.log_probs, &out.targets)?;
    for (ti, (name, _)) in model.param_manifest().iter().enumerate() {
        let pv = t
            .param_var(name)
            .ok_or_else(|| Error::Training(format!("parameter {name} is not on the tape")))?;
        let coeffs = probe_coeffs(ti, t.value(pv).len());
        let probe = t.dot_const(pv, coeffs)?;
        loss = t.add(loss, probe)?;
    }
    Ok((t, loss, model))
}

/// Finite-difference check of every parameter tensor, one report per
/// tensor, in manifest order.
pub fn model_gradcheck(
    cfg: &ModelConfig,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<Vec<(String, GradCheckReport)>> {
    cfg.validate()?;
    if cfg.vocab < 4 {
        return Err(Error::Config(
            "gradient check needs a vocabulary of at least 4".into(),
        ));
    }
    let (features, shape, lens, targets) = fixture(cfg, seed);
    let base = Seq2Seq::new(cfg.clone(), seed)?;
    let base_params = base.param_values();

    let (mut tape, loss, model) =
        objective(cfg, seed, &base_params, &features, &shape, &lens, &targets)?;
    tape.backward(loss)?;
    let mut analytic = HashMap::new();
    for (name, _) in model.param_manifest() {
        let var = tape
            .param_var(&name)
            .ok_or_else(|| Error::Training(format!("parameter {name} is not on the tape")))?;
        let g = tape
            .grad(var)
            .ok_or_else(|| Error::Training(format!("parameter {name} received no gradient")))?;
        analytic.insert(name, g.to_vec());
    }
    drop(tape);

    let eval = |perturbed: &[(String, Vec<f64>)]| -> Result<f64> {
        let mut all = base_params.clone();
        for (n, v) in perturbed {
            match all.iter_mut().find(|(an, _)| an == n) {
                Some(slot) => slot.1 = v.clone(),
                None => return Err(Error::Training(format!("unknown parameter {n}"))),
            }
        }
        let (t, loss, _) = objective(cfg, seed, &all, &features, &shape, &lens, &targets)?;
        Ok(t.value(loss)[0])
    };

    let mut reports = Vec::with_capacity(base_params.len());
    for (name, values) in &base_params {
        let single = vec![(name.clone(), values.clone())];
        let report = check_gradients(&single, &analytic, &eval, opts)?;
        reports.push((name.clone(), report));
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes_per_tensor() {
        let cfg = ModelConfig {
            conv_maps: 2,
            residual_blocks: 1,
            residual_maps: 2,
            dense_units: 4,
            enc_lstm_units: 3,
            enc_lstm_layers: 1,
            dec_lstm_units: 3,
            attn_units: 3,
            ..ModelConfig::tiny(5)
        };
        let reports = model_gradcheck(&cfg, 9, &GradCheckOptions::default()).unwrap();
        assert!(!reports.is_empty());
        for (name, r) in &reports {
            assert!(r.passed(), "{name}: {r}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn repeated_runs_agree_exactly() {
        let cfg = ModelConfig {
            conv_maps: 2,
            residual_blocks: 1,
            residual_maps: 2,
            dense_units: 3,
            enc_lstm_units: 2,
            enc_lstm_layers: 1,
            dec_lstm_units: 2,
            attn_units: 2,
            ..ModelConfig::tiny(4)
        };
        let a = model_gradcheck(&cfg, 9, &GradCheckOptions::default()).unwrap();
        let b = model_gradcheck(&cfg, 9, &GradCheckOptions::default()).unwrap();
        let worst = |r: &[(String, GradCheckReport)]| -> Vec<(String, f64)> {
            r.iter().map(|(n, r)| (n.clone(), r.max_rel_err)).collect()
        };
        assert_eq!(worst(&a), worst(&b));
    }

    #[test]
    fn tiny_vocabulary_is_rejected() {
        let cfg = ModelConfig::tiny(3);
        assert!(model_gradcheck(&cfg, 1, &GradCheckOptions::default()).is_err());
    }
}
