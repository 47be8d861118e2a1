use super::{HasParams, Mode, Param};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-8;

/// Batch normalization over the trailing channel dimension. All leading
/// dimensions pool into the per-channel statistics, so a rank-4 conv tensor
/// normalizes over batch and both spatial axes at once.
///
/// Train mode uses batch statistics and folds them into running averages
/// with momentum [`BN_MOMENTUM`]; infer mode applies the running averages.
pub struct BatchNorm {
    gamma: Param,
    beta: Param,
    mean_name: String,
    var_name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{prefix}.gamma"), &[channels], vec![1.0; channels]),
            beta: Param::zeros(format!("{prefix}.beta"), &[channels]),
            mean_name: format!("{prefix}.running_mean"),
            var_name: format!("{prefix}.running_var"),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.values.len()
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var, mode: Mode) -> Result<Var> {
        let gamma = self.gamma.bind(tape)?;
        let beta = self.beta.bind(tape)?;
        match mode {
            Mode::Train => {
                let ch = self.channels();
                let rows = tape.value(x).len() / ch;
                if rows < 2 {
                    return Err(Error::Data(format!(
                        "batch norm needs at least 2 positions per channel in train mode, got {rows}"
                    )));
                }
                let (y, mean, var) = tape.batchnorm_train(x, gamma, beta, self.eps)?;
                for c in 0..ch {
                    self.running_mean[c] =
                        self.momentum * self.running_mean[c] + (1.0 - self.momentum) * mean[c];
                    self.running_var[c] =
                        self.momentum * self.running_var[c] + (1.0 - self.momentum) * var[c];
                }
                Ok(y)
            }
            Mode::Infer => tape.batchnorm_infer(
                x,
                gamma,
                beta,
                &self.running_mean,
                &self.running_var,
                self.eps,
            ),
        }
    }
}

impl HasParams for BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f(&self.mean_name, &self.running_mean);
        f(&self.var_name, &self.running_var);
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        f(&self.mean_name, &mut self.running_mean);
        f(&self.var_name, &mut self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_batch_maps_to_beta() {
        let mut bn = BatchNorm::new("bn", 1);
        bn.visit_params_mut(&mut |p| {
            if p.name.ends_with(".beta") {
                p.values = vec![5.0];
            }
        });
        let mut t = Tape::new();
        let x = t.constant(vec![7.0, 7.0, 7.0], &[3, 1]).unwrap();
        let y = bn.forward(&mut t, x, Mode::Train).unwrap();
        for v in t.value(y) {
            assert!((v - 5.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn two_point_batch_standardizes_to_unit_spread() {
        let mut bn = BatchNorm::new("bn", 1);
        bn.eps = 0.0;
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 3.0], &[2, 1]).unwrap();
        let y = bn.forward(&mut t, x, Mode::Train).unwrap();
        let got = t.value(y);
        assert!((got[0] + 1.0).abs() < 1e-12 && (got[1] - 1.0).abs() < 1e-12, "{got:?}");
    }

    #[test]
    fn train_mode_rejects_single_row() {
        let mut bn = BatchNorm::new("bn", 2);
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        assert!(bn.forward(&mut t, x, Mode::Train).is_err());
    }

    #[test]
    fn fresh_layer_infer_is_near_identity() {
        let mut bn = BatchNorm::new("bn", 2);
        let mut t = Tape::new();
        let x = t.constant(vec![0.4, -1.2], &[1, 2]).unwrap();
        let y = bn.forward(&mut t, x, Mode::Infer).unwrap();
        for (a, b) in t.value(y).iter().zip(t.value(x)) {
            assert!((a - b).abs() < 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn running_stats_track_batch_stats() {
        let mut bn = BatchNorm::new("bn", 1);
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 3.0], &[2, 1]).unwrap();
        bn.forward(&mut t, x, Mode::Train).unwrap();
        // One step of EMA from (0, 1) toward batch mean 2 and population var 1.
        assert!((bn.running_mean[0] - 0.01 * 2.0).abs() < 1e-12);
        assert!((bn.running_var[0] - (0.99 + 0.01 * 1.0)).abs() < 1e-12);
    }

    #[test]
    fn conv_tensor_pools_batch_and_spatial_positions() {
        let mut bn = BatchNorm::new("bn", 2);
        bn.eps = 0.0;
        // [batch=2, f=1, t=2, c=2]: channel 0 sees {0,2,4,6}, channel 1 {1,5,9,13}.
        let data = vec![0.0, 1.0, 2.0, 5.0, 4.0, 9.0, 6.0, 13.0];
        let mut t = Tape::new();
        let x = t.constant(data.clone(), &[2, 1, 2, 2]).unwrap();
        let y = bn.forward(&mut t, x, Mode::Train).unwrap();
        // Channel 0: mean 3, var 5. Channel 1: mean 7, var 20.
        let (m, s) = (3.0, 5.0f64.sqrt());
        let (m1, s1) = (7.0, 20.0f64.sqrt());
        for (i, v) in t.value(y).iter().enumerate() {
            let expect = if i % 2 == 0 { (data[i] - m) / s } else { (data[i] - m1) / s1 };
            assert!((v - expect).abs() < 1e-12, "pos {i}: {v} vs {expect}");
        }
    }
}
