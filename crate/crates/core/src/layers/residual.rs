use rand::RngCore;

use super::{BatchNorm, Conv2d, Dropout, HasParams, Mode, Param};
use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::kernels::Padding;

/// Residual block: two rounds of conv 3x3 (stride 1, same padding), batch
/// norm, relu, dropout, added back onto the input. When the channel counts
/// differ the skip goes through a 1x1 projection so the addition lines up.
pub struct ResidualBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    proj: Option<Conv2d>,
    dropout: Dropout,
}

impl ResidualBlock {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        out_channels: usize,
        keep_prob: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let conv = |name: &str, c_in, rng: &mut dyn RngCore| {
            Conv2d::new(
                &format!("{prefix}.{name}"),
                c_in,
                out_channels,
                (3, 3),
                (1, 1),
                Padding::Same,
                rng,
            )
        };
        let proj = (in_channels != out_channels).then(|| {
            Conv2d::new(
                &format!("{prefix}.proj"),
                in_channels,
                out_channels,
                (1, 1),
                (1, 1),
                Padding::Same,
                rng,
            )
        });
        ResidualBlock {
            conv1: conv("conv1", in_channels, rng),
            bn1: BatchNorm::new(&format!("{prefix}.bn1"), out_channels),
            conv2: conv("conv2", out_channels, rng),
            bn2: BatchNorm::new(&format!("{prefix}.bn2"), out_channels),
            proj,
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
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        let y = self.dropout.forward(tape, y, mode, rng)?;
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let y = tape.relu(y)?;
        let y = self.dropout.forward(tape, y, mode, rng)?;
        let skip = match &self.proj {
            Some(p) => p.forward(tape, x)?,
            None => x,
        };
        tape.add(skip, y)
    }
}

impl HasParams for ResidualBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some(p) = &self.proj {
            p.visit_params(f);
        }
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some(p) = &mut self.proj {
            p.visit_params_mut(f);
        }
    }
    fn visit_state(&self, f: &mut dyn FnMut(&str, &[f64])) {
        self.bn1.visit_state(f);
        self.bn2.visit_state(f);
    }
    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, &mut Vec<f64>)) {
        self.bn1.visit_state_mut(f);
        self.bn2.visit_state_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, Stream};

    #[test]
    fn zeroed_branch_reduces_to_identity() {
        let mut rng = stream_rng(51, Stream::Init);
        let mut block = ResidualBlock::new("r", 3, 3, 1.0, &mut rng);
        block.visit_params_mut(&mut |p| p.values.iter_mut().for_each(|v| *v = 0.0));
        let data: Vec<f64> = (0..2 * 4 * 5 * 3).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut t = Tape::new();
        let x = t.constant(data.clone(), &[2, 4, 5, 3]).unwrap();
        let mut dr = stream_rng(51, Stream::Dropout);
        let y = block.forward(&mut t, x, Mode::Train, &mut dr).unwrap();
        assert_eq!(t.value(y), data.as_slice());
        assert_eq!(t.shape(y), &[2, 4, 5, 3]);
    }

    #[test]
    fn channel_change_uses_projection_and_keeps_grid() {
        let mut rng = stream_rng(52, Stream::Init);
        let mut block = ResidualBlock::new("r", 5, 3, 1.0, &mut rng);
        let mut n_params = 0;
        block.visit_params(&mut |_| n_params += 1);
        // Two convs, two batch norms, and the 1x1 projection.
        assert_eq!(n_params, 2 * 2 + 2 * 2 + 2);

        let data: Vec<f64> = (0..2 * 4 * 6 * 5).map(|i| (i as f64 * 0.07).cos()).collect();
        let mut t = Tape::new();
        let x = t.constant(data, &[2, 4, 6, 5]).unwrap();
        let mut dr = stream_rng(52, Stream::Dropout);
        let y = block.forward(&mut t, x, Mode::Train, &mut dr).unwrap();
        assert_eq!(t.shape(y), &[2, 4, 6, 3]);
    }

    #[test]
    fn gradient_flows_through_skip_when_branch_is_dead() {
        let mut rng = stream_rng(53, Stream::Init);
        let mut block = ResidualBlock::new("r", 2, 2, 1.0, &mut rng);
        block.visit_params_mut(&mut |p| p.values.iter_mut().for_each(|v| *v = 0.0));
        let mut t = Tape::new();
        let data: Vec<f64> = (0..2 * 3 * 3 * 2).map(|i| i as f64 * 0.1 - 1.0).collect();
        let x = t.leaf(data, &[2, 3, 3, 2]).unwrap();
        let mut dr = stream_rng(53, Stream::Dropout);
        let y = block.forward(&mut t, x, Mode::Train, &mut dr).unwrap();
        let loss = t.sum_all(y).unwrap();
        t.backward(loss).unwrap();
        let gx = t.grad(x).unwrap();
        for g in gx {
            assert!((g - 1.0).abs() < 1e-12, "{g}");
        }
    }
}
