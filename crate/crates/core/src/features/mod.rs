//! Acoustic feature extraction: 40 log mel filterbank energies plus a log
//! energy term, with delta and delta-delta channels, normalized per
//! dimension over the training set. Output tensors are (frequency 41 x
//! time T x channels 3), the encoder's input layout.

pub mod dsp;
pub mod io;
pub mod wav;

pub use wav::{read_wav, write_wav, Audio};

use crate::error::{Error, Result};

/// Front-end settings. Defaults match the 16 kHz, 25/10 ms, 40-filter
/// configuration used throughout.
#[derive(Debug, Clone)]
pub struct FeatureConfig {
    pub sample_rate: u32,
    pub frame_ms: usize,
    pub hop_ms: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_low: f64,
    pub f_high: f64,
    pub log_floor: f64,
    pub delta_window: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            sample_rate: 16000,
            frame_ms: 25,
            hop_ms: 10,
            n_fft: 512,
            n_mels: 40,
            f_low: 0.0,
            f_high: 8000.0,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl FeatureConfig {
    pub fn frame_len(&self) -> usize {
        self.sample_rate as usize * self.frame_ms / 1000
    }

    pub fn hop_len(&self) -> usize {
        self.sample_rate as usize * self.hop_ms / 1000
    }

    /// Static coefficients per frame (filters plus the energy term).
    pub fn n_static(&self) -> usize {
        self.n_mels + 1
    }
}

/// Features for one utterance, stored (f, t, c) row-major: channel 0 static,
/// channel 1 delta, channel 2 delta-delta.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub n_freq: usize,
    pub n_frames: usize,
    pub n_channels: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn at(&self, f: usize, t: usize, c: usize) -> f64 {
        self.data[(f * self.n_frames + t) * self.n_channels + c]
    }

    /// Flattened per-frame dimensionality (41 x 3 = 123 by default).
    pub fn frame_dim(&self) -> usize {
        self.n_freq * self.n_channels
    }

    /// The 123-dimensional vector for frame `t`, indexed `f * C + c`.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.frame_dim());
        for f in 0..self.n_freq {
            for c in 0..self.n_channels {
                v.push(self.at(f, t, c));
            }
        }
        v
    }
}

/// Runs the full pipeline: frame, window, periodogram, mel energies with
/// log floor, log total-power energy term, then delta and delta-delta.
pub fn featurize(audio: &Audio, cfg: &FeatureConfig) -> Result<FeatureTensor> {
    if audio.sample_rate != cfg.sample_rate {
        return Err(Error::Feature(format!(
            "sample rate {} Hz, config expects {}",
            audio.sample_rate, cfg.sample_rate
        )));
    }
    let frames = dsp::frame_signal(&audio.samples, cfg.frame_len(), cfg.hop_len())?;
    let spectra = dsp::power_spectrum(&frames, cfg.n_fft)?;
    let bank = dsp::MelBank::new(
        cfg.n_mels,
        cfg.n_fft,
        f64::from(cfg.sample_rate),
        cfg.f_low,
        cfg.f_high,
    )?;

    let log_floor = cfg.log_floor;
    let statics: Vec<Vec<f64>> = spectra
        .iter()
        .map(|spec| {
            let mut row: Vec<f64> = bank
                .apply(spec)
                .into_iter()
                .map(|e| e.max(log_floor).ln())
                .collect();
            let total: f64 = spec.iter().sum();
            row.push(total.max(log_floor).ln());
            row
        })
        .collect();

    let d1 = dsp::delta(&statics, cfg.delta_window);
    let d2 = dsp::delta(&d1, cfg.delta_window);

    let n_freq = cfg.n_static();
    let n_frames = statics.len();
    let n_channels = 3;
    let mut data = vec![0.0; n_freq * n_frames * n_channels];
    for f in 0..n_freq {
        for t in 0..n_frames {
            let base = (f * n_frames + t) * n_channels;
            data[base] = statics[t][f];
            data[base + 1] = d1[t][f];
            data[base + 2] = d2[t][f];
        }
    }
    Ok(FeatureTensor { n_freq, n_frames, n_channels, data })
}

/// Per-dimension mean and standard deviation over a training corpus.
/// Dimension index is `f * n_channels + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Smallest allowed standard deviation; constant dimensions normalize to 0.
pub const STD_FLOOR: f64 = 1e-10;

impl NormStats {
    /// Two-pass mean and population standard deviation over every frame of
    /// every tensor, in slice order (deterministic).
    pub fn compute(tensors: &[FeatureTensor]) -> Result<NormStats> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Feature("empty corpus for norm stats".into()))?;
        let dim = first.frame_dim();
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for t in tensors {
            if t.frame_dim() != dim {
                return Err(Error::Feature(format!(
                    "inconsistent feature dims: {} vs {dim}",
                    t.frame_dim()
                )));
            }
            for frame in 0..t.n_frames {
                for f in 0..t.n_freq {
                    for c in 0..t.n_channels {
                        mean[f * t.n_channels + c] += t.at(f, frame, c);
                    }
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Feature("corpus has no frames".into()));
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut var = vec![0.0; dim];
        for t in tensors {
            for frame in 0..t.n_frames {
                for f in 0..t.n_freq {
                    for c in 0..t.n_channels {
                        let d = f * t.n_channels + c;
                        let diff = t.at(f, frame, c) - mean[d];
                        var[d] += diff * diff;
                    }
                }
            }
        }
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(NormStats { mean, std })
    }

    /// Normalizes a tensor in place.
    pub fn apply(&self, t: &mut FeatureTensor) -> Result<()> {
        if self.mean.len() != t.frame_dim() {
            return Err(Error::Feature(format!(
                "stats have {} dims, tensor has {}",
                self.mean.len(),
                t.frame_dim()
            )));
        }
        let (nf, nt, nc) = (t.n_freq, t.n_frames, t.n_channels);
        for f in 0..nf {
            for frame in 0..nt {
                for c in 0..nc {
                    let d = f * nc + c;
                    let i = (f * nt + frame) * nc + c;
                    t.data[i] = (t.data[i] - self.mean[d]) / self.std[d];
                }
            }
        }
        Ok(())
    }
}
