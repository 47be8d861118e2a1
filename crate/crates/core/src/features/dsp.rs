//! Signal processing for the feature front end: framing, windowing,
//! periodogram, mel filterbank, and delta coefficients.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Cuts the signal into overlapping frames and applies a Hamming window.
/// Frame `t` starts at `t * hop`; the count is `1 + (len - frame_len) / hop`.
pub fn frame_signal(samples: &[f64], frame_len: usize, hop: usize) -> Result<Vec<Vec<f64>>> {
    if samples.len() < frame_len {
        return Err(Error::Feature(format!(
            "audio too short: {} samples, need at least {frame_len}",
            samples.len()
        )));
    }
    let window = hamming(frame_len);
    let count = 1 + (samples.len() - frame_len) / hop;
    let mut frames = Vec::with_capacity(count);
    for t in 0..count {
        let start = t * hop;
        frames.push(
            samples[start..start + frame_len]
                .iter()
                .zip(&window)
                .map(|(s, w)| s * w)
                .collect(),
        );
    }
    Ok(frames)
}

/// Periodogram estimate per frame: `|FFT|^2 / nfft` over the non-negative
/// frequency bins, so each row has `nfft/2 + 1` entries.
pub fn power_spectrum(frames: &[Vec<f64>], n_fft: usize) -> Result<Vec<Vec<f64>>> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n_fft);
    let bins = n_fft / 2 + 1;
    let mut out = Vec::with_capacity(frames.len());
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    for frame in frames {
        if frame.len() > n_fft {
            return Err(Error::Feature(format!(
                "frame of {} samples exceeds nfft {n_fft}",
                frame.len()
            )));
        }
        for (b, s) in buf.iter_mut().zip(frame) {
            *b = Complex::new(*s, 0.0);
        }
        for b in buf.iter_mut().skip(frame.len()) {
            *b = Complex::new(0.0, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..bins].iter().map(|c| c.norm_sqr() / n_fft as f64).collect());
    }
    Ok(out)
}

/// Frequency in Hz to mel.
pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Mel back to Hz.
pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Bank of triangular filters uniformly spaced on the mel scale and
/// evaluated at FFT-bin center frequencies.
pub struct MelBank {
    /// Per filter, (bin index, weight) for its nonzero bins.
    filters: Vec<Vec<(usize, f64)>>,
    bins: usize,
}

impl MelBank {
    pub fn new(
        n_filters: usize,
        n_fft: usize,
        sample_rate: f64,
        f_low: f64,
        f_high: f64,
    ) -> Result<Self> {
        if !(0.0 <= f_low && f_low < f_high && f_high <= sample_rate / 2.0) {
            return Err(Error::Feature(format!(
                "invalid mel band edges {f_low}..{f_high} at {sample_rate} Hz"
            )));
        }
        let (mel_lo, mel_hi) = (hz_to_mel(f_low), hz_to_mel(f_high));
        let edges: Vec<f64> = (0..n_filters + 2)
            .map(|j| mel_to_hz(mel_lo + (mel_hi - mel_lo) * j as f64 / (n_filters + 1) as f64))
            .collect();
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate / n_fft as f64;
        let mut filters = Vec::with_capacity(n_filters);
        for m in 1..=n_filters {
            let (l, c, r) = (edges[m - 1], edges[m], edges[m + 1]);
            let mut taps = Vec::new();
            for k in 0..bins {
                let f = k as f64 * bin_hz;
                let w = if f > l && f < c {
                    (f - l) / (c - l)
                } else if (f - c).abs() < f64::EPSILON {
                    1.0
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                if w > 0.0 {
                    taps.push((k, w));
                }
            }
            if taps.is_empty() {
                return Err(Error::Feature(format!(
                    "mel filter {m} catches no FFT bin; increase nfft or widen the band"
                )));
            }
            filters.push(taps);
        }
        Ok(MelBank { filters, bins })
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    /// Filter energies for one power-spectrum row.
    pub fn apply(&self, spectrum: &[f64]) -> Vec<f64> {
        debug_assert_eq!(spectrum.len(), self.bins);
        self.filters
            .iter()
            .map(|taps| taps.iter().map(|&(k, w)| w * spectrum[k]).sum())
            .collect()
    }

    /// Total weight each bin receives across all filters (diagnostics).
    pub fn bin_coverage(&self) -> Vec<f64> {
        let mut cover = vec![0.0; self.bins];
        for taps in &self.filters {
            for &(k, w) in taps {
                cover[k] += w;
            }
        }
        cover
    }

    /// Center frequency of each filter in Hz.
    pub fn centers(&self, f_low: f64, f_high: f64) -> Vec<f64> {
        let n = self.filters.len();
        let (mel_lo, mel_hi) = (hz_to_mel(f_low), hz_to_mel(f_high));
        (1..=n)
            .map(|j| mel_to_hz(mel_lo + (mel_hi - mel_lo) * j as f64 / (n + 1) as f64))
            .collect()
    }
}

/// Delta coefficients with window `n` and replicated edges:
/// `d_t = sum_{i=1..n} i * (c_{t+i} - c_{t-i}) / (2 * sum i^2)`.
pub fn delta(c: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let t_len = c.len();
    if t_len == 0 {
        return Vec::new();
    }
    let dim = c[0].len();
    let denom: f64 = 2.0 * (1..=n).map(|i| (i * i) as f64).sum::<f64>();
    let at = |t: isize| -> &Vec<f64> { &c[t.clamp(0, t_len as isize - 1) as usize] };
    let mut out = Vec::with_capacity(t_len);
    for t in 0..t_len as isize {
        let mut row = vec![0.0; dim];
        for i in 1..=n as isize {
            let (fw, bw) = (at(t + i), at(t - i));
            for d in 0..dim {
                row[d] += i as f64 * (fw[d] - bw[d]);
            }
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
        out.push(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_count_for_one_second() {
        // 16 kHz, 1.0 s, 25 ms frames at 10 ms hop: 1 + (16000-400)/160 = 98.
        let samples = vec![0.1; 16000];
        let frames = frame_signal(&samples, 400, 160).unwrap();
        assert_eq!(frames.len(), 98);
        assert_eq!(frames[0].len(), 400);
    }

    #[test]
    fn frame_boundaries() {
        assert_eq!(frame_signal(&vec![0.0; 400], 400, 160).unwrap().len(), 1);
        assert!(frame_signal(&vec![0.0; 399], 400, 160).is_err());
    }

    #[test]
    fn hamming_shape() {
        let w = hamming(400);
        assert!((w[0] - 0.08).abs() < 1e-12);
        assert!((w[399] - 0.08).abs() < 1e-12);
        for i in 0..200 {
            assert!((w[i] - w[399 - i]).abs() < 1e-12, "window not symmetric at {i}");
        }
        assert!(w[199] > 0.99);
    }

    #[test]
    fn power_spectrum_matches_naive_dft() {
        let frame: Vec<f64> = (0..8).map(|i| (f64::from(i) * 0.9).sin() + 0.3).collect();
        let spec = power_spectrum(&[frame.clone()], 8).unwrap();
        for (k, &got) in spec[0].iter().enumerate() {
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &x) in frame.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (k * n) as f64 / 8.0;
                re += x * ang.cos();
                im += x * ang.sin();
            }
            let want = (re * re + im * im) / 8.0;
            assert!((got - want).abs() < 1e-10, "bin {k}: {got} vs {want}");
        }
    }

    #[test]
    fn power_spectrum_satisfies_parseval() {
        let frame: Vec<f64> = (0..32).map(|i| (f64::from(i) * 0.37).cos() * 0.5).collect();
        let n_fft = 32;
        let spec = &power_spectrum(&[frame.clone()], n_fft).unwrap()[0];
        let half: f64 = spec[0]
            + spec[n_fft / 2]
            + 2.0 * spec[1..n_fft / 2].iter().sum::<f64>();
        let time: f64 = frame.iter().map(|x| x * x).sum();
        assert!((half - time).abs() < 1e-10);
    }

    #[test]
    fn zero_frame_gives_zero_spectrum() {
        let spec = power_spectrum(&[vec![0.0; 16]], 16).unwrap();
        assert!(spec[0].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn constant_frame_concentrates_in_dc() {
        let spec = &power_spectrum(&[vec![0.7; 16]], 16).unwrap()[0];
        assert!(spec[0] > 1.0);
        assert!(spec[1..].iter().all(|&p| p < 1e-20));
    }

    #[test]
    fn sinusoid_at_bin_center_peaks_there() {
        // Bin 4 of a 64-point FFT at unit rate: frequency 4/64 cycles/sample.
        let n = 64;
        let frame: Vec<f64> = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * 4.0 * i as f64 / n as f64).cos())
            .collect();
        let spec = &power_spectrum(&[frame], n).unwrap()[0];
        let argmax = spec
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(argmax, 4);
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 120.0, 1000.0, 4350.5, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
        // Known landmark: 1000 Hz is very nearly 1000 mel.
        assert!((hz_to_mel(1000.0) - 999.99).abs() < 0.01);
    }

    #[test]
    fn mel_bank_covers_every_filter() {
        let bank = MelBank::new(40, 512, 16000.0, 0.0, 8000.0).unwrap();
        assert_eq!(bank.n_filters(), 40);
        let flat = vec![1.0; 257];
        let resp = bank.apply(&flat);
        assert!(resp.iter().all(|&e| e > 0.0), "some filter caught no bin");
    }

    #[test]
    fn mel_bank_zero_spectrum() {
        let bank = MelBank::new(40, 512, 16000.0, 0.0, 8000.0).unwrap();
        assert!(bank.apply(&vec![0.0; 257]).iter().all(|&e| e == 0.0));
    }

    #[test]
    fn adjacent_filters_sum_to_one_between_centers() {
        // Triangles share denominators, so between the first and last center
        // the total weight on any bin is exactly 1.
        let bank = MelBank::new(40, 512, 16000.0, 0.0, 8000.0).unwrap();
        let cover = bank.bin_coverage();
        let centers = bank.centers(0.0, 8000.0);
        let bin_hz = 16000.0 / 512.0;
        let (first, last) = (centers[0], centers[39]);
        for (k, &c) in cover.iter().enumerate() {
            let f = k as f64 * bin_hz;
            if f > first && f < last {
                assert!((c - 1.0).abs() < 1e-9, "bin {k} at {f} Hz has coverage {c}");
            }
        }
    }

    #[test]
    fn spectral_spike_lands_in_matching_filter() {
        let bank = MelBank::new(40, 512, 16000.0, 0.0, 8000.0).unwrap();
        let centers = bank.centers(0.0, 8000.0);
        let bin_hz = 16000.0 / 512.0;
        for target in [5, 20, 35] {
            let bin = (centers[target] / bin_hz).round() as usize;
            let mut spec = vec![0.0; 257];
            spec[bin] = 1.0;
            let resp = bank.apply(&spec);
            let argmax = resp.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, target, "spike at filter {target} center");
        }
    }

    #[test]
    fn mel_bank_rejects_bad_edges() {
        assert!(MelBank::new(40, 512, 16000.0, 100.0, 50.0).is_err());
        assert!(MelBank::new(40, 512, 16000.0, 0.0, 9000.0).is_err());
    }

    #[test]
    fn delta_of_constant_is_zero() {
        let c = vec![vec![3.5, -1.0]; 7];
        let d = delta(&c, 2);
        assert!(d.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn delta_of_ramp_is_slope_in_interior() {
        let c: Vec<Vec<f64>> = (0..9).map(|t| vec![f64::from(t)]).collect();
        let d = delta(&c, 2);
        for t in 2..7 {
            assert!((d[t][0] - 1.0).abs() < 1e-12, "t={t}: {}", d[t][0]);
        }
    }

    #[test]
    fn delta_hand_values() {
        // c = [1, 2, 3] with replicated edges and N = 2:
        // d_0 = (1*(2-1) + 2*(3-1))/10 = 0.5
        // d_1 = (1*(3-1) + 2*(3-1))/10 = 0.6
        // d_2 = (1*(3-2) + 2*(3-1))/10 = 0.5
        let c = vec![vec![1.0], vec![2.0], vec![3.0]];
        let d = delta(&c, 2);
        assert!((d[0][0] - 0.5).abs() < 1e-12);
        assert!((d[1][0] - 0.6).abs() < 1e-12);
        assert!((d[2][0] - 0.5).abs() < 1e-12);
        // c = [0, 1, 0]: center delta cancels exactly.
        let c2 = vec![vec![0.0], vec![1.0], vec![0.0]];
        assert_eq!(delta(&c2, 2)[1][0], 0.0);
    }

    #[test]
    fn delta_is_linear() {
        let c1: Vec<Vec<f64>> = (0..6).map(|t| vec![(f64::from(t) * 1.3).sin()]).collect();
        let c2: Vec<Vec<f64>> = (0..6).map(|t| vec![(f64::from(t) * 0.7).cos()]).collect();
        let a = 2.5;
        let combo: Vec<Vec<f64>> = c1
            .iter()
            .zip(&c2)
            .map(|(x, y)| vec![a * x[0] + y[0]])
            .collect();
        let d1 = delta(&c1, 2);
        let d2 = delta(&c2, 2);
        let dc = delta(&combo, 2);
        for t in 0..6 {
            assert!((dc[t][0] - (a * d1[t][0] + d2[t][0])).abs() < 1e-12);
        }
    }
}
