//! Synthetic transduction corpora. Each symbol renders as a fixed random
//! 41-frequency, 3-frame, 3-channel pattern; an utterance is the patterns of
//! its symbols laid end to end plus Gaussian noise. Targets are the symbol
//! string itself, its reverse, or a fixed substitution of it.

use std::path::Path;

use rand::distributions::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;

use super::{Manifest, Record, Split, Vocab};
use crate::error::{Error, Result};
use crate::features::io::write_features;
use crate::features::FeatureTensor;
use crate::rng::{stream_rng, Stream};

pub const FRAMES_PER_SYMBOL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    Copy,
    Reverse,
    Blockmap,
}

impl SynthKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(SynthKind::Copy),
            "reverse" => Ok(SynthKind::Reverse),
            "blockmap" => Ok(SynthKind::Blockmap),
            other => Err(Error::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub kind: SynthKind,
    /// Number of distinct symbols (labels "s0", "s1", ...).
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Standard deviation of the additive feature noise.
    pub noise: f64,
    pub seed: u64,
    pub n_freq: usize,
    pub n_channels: usize,
}

impl SynthSpec {
    pub fn new(kind: SynthKind, vocab_size: usize, seed: u64) -> Self {
        SynthSpec {
            kind,
            vocab_size,
            min_len: 3,
            max_len: 6,
            n_train: 200,
            n_dev: 50,
            n_test: 0,
            noise: 0.05,
            seed,
            n_freq: 41,
            n_channels: 3,
        }
    }
}

/// A generated corpus: manifest plus the generator's internals, kept so
/// tests can verify the rendering against its own oracle.
pub struct SynthCorpus {
    pub manifest: Manifest,
    pub vocab: Vocab,
    /// Per-symbol rendering pattern, each `n_freq * 3 * n_channels` long.
    pub patterns: Vec<Vec<f64>>,
    /// Symbol substitution used by the blockmap task.
    pub block_map: Vec<usize>,
}

/// Generates feature files under `out_dir` and returns the corpus. The same
/// (spec, out_dir) always produces identical bytes.
pub fn synth_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<SynthCorpus> {
    if spec.vocab_size < 2 {
        return Err(Error::Config("synthetic vocabulary needs at least 2 symbols".into()));
    }
    if spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(format!(
            "bad synthetic length range {}..={}",
            spec.min_len, spec.max_len
        )));
    }
    if spec.n_train == 0 {
        return Err(Error::Config("synthetic corpus needs at least 1 training utterance".into()));
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;

    let mut rng = stream_rng(spec.seed, Stream::Synth);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let pattern_len = spec.n_freq * FRAMES_PER_SYMBOL * spec.n_channels;
    let patterns: Vec<Vec<f64>> = (0..spec.vocab_size)
        .map(|_| (0..pattern_len).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let mut block_map: Vec<usize> = (0..spec.vocab_size).collect();
    block_map.shuffle(&mut rng);

    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|_| {
        Error::Config(format!("bad synthetic noise level {}", spec.noise))
    })?;
    let vocab = Vocab::from_labels((0..spec.vocab_size).map(|i| format!("s{i}")))?;

    let mut records = Vec::new();
    let splits = [
        (Split::Train, spec.n_train),
        (Split::Dev, spec.n_dev),
        (Split::Test, spec.n_test),
    ];
    for (split, count) in splits {
        for i in 0..count {
            let len = rng.gen_range(spec.min_len..=spec.max_len);
            let symbols: Vec<usize> =
                (0..len).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
            let mut tensor = render(&symbols, &patterns, spec);
            if spec.noise > 0.0 {
                for v in &mut tensor.data {
                    *v += noise.sample(&mut rng);
                }
            }
            let id = format!("{split}-{i:05}");
            let path = out_dir.join(format!("{id}.ften"));
            write_features(&path, &tensor)?;
            let labels = match spec.kind {
                SynthKind::Copy => symbols,
                SynthKind::Reverse => symbols.into_iter().rev().collect(),
                SynthKind::Blockmap => symbols.into_iter().map(|s| block_map[s]).collect(),
            };
            records.push(Record { id, path, split, labels });
        }
    }
    Ok(SynthCorpus { manifest: Manifest { records }, vocab, patterns, block_map })
}

fn render(symbols: &[usize], patterns: &[Vec<f64>], spec: &SynthSpec) -> FeatureTensor {
    let (f, c) = (spec.n_freq, spec.n_channels);
    let frames = symbols.len() * FRAMES_PER_SYMBOL;
    let mut data = vec![0.0; f * frames * c];
    for (s, &sym) in symbols.iter().enumerate() {
        let p = &patterns[sym];
        for fi in 0..f {
            for fr in 0..FRAMES_PER_SYMBOL {
                let t = s * FRAMES_PER_SYMBOL + fr;
                for ch in 0..c {
                    data[(fi * frames + t) * c + ch] =
                        p[(fi * FRAMES_PER_SYMBOL + fr) * c + ch];
                }
            }
        }
    }
    FeatureTensor { n_freq: f, n_frames: frames, n_channels: c, data }
}

/// Oracle for the generator: reads each 3-frame block and picks the symbol
/// whose pattern is nearest in squared distance.
pub fn nearest_pattern_decode(tensor: &FeatureTensor, patterns: &[Vec<f64>]) -> Vec<usize> {
    let (f, c) = (tensor.n_freq, tensor.n_channels);
    let frames = tensor.n_frames;
    let n_sym = frames / FRAMES_PER_SYMBOL;
    let mut out = Vec::with_capacity(n_sym);
    for s in 0..n_sym {
        let mut best = (f64::INFINITY, 0usize);
        for (sym, p) in patterns.iter().enumerate() {
            let mut dist = 0.0;
            for fi in 0..f {
                for fr in 0..FRAMES_PER_SYMBOL {
                    let t = s * FRAMES_PER_SYMBOL + fr;
                    for ch in 0..c {
                        let d = tensor.data[(fi * frames + t) * c + ch]
                            - p[(fi * FRAMES_PER_SYMBOL + fr) * c + ch];
                        dist += d * d;
                    }
                }
            }
            if dist < best.0 {
                best = (dist, sym);
            }
        }
        out.push(best.1);
    }
    out
}
