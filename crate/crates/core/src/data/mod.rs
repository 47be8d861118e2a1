//! Corpus plumbing: vocabulary and manifest files, padded batches, and a
//! synthetic transduction corpus for desk-scale end-to-end runs.

mod synth;

pub use synth::{nearest_pattern_decode, synth_corpus, SynthCorpus, SynthKind, SynthSpec};

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::features::io::{read_feature_dims, read_features};
use crate::features::NormStats;

/// Label inventory. Line number in the vocabulary file is the label id; the
/// id one past the last line is reserved for the end-of-sequence symbol.
#[derive(Debug, Clone)]
pub struct Vocab {
    labels: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_labels<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Data("vocabulary has no labels".into()));
        }
        let mut index = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if l.is_empty() || l.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("bad vocabulary label {l:?} at line {i}")));
            }
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary label {l}")));
            }
        }
        Ok(Vocab { labels, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Vocab::from_labels(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.labels.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    /// End-of-sequence id, one past the listed labels.
    pub fn eos(&self) -> usize {
        self.labels.len()
    }

    /// Model vocabulary size including end-of-sequence.
    pub fn size(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split tag {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub path: PathBuf,
    pub split: Split,
    pub labels: Vec<usize>,
}

/// Tab-separated corpus manifest:
/// `id <tab> feature_path <tab> split <tab> space-separated labels`.
/// Relative feature paths resolve against the manifest's directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn load(path: &Path, vocab: &Vocab) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let loc = || format!("{}:{}", path.display(), lineno + 1);
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!(
                    "{}: expected 4 tab-separated fields, got {}",
                    loc(),
                    fields.len()
                )));
            }
            let id = fields[0].to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::Data(format!("{}: duplicate utterance id {id}", loc())));
            }
            let feat_path = {
                let p = Path::new(fields[1]);
                if p.is_absolute() { p.to_path_buf() } else { base.join(p) }
            };
            if !feat_path.is_file() {
                return Err(Error::Data(format!(
                    "{}: feature file {} does not exist",
                    loc(),
                    feat_path.display()
                )));
            }
            let split = Split::parse(fields[2])
                .map_err(|e| Error::Data(format!("{}: {e}", loc())))?;
            let mut labels = Vec::new();
            for tok in fields[3].split_whitespace() {
                match vocab.id(tok) {
                    Some(id) => labels.push(id),
                    None => {
                        return Err(Error::Data(format!(
                            "{}: label {tok:?} is not in the vocabulary",
                            loc()
                        )))
                    }
                }
            }
            if labels.is_empty() {
                return Err(Error::Data(format!("{}: empty transcript", loc())));
            }
            records.push(Record { id, path: feat_path, split, labels });
        }
        if records.is_empty() {
            return Err(Error::Data(format!("{}: empty manifest", path.display())));
        }
        Ok(Manifest { records })
    }

    pub fn save(&self, path: &Path, vocab: &Vocab) -> Result<()> {
        let mut text = String::new();
        for r in &self.records {
            let labels: Vec<&str> = r
                .labels
                .iter()
                .map(|&id| vocab.label(id).expect("label id in vocab"))
                .collect();
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.id,
                r.path.display(),
                r.split,
                labels.join(" ")
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }
}

/// One padded training batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[B, n_freq, t_max, n_channels]`, zero-padded past each length.
    pub features: Vec<f64>,
    pub shape: [usize; 4],
    pub feat_lens: Vec<usize>,
    pub targets: Vec<Vec<usize>>,
}

/// Loads and pads a batch of records, applying normalization when given.
pub fn batch_from_records(records: &[&Record], norm: Option<&NormStats>) -> Result<Batch> {
    if records.is_empty() {
        return Err(Error::Data("cannot build an empty batch".into()));
    }
    let mut tensors = Vec::with_capacity(records.len());
    for r in records {
        let mut t = read_features(&r.path)?;
        if let Some(norm) = norm {
            norm.apply(&mut t)?;
        }
        tensors.push(t);
    }
    let (f, c) = (tensors[0].n_freq, tensors[0].n_channels);
    for (r, t) in records.iter().zip(&tensors) {
        if t.n_freq != f || t.n_channels != c {
            return Err(Error::Data(format!(
                "{}: feature dims {}x{} differ from batch dims {f}x{c}",
                r.id, t.n_freq, t.n_channels
            )));
        }
        if t.n_frames == 0 {
            return Err(Error::Data(format!("{}: zero-length feature tensor", r.id)));
        }
    }
    let b = records.len();
    let t_max = tensors.iter().map(|t| t.n_frames).max().unwrap();
    let mut features = vec![0.0; b * f * t_max * c];
    for (bi, t) in tensors.iter().enumerate() {
        for fi in 0..f {
            for ti in 0..t.n_frames {
                let src = (fi * t.n_frames + ti) * c;
                let dst = ((bi * f + fi) * t_max + ti) * c;
                features[dst..dst + c].copy_from_slice(&t.data[src..src + c]);
            }
        }
    }
    Ok(Batch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        features,
        shape: [b, f, t_max, c],
        feat_lens: tensors.iter().map(|t| t.n_frames).collect(),
        targets: records.iter().map(|r| r.labels.clone()).collect(),
    })
}

/// Groups records into batches for one epoch: seeded shuffle, then a stable
/// sort by feature length so batches hold similar lengths, then a shuffle of
/// the batch order. The final short batch is kept. Returns index groups.
pub fn plan_batches(
    lens: &[usize],
    batch_size: usize,
    rng: &mut dyn RngCore,
) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lens[i]);
    let mut batches: Vec<Vec<usize>> =
        order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

/// Reads the frame count of every record's feature file.
pub fn feature_lengths(records: &[&Record]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| read_feature_dims(&r.path).map(|(_, t, _)| t))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTensor;
    use crate::rng::{stream_rng, Stream};

    fn tensor(f: usize, t: usize, c: usize, fill: f64) -> FeatureTensor {
        FeatureTensor {
            n_freq: f,
            n_frames: t,
            n_channels: c,
            data: (0..f * t * c).map(|i| fill + i as f64).collect(),
        }
    }

    fn write_corpus(dir: &Path, frames: &[usize]) -> (PathBuf, Vocab) {
        let vocab = Vocab::from_labels(["a", "b", "c"]).unwrap();
        let mut lines = String::new();
        for (i, &t) in frames.iter().enumerate() {
            let p = dir.join(format!("u{i}.ften"));
            crate::features::io::write_features(&p, &tensor(2, t, 1, i as f64)).unwrap();
            let split = if i % 4 == 3 { "dev" } else { "train" };
            lines.push_str(&format!("u{i}\tu{i}.ften\t{split}\ta b\n"));
        }
        let mpath = dir.join("manifest.tsv");
        std::fs::write(&mpath, lines).unwrap();
        (mpath, vocab)
    }

    #[test]
    fn vocab_assigns_line_numbers_and_reserves_eos() {
        let v = Vocab::from_labels(["aa", "ae", "sil"]).unwrap();
        assert_eq!(v.id("ae"), Some(1));
        assert_eq!(v.label(2), Some("sil"));
        assert_eq!(v.eos(), 3);
        assert_eq!(v.size(), 4);
        assert_eq!(v.id("zz"), None);
    }

    #[test]
    fn vocab_round_trips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = Vocab::from_labels(["x", "y"]).unwrap();
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back.labels(), v.labels());
    }

    #[test]
    fn vocab_rejects_duplicates() {
        assert!(Vocab::from_labels(["a", "a"]).is_err());
    }

    #[test]
    fn manifest_loads_valid_records() {
        let dir = tempfile::tempdir().unwrap();
        let (mpath, vocab) = write_corpus(dir.path(), &[4, 6, 5, 7]);
        let m = Manifest::load(&mpath, &vocab).unwrap();
        assert_eq!(m.records.len(), 4);
        assert_eq!(m.split(Split::Train).len(), 3);
        assert_eq!(m.split(Split::Dev).len(), 1);
        assert_eq!(m.records[0].labels, vec![0, 1]);
    }

    #[test]
    fn manifest_rejects_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "").unwrap();
        let vocab = Vocab::from_labels(["a"]).unwrap();
        let err = Manifest::load(&p, &vocab).unwrap_err();
        assert!(err.to_string().contains("empty manifest"), "{err}");
    }

    #[test]
    fn manifest_rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        let (mpath, vocab) = write_corpus(dir.path(), &[4]);
        let line = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, format!("{line}{line}")).unwrap();
        assert!(Manifest::load(&mpath, &vocab).is_err());
    }

    #[test]
    fn manifest_rejects_missing_feature_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.tsv");
        std::fs::write(&p, "u0\tnope.ften\ttrain\ta\n").unwrap();
        let vocab = Vocab::from_labels(["a"]).unwrap();
        let err = Manifest::load(&p, &vocab).unwrap_err();
        assert!(err.to_string().contains("nope.ften"), "{err}");
    }

    #[test]
    fn manifest_rejects_unknown_label() {
        let dir = tempfile::tempdir().unwrap();
        let (mpath, vocab) = write_corpus(dir.path(), &[4]);
        let line = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, line.replace("a b", "a zz")).unwrap();
        assert!(Manifest::load(&mpath, &vocab).is_err());
    }

    #[test]
    fn manifest_rejects_empty_transcript() {
        let dir = tempfile::tempdir().unwrap();
        let (mpath, vocab) = write_corpus(dir.path(), &[4]);
        let line = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, line.replace("a b", " ")).unwrap();
        assert!(Manifest::load(&mpath, &vocab).is_err());
    }

    #[test]
    fn batch_pads_with_zeros_and_keeps_lengths() {
        let dir = tempfile::tempdir().unwrap();
        let (mpath, vocab) = write_corpus(dir.path(), &[3, 5]);
        let m = Manifest::load(&mpath, &vocab).unwrap();
        let refs: Vec<&Record> = m.records.iter().collect();
        let b = batch_from_records(&refs, None).unwrap();
        assert_eq!(b.shape, [2, 2, 5, 1]);
        assert_eq!(b.feat_lens, vec![3, 5]);
        // Utterance 0 is padded over frames 3 and 4 in both freq rows.
        for fi in 0..2 {
            for ti in 3..5 {
                assert_eq!(b.features[fi * 5 + ti], 0.0);
            }
        }
        let t0 = read_features(&m.records[0].path).unwrap();
        assert_eq!(b.features[0], t0.data[0]);
    }

    #[test]
    fn batch_plan_covers_everything_once() {
        let lens: Vec<usize> = (0..33).map(|i| 10 + (i * 7) % 13).collect();
        let mut rng = stream_rng(5, Stream::Shuffle);
        let batches = plan_batches(&lens, 32, &mut rng);
        let sizes: Vec<usize> = batches.iter().map(Vec::len).collect();
        let mut sorted = sizes.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![1, 32]);
        let mut seen: Vec<usize> = batches.into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..33).collect::<Vec<_>>());
    }

    #[test]
    fn batch_plan_is_deterministic_and_groups_lengths() {
        // 31 is coprime to 64, so lengths are all distinct and the set of
        // 32 shortest is unique.
        let lens: Vec<usize> = (0..64).map(|i| (i * 31) % 64).collect();
        let mut r1 = stream_rng(9, Stream::Shuffle);
        let mut r2 = stream_rng(9, Stream::Shuffle);
        let a = plan_batches(&lens, 32, &mut r1);
        let b = plan_batches(&lens, 32, &mut r2);
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
        // Sorting by length means one batch holds exactly the 32 shortest.
        let mut short: Vec<usize> = (0..64).collect();
        short.sort_by_key(|&i| lens[i]);
        let shortest: HashSet<usize> = short[..32].iter().copied().collect();
        let batch_sets: Vec<HashSet<usize>> = a
            .iter()
            .map(|b| b.iter().copied().collect())
            .collect();
        assert!(batch_sets.contains(&shortest));
    }

    #[test]
    fn different_seeds_change_batch_order() {
        let lens = vec![10; 80];
        let mut r1 = stream_rng(1, Stream::Shuffle);
        let mut r2 = stream_rng(2, Stream::Shuffle);
        assert_ne!(plan_batches(&lens, 8, &mut r1), plan_batches(&lens, 8, &mut r2));
    }
}
