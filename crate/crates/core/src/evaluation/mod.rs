//! Scoring: Levenshtein distance, corpus error rate, and the phone-set
//! folding applied before comparison.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Minimum insertions + deletions + substitutions (unit costs) transforming
/// `a` into `b`, by dynamic programming over two rolling rows kept on the
/// shorter sequence.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (short, long) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut prev: Vec<usize> = (0..=short.len()).collect();
    let mut cur = vec![0usize; short.len() + 1];
    for (i, lv) in long.iter().enumerate() {
        cur[0] = i + 1;
        for (j, sv) in short.iter().enumerate() {
            let sub = prev[j] + usize::from(lv != sv);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[short.len()]
}

/// Corpus-level error rate: total edit distance divided by total reference
/// length. Can exceed 1 when hypotheses run long.
pub fn error_rate<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<f64> {
    let report = score_report(pairs)?;
    Ok(report.rate())
}

/// Aggregate scoring summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreReport {
    /// Total reference length.
    pub z: usize,
    /// Total edit distance.
    pub edits: usize,
    pub utterances: usize,
}

impl ScoreReport {
    pub fn rate(&self) -> f64 {
        self.edits as f64 / self.z as f64
    }
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "utterances: {}", self.utterances)?;
        writeln!(f, "reference length (Z): {}", self.z)?;
        writeln!(f, "total edits: {}", self.edits)?;
        write!(f, "error rate: {:.4}", self.rate())
    }
}

pub fn score_report<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to score: empty pair set".into()));
    }
    let z: usize = pairs.iter().map(|(r, _)| r.len()).sum();
    if z == 0 {
        return Err(Error::Data("total reference length is zero".into()));
    }
    let edits = pairs.iter().map(|(r, h)| edit_distance(r, h)).sum();
    Ok(ScoreReport { z, edits, utterances: pairs.len() })
}

/// Label folding applied to references and hypotheses before scoring.
/// Every source label maps to a target label or to deletion.
#[derive(Debug, Clone, Default)]
pub struct PhoneMap {
    mapping: HashMap<String, Option<String>>,
}

/// Index where a comment begins. A `#` counts only at the start of the line
/// or after whitespace, so labels such as TIMIT's `h#` pass through intact.
fn comment_start(line: &str) -> usize {
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if b == b'#' && (i == 0 || bytes[i - 1].is_ascii_whitespace()) {
            return i;
        }
    }
    bytes.len()
}

impl PhoneMap {
    /// Parses lines of "source target" or "source -" (deletion); "#" starts
    /// a comment at the beginning of a line or after whitespace.
    pub fn parse(text: &str) -> Result<Self> {
        let mut mapping = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw[..comment_start(raw)].trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let (src, dst) = match (it.next(), it.next(), it.next()) {
                (Some(s), Some(d), None) => (s, d),
                _ => {
                    return Err(Error::Config(format!(
                        "phone map line {}: expected \"source target\" or \"source -\", got {raw:?}",
                        lineno + 1
                    )))
                }
            };
            let entry = if dst == "-" { None } else { Some(dst.to_string()) };
            if mapping.insert(src.to_string(), entry).is_some() {
                return Err(Error::Config(format!(
                    "phone map line {}: duplicate source label {src}",
                    lineno + 1
                )));
            }
        }
        if mapping.is_empty() {
            return Err(Error::Config("phone map has no entries".into()));
        }
        Ok(PhoneMap { mapping })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        PhoneMap::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies the folding; entries mapped to deletion disappear.
    pub fn apply(&self, seq: &[String]) -> Result<Vec<String>> {
        let mut out = Vec::with_capacity(seq.len());
        for label in seq {
            match self.mapping.get(label) {
                Some(Some(target)) => out.push(target.clone()),
                Some(None) => {}
                None => {
                    return Err(Error::Data(format!(
                        "label {label:?} has no phone map entry"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }
}
