//! On-disk formats: FTEN feature tensors and NormStats text files.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{FeatureTensor, NormStats};

const MAGIC: &[u8; 4] = b"FTEN";
const VERSION: u32 = 1;

/// Writes a feature tensor: magic "FTEN", then version, F, T, C as u32
/// little-endian, then the doubles in (f, t, c) row-major order.
pub fn write_features(path: &Path, t: &FeatureTensor) -> Result<()> {
    let ctx = || format!("writing {}", path.display());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut header = Vec::with_capacity(20);
    header.extend_from_slice(MAGIC);
    for v in [VERSION, t.n_freq as u32, t.n_frames as u32, t.n_channels as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&header).map_err(|e| Error::io(ctx(), e))?;
    let mut buf = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    f.write_all(&buf).map_err(|e| Error::io(ctx(), e))
}

/// Reads only the header, returning (freq, frames, channels). Batching uses
/// this to sort by length without pulling whole tensors into memory.
pub fn read_feature_dims(path: &Path) -> Result<(usize, usize, usize)> {
    let ctx = || format!("reading {}", path.display());
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header).map_err(|e| Error::io(ctx(), e))?;
    if &header[..4] != MAGIC {
        return Err(Error::Feature(format!("{}: not an FTEN file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    if word(4) != VERSION {
        return Err(Error::Feature(format!(
            "{}: unsupported FTEN version {}",
            path.display(),
            word(4)
        )));
    }
    Ok((word(8) as usize, word(12) as usize, word(16) as usize))
}

pub fn read_features(path: &Path) -> Result<FeatureTensor> {
    let ctx = || format!("reading {}", path.display());
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(ctx(), e))?;
    let mut header = [0u8; 20];
    f.read_exact(&mut header).map_err(|e| Error::io(ctx(), e))?;
    if &header[..4] != MAGIC {
        return Err(Error::Feature(format!("{}: not an FTEN file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Feature(format!(
            "{}: unsupported FTEN version {version}",
            path.display()
        )));
    }
    let (n_freq, n_frames, n_channels) = (word(8) as usize, word(12) as usize, word(16) as usize);
    let n = n_freq * n_frames * n_channels;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| Error::io(ctx(), e))?;
    if raw.len() != n * 8 {
        return Err(Error::Feature(format!(
            "{}: payload is {} bytes, header implies {}",
            path.display(),
            raw.len(),
            n * 8
        )));
    }
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(FeatureTensor { n_freq, n_frames, n_channels, data })
}

/// NormStats as text: one "mean std" line per feature dimension.
pub fn write_norm_stats(path: &Path, stats: &NormStats) -> Result<()> {
    let mut out = String::new();
    for (m, s) in stats.mean.iter().zip(&stats.std) {
        out.push_str(&format!("{m:e} {s:e}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_norm_stats(path: &Path) -> Result<NormStats> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let (m, s) = (parts.next(), parts.next());
        let (Some(m), Some(s), None) = (m, s, parts.next()) else {
            return Err(Error::Feature(format!(
                "{}:{}: expected \"mean std\"",
                path.display(),
                i + 1
            )));
        };
        let parse = |tok: &str| {
            tok.parse::<f64>().map_err(|_| {
                Error::Feature(format!("{}:{}: bad number {tok:?}", path.display(), i + 1))
            })
        };
        mean.push(parse(m)?);
        std.push(parse(s)?);
    }
    if mean.is_empty() {
        return Err(Error::Feature(format!("{}: empty stats file", path.display())));
    }
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ften_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("u.ften");
        let t = FeatureTensor {
            n_freq: 3,
            n_frames: 4,
            n_channels: 2,
            data: (0..24).map(|i| f64::from(i) * 0.37 - 1.0).collect(),
        };
        write_features(&path, &t).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back.n_freq, 3);
        assert_eq!(back.n_frames, 4);
        assert_eq!(back.n_channels, 2);
        assert_eq!(back.data, t.data);
    }

    #[test]
    fn ften_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ften");
        std::fs::write(&path, b"NOPE0000000000000000plus some payload").unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn ften_rejects_short_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.ften");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"FTEN");
        for v in [1u32, 2, 2, 1] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f64.to_le_bytes()); // 1 of 4 values
        std::fs::write(&path, bytes).unwrap();
        assert!(read_features(&path).is_err());
    }

    #[test]
    fn norm_stats_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.txt");
        let stats = NormStats {
            mean: vec![0.1, -2.5e-17, 3.7],
            std: vec![1.0, 0.033333333333333333, 2.0],
        };
        write_norm_stats(&path, &stats).unwrap();
        let back = read_norm_stats(&path).unwrap();
        assert_eq!(back.mean, stats.mean);
        assert_eq!(back.std, stats.std);
    }

    #[test]
    fn norm_stats_rejects_malformed_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stats.txt");
        std::fs::write(&path, "1.0 2.0\n3.0\n").unwrap();
        assert!(read_norm_stats(&path).is_err());
    }
}
