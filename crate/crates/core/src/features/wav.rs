//! Minimal RIFF/WAVE reader for 16-bit PCM mono files.

use std::path::Path;

use crate::error::{Error, Result};

/// Decoded audio: samples scaled to [-1, 1) and the file's sample rate.
#[derive(Debug, Clone)]
pub struct Audio {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Parses WAV bytes. SPHERE-format files (common in older speech corpora)
/// are detected and rejected with a conversion hint instead of a parse error.
pub fn parse_wav(bytes: &[u8]) -> Result<Audio> {
    if bytes.starts_with(b"NIST_1A") {
        return Err(Error::Audio(
            "NIST SPHERE file, not WAV; convert with e.g. sph2pipe before featurizing".into(),
        ));
    }
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Audio("not a RIFF/WAVE file".into()));
    }

    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<&[u8]> = None;
    let mut off = 12;
    while off + 8 <= bytes.len() {
        let id = &bytes[off..off + 4];
        let size = u32_at(bytes, off + 4) as usize;
        let body_start = off + 8;
        let body_end = body_start + size;
        if body_end > bytes.len() {
            return Err(Error::Audio(format!(
                "truncated chunk {:?} (needs {size} bytes)",
                String::from_utf8_lossy(id)
            )));
        }
        let body = &bytes[body_start..body_end];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(Error::Audio("fmt chunk too short".into()));
                }
                fmt = Some((u16_at(body, 0), u16_at(body, 2), u32_at(body, 4), u16_at(body, 14)));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned; odd sizes carry a pad byte.
        off = body_end + (size & 1);
    }

    let (format, channels, sample_rate, bits) =
        fmt.ok_or_else(|| Error::Audio("missing fmt chunk".into()))?;
    let data = data.ok_or_else(|| Error::Audio("missing data chunk".into()))?;
    if format != 1 {
        return Err(Error::Audio(format!("unsupported WAV format code {format}, need PCM (1)")));
    }
    if channels != 1 {
        return Err(Error::Audio(format!("{channels} channels, need mono")));
    }
    if bits != 16 {
        return Err(Error::Audio(format!("{bits}-bit samples, need 16")));
    }

    let samples = data
        .chunks_exact(2)
        .map(|p| f64::from(i16::from_le_bytes([p[0], p[1]])) / 32768.0)
        .collect();
    Ok(Audio { samples, sample_rate })
}

pub fn read_wav(path: &Path) -> Result<Audio> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_wav(&bytes)
}

/// Serializes samples back to a minimal 16-bit PCM mono WAV. Used by the
/// synthetic-data generator and tests.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    let data_len = samples.len() * 2;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_wav(samples: &[i16], rate: u32) -> Vec<u8> {
        let data_len = samples.len() * 2;
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
        b.extend_from_slice(b"WAVE");
        b.extend_from_slice(b"fmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&rate.to_le_bytes());
        b.extend_from_slice(&(rate * 2).to_le_bytes());
        b.extend_from_slice(&2u16.to_le_bytes());
        b.extend_from_slice(&16u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&(data_len as u32).to_le_bytes());
        for &s in samples {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b
    }

    #[test]
    fn parses_pcm_mono() {
        let bytes = tiny_wav(&[0, 16384, -16384, 32767], 16000);
        let audio = parse_wav(&bytes).unwrap();
        assert_eq!(audio.sample_rate, 16000);
        assert_eq!(audio.samples.len(), 4);
        assert_eq!(audio.samples[0], 0.0);
        assert!((audio.samples[1] - 0.5).abs() < 1e-12);
        assert!((audio.samples[2] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_sphere() {
        let err = parse_wav(b"NIST_1A\n   1024\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("SPHERE"), "{msg}");
    }

    #[test]
    fn rejects_stereo() {
        let mut bytes = tiny_wav(&[1, 2], 16000);
        bytes[22] = 2; // channel count
        assert!(parse_wav(&bytes).is_err());
    }

    #[test]
    fn rejects_garbage() {
        assert!(parse_wav(b"hello world, definitely not audio").is_err());
    }

    #[test]
    fn round_trips_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..100).map(|i| (f64::from(i) * 0.07).sin() * 0.8).collect();
        write_wav(&path, &samples, 16000).unwrap();
        let audio = read_wav(&path).unwrap();
        assert_eq!(audio.sample_rate, 16000);
        assert_eq!(audio.samples.len(), 100);
        for (a, b) in audio.samples.iter().zip(&samples) {
            assert!((a - b).abs() < 1.0 / 32768.0);
        }
    }
}
