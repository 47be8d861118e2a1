//! Append-only training metrics log.
//!
//! One line per event, space separated:
//!
//! ```text
//! epoch step loss grad_norm lr dev_per timestamp
//! ```
//!
//! `dev_per` is `-` on per-step lines; epoch summaries carry the measured
//! value. The timestamp is UNIX seconds and is the only field exempt from
//! the reproducibility guarantee.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::error::{Error, Result};

pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    /// Opens the log for appending, creating it if needed. Existing lines
    /// are never rewritten.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
        Ok(MetricsLog { file })
    }

    pub fn record(
        &mut self,
        epoch: usize,
        step: u64,
        loss: f64,
        grad_norm: f64,
        lr: f64,
        dev_per: Option<f64>,
    ) -> Result<()> {
        let ts = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let dev = match dev_per {
            Some(v) => format!("{v:.6}"),
            None => "-".to_string(),
        };
        writeln!(
            self.file,
            "{epoch} {step} {loss:.6} {grad_norm:.6} {lr:e} {dev} {ts}"
        )
        .map_err(|e| Error::io("writing metrics log", e))
    }
}

/// One parsed metrics line, used by tests and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLine {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub dev_per: Option<f64>,
    pub timestamp: u64,
}

pub fn parse_line(line: &str) -> Result<MetricsLine> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 7 {
        return Err(Error::Training(format!(
            "metrics line has {} fields, expected 7: {line:?}",
            fields.len()
        )));
    }
    let bad = |what: &str| Error::Training(format!("bad {what} in metrics line {line:?}"));
    Ok(MetricsLine {
        epoch: fields[0].parse().map_err(|_| bad("epoch"))?,
        step: fields[1].parse().map_err(|_| bad("step"))?,
        loss: fields[2].parse().map_err(|_| bad("loss"))?,
        grad_norm: fields[3].parse().map_err(|_| bad("grad_norm"))?,
        lr: fields[4].parse().map_err(|_| bad("lr"))?,
        dev_per: match fields[5] {
            "-" => None,
            v => Some(v.parse().map_err(|_| bad("dev_per"))?),
        },
        timestamp: fields[6].parse().map_err(|_| bad("timestamp"))?,
    })
}
