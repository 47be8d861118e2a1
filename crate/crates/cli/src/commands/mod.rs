pub mod decode;
pub mod featurize;
pub mod gradcheck;
pub mod score;
pub mod synth;
pub mod train;

use std::path::{Path, PathBuf};

use asrkit::checkpoint::Checkpoint;
use asrkit::data::Vocab;
use asrkit::features::NormStats;
use asrkit::training::Config;
use asrkit::{Error, Result};

/// Configuration and input-selection mistakes exit with 2, runtime and
/// quality failures with 1.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Data(_) | Error::Checkpoint(_) => 2,
        _ => 1,
    }
}

/// Loads the config file when given, otherwise the built-in defaults.
pub fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    let cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Finds the vocabulary: an explicit `--vocab` path wins, otherwise
/// `vocab.txt` next to the manifest.
pub fn resolve_vocab(manifest: &Path, vocab: &Option<PathBuf>) -> Result<Vocab> {
    let path = match vocab {
        Some(p) => p.clone(),
        None => manifest.parent().unwrap_or_else(|| Path::new(".")).join("vocab.txt"),
    };
    if !path.is_file() {
        return Err(Error::Config(format!(
            "vocabulary file {} not found; pass --vocab",
            path.display()
        )));
    }
    Vocab::load(&path)
}

/// Reads the normalization statistics stored alongside the model weights.
pub fn norm_from_checkpoint(ck: &Checkpoint) -> Result<NormStats> {
    let arr = |name: &str| {
        ck.get(name)
            .map(|(_, v)| v.to_vec())
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing {name}")))
    };
    Ok(NormStats { mean: arr("norm.mean")?, std: arr("norm.std")? })
}
