use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::seq2seq::ModelConfig;

/// Optimization schedule settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Dropout rate; layers keep activations with probability 1 - dropout.
    pub dropout: f64,
    /// Non-improving dev epochs tolerated before the phase change, and again
    /// before stopping.
    pub patience: usize,
    pub fine_tune_lr: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 1e-3,
            clip_norm: 1.0,
            dropout: 0.5,
            patience: 5,
            fine_tune_lr: 1e-4,
            weight_decay: 1e-5,
            max_epochs: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        if self.learning_rate <= 0.0 || self.fine_tune_lr <= 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::Config("learning rates and clip_norm must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}

/// Everything a run needs beyond the corpus: architecture widths, the
/// training schedule and decode settings. Loaded from flat "key = value"
/// text; unknown keys are rejected.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub conv_maps: usize,
    pub residual_blocks: usize,
    pub residual_maps: usize,
    pub dense_units: usize,
    pub enc_lstm_units: usize,
    pub enc_lstm_layers: usize,
    pub dec_lstm_units: usize,
    pub attn_units: usize,
    pub train: TrainConfig,
    pub beam_width: usize,
    pub length_normalize: bool,
    /// Root of every random stream in a run.
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let m = ModelConfig::default();
        Config {
            conv_maps: m.conv_maps,
            residual_blocks: m.residual_blocks,
            residual_maps: m.residual_maps,
            dense_units: m.dense_units,
            enc_lstm_units: m.enc_lstm_units,
            enc_lstm_layers: m.enc_lstm_layers,
            dec_lstm_units: m.dec_lstm_units,
            attn_units: m.attn_units,
            train: TrainConfig::default(),
            beam_width: 10,
            length_normalize: false,
            seed: 1234,
        }
    }
}

impl Config {
    /// Architecture settings for a given vocabulary size. The dropout keep
    /// probability follows the configured rate.
    pub fn model_config(&self, vocab: usize) -> ModelConfig {
        ModelConfig {
            conv_maps: self.conv_maps,
            residual_blocks: self.residual_blocks,
            residual_maps: self.residual_maps,
            dense_units: self.dense_units,
            enc_lstm_units: self.enc_lstm_units,
            enc_lstm_layers: self.enc_lstm_layers,
            dec_lstm_units: self.dec_lstm_units,
            attn_units: self.attn_units,
            vocab,
            keep_prob: 1.0 - self.train.dropout,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.conv_maps,
            self.residual_blocks,
            self.residual_maps,
            self.dense_units,
            self.enc_lstm_units,
            self.enc_lstm_layers,
            self.dec_lstm_units,
            self.attn_units,
            self.beam_width,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("architecture sizes and beam_width must be positive".into()));
        }
        self.train.validate()
    }

    pub fn parse(text: &str) -> Result<Config> {
        let mut cfg = Config::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let n = lineno + 1;
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected key = value")))?;
            let (key, value) = (key.trim(), value.trim());
            if value.is_empty() {
                return Err(Error::Config(format!("line {n}: empty value for {key}")));
            }
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {n}: duplicate key {key}")));
            }
            match key {
                "conv_maps" => cfg.conv_maps = int(key, value, n)?,
                "residual_blocks" => cfg.residual_blocks = int(key, value, n)?,
                "residual_maps" => cfg.residual_maps = int(key, value, n)?,
                "dense_units" => cfg.dense_units = int(key, value, n)?,
                "enc_lstm_units" => cfg.enc_lstm_units = int(key, value, n)?,
                "enc_lstm_layers" => cfg.enc_lstm_layers = int(key, value, n)?,
                "dec_lstm_units" => cfg.dec_lstm_units = int(key, value, n)?,
                "attn_units" => cfg.attn_units = int(key, value, n)?,
                "batch_size" => cfg.train.batch_size = int(key, value, n)?,
                "learning_rate" => cfg.train.learning_rate = float(key, value, n)?,
                "clip_norm" => cfg.train.clip_norm = float(key, value, n)?,
                "dropout" => cfg.train.dropout = float(key, value, n)?,
                "patience" => cfg.train.patience = int(key, value, n)?,
                "fine_tune_lr" => cfg.train.fine_tune_lr = float(key, value, n)?,
                "weight_decay" => cfg.train.weight_decay = float(key, value, n)?,
                "max_epochs" => cfg.train.max_epochs = int(key, value, n)?,
                "beam_width" => cfg.beam_width = int(key, value, n)?,
                "seed" => cfg.seed = int(key, value, n)? as u64,
                "length_normalize" => {
                    cfg.length_normalize = match value {
                        "true" => true,
                        "false" => false,
                        _ => {
                            return Err(Error::Config(format!(
                                "line {n}: {key} takes true or false, got {value}"
                            )))
                        }
                    }
                }
                _ => return Err(Error::Config(format!("line {n}: unknown key {key}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Config::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Renders every setting in the format `parse` accepts, for the resolved
    /// copy a run directory keeps.
    pub fn to_text(&self) -> String {
        format!(
            "conv_maps = {}\n\
             residual_blocks = {}\n\
             residual_maps = {}\n\
             dense_units = {}\n\
             enc_lstm_units = {}\n\
             enc_lstm_layers = {}\n\
             dec_lstm_units = {}\n\
             attn_units = {}\n\
             batch_size = {}\n\
             learning_rate = {}\n\
             clip_norm = {}\n\
             dropout = {}\n\
             patience = {}\n\
             fine_tune_lr = {}\n\
             weight_decay = {}\n\
             max_epochs = {}\n\
             beam_width = {}\n\
             length_normalize = {}\n\
             seed = {}\n",
            self.conv_maps,
            self.residual_blocks,
            self.residual_maps,
            self.dense_units,
            self.enc_lstm_units,
            self.enc_lstm_layers,
            self.dec_lstm_units,
            self.attn_units,
            self.train.batch_size,
            self.train.learning_rate,
            self.train.clip_norm,
            self.train.dropout,
            self.train.patience,
            self.train.fine_tune_lr,
            self.train.weight_decay,
            self.train.max_epochs,
            self.beam_width,
            self.length_normalize,
            self.seed,
        )
    }
}

fn int(key: &str, value: &str, line: usize) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: {key} takes an integer, got {value}")))
}

fn float(key: &str, value: &str, line: usize) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: {key} takes a number, got {value}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let cfg = Config::parse("").unwrap();
        assert_eq!(cfg, Config::default());
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.train.patience, 5);
        assert_eq!(cfg.beam_width, 10);
    }

    #[test]
    fn overrides_and_comments_parse() {
        let text = "\n# run settings\nbatch_size = 8   # small\nlearning_rate = 0.01\nconv_maps = 16\nlength_normalize = true\n";
        let cfg = Config::parse(text).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.conv_maps, 16);
        assert!(cfg.length_normalize);
        assert_eq!(cfg.dense_units, Config::default().dense_units);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::parse("learning_rat = 0.1\n").is_err());
        assert!(Config::parse("momentum = 0.9\n").is_err());
    }

    #[test]
    fn duplicate_keys_are_rejected() {
        assert!(Config::parse("batch_size = 8\nbatch_size = 16\n").is_err());
    }

    #[test]
    fn malformed_lines_are_rejected() {
        assert!(Config::parse("batch_size\n").is_err());
        assert!(Config::parse("batch_size =\n").is_err());
        assert!(Config::parse("batch_size = eight\n").is_err());
        assert!(Config::parse("dropout = maybe\n").is_err());
    }

    #[test]
    fn out_of_range_values_fail_validation() {
        assert!(Config::parse("dropout = 1.0\n").is_err());
        assert!(Config::parse("dropout = -0.1\n").is_err());
        assert!(Config::parse("batch_size = 0\n").is_err());
        assert!(Config::parse("learning_rate = 0\n").is_err());
        assert!(Config::parse("beam_width = 0\n").is_err());
        assert!(Config::parse("patience = 0\n").is_ok());
    }

    #[test]
    fn model_config_carries_vocab_and_keep_prob() {
        let cfg = Config::parse("dropout = 0.2\nenc_lstm_units = 32\n").unwrap();
        let m = cfg.model_config(40);
        assert_eq!(m.vocab, 40);
        assert!((m.keep_prob - 0.8).abs() < 1e-15);
        assert_eq!(m.enc_lstm_units, 32);
        assert_eq!(m.n_freq, 41);
        assert_eq!(m.n_channels, 3);
        m.validate().unwrap();
    }

    #[test]
    fn rendered_text_round_trips() {
        let cfg = Config::parse(
            "conv_maps = 12\nlearning_rate = 0.005\nlength_normalize = true\nseed = 77\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 77);
        let again = Config::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }
}
