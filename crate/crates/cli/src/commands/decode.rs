use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::checkpoint::Checkpoint;
use asrkit::data::{Manifest, Split};
use asrkit::decoding::{decode_features_with, BeamOptions};
use asrkit::features::io::read_features;
use asrkit::seq2seq::Seq2Seq;
use asrkit::{Error, Result};

use super::{load_config, norm_from_checkpoint, resolve_vocab};

#[derive(clap::Args)]
pub struct Args {
    /// Trained model checkpoint
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the manifest
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Manifest split to decode
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Beam width; defaults to the config value, 1 is greedy
    #[arg(long)]
    pub beam: Option<usize>,
    /// Config file for model dimensions and search options
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output file; stdout when omitted
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let cfg = load_config(&args.config)?;
    if !args.checkpoint.is_file() {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} does not exist",
            args.checkpoint.display()
        )));
    }
    let vocab = resolve_vocab(&args.manifest, &args.vocab)?;
    let manifest = Manifest::load(&args.manifest, &vocab)?;
    let split = Split::parse(&args.split)?;
    let records = manifest.split(split);
    if records.is_empty() {
        return Err(Error::Data(format!("manifest has no {} records", args.split)));
    }

    let ck = Checkpoint::load(&args.checkpoint)?;
    let norm = norm_from_checkpoint(&ck)?;
    let mut model = Seq2Seq::new(cfg.model_config(vocab.size()), cfg.seed)?;
    model.restore_from(&ck)?;

    let width = args.beam.unwrap_or(cfg.beam_width);
    if width == 0 {
        return Err(Error::Config("beam width must be positive".into()));
    }
    let opts = BeamOptions { length_normalize: cfg.length_normalize };
    let mut output = String::new();
    for record in &records {
        let mut feat = read_features(&record.path)?;
        norm.apply(&mut feat)?;
        let res = decode_features_with(&mut model, &feat, width, None, &opts)?;
        let mut labels = Vec::with_capacity(res.tokens.len());
        for &id in &res.tokens {
            labels.push(vocab.label(id).ok_or_else(|| {
                Error::Data(format!("decoded label id {id} is outside the vocabulary"))
            })?);
        }
        writeln!(output, "{}\t{:.6}\t{}", record.id, res.log_prob, labels.join(" "))
            .expect("string write");
    }

    match &args.out {
        Some(path) => {
            std::fs::write(path, &output)
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            println!("decoded {} utterances to {}", records.len(), path.display());
        }
        None => print!("{output}"),
    }
    Ok(ExitCode::SUCCESS)
}
