use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::checkpoint::Checkpoint;
use asrkit::data::{Manifest, Split};
use asrkit::training::{corpus_norm_stats, latest_checkpoint, Trainer};
use asrkit::{Error, Result};

use super::{load_config, norm_from_checkpoint, resolve_vocab};

#[derive(clap::Args)]
pub struct Args {
    /// Config file; defaults are used when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Corpus manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Run directory for checkpoints, metrics, and the resolved config
    #[arg(long)]
    pub out: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the manifest
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Overrides the seed from the config
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let vocab = resolve_vocab(&args.manifest, &args.vocab)?;
    let manifest = Manifest::load(&args.manifest, &vocab)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let resolved = args.out.join("config.txt");
    if !resolved.exists() {
        std::fs::write(&resolved, cfg.to_text())
            .map_err(|e| Error::io(format!("writing {}", resolved.display()), e))?;
    }

    let resume = latest_checkpoint(&args.out)?;
    let norm = match &resume {
        Some((_, path)) => norm_from_checkpoint(&Checkpoint::load(path)?)?,
        None => corpus_norm_stats(&manifest.split(Split::Train))?,
    };
    let mut trainer = Trainer::new(cfg.model_config(vocab.size()), cfg.train.clone(), cfg.seed, norm)?;
    if let Some((epoch, path)) = &resume {
        trainer.restore(&Checkpoint::load(path)?)?;
        println!("resuming after epoch {epoch}");
    }

    let outcome = trainer.run(&manifest, &args.out)?;
    println!(
        "finished after {} epochs; best dev error rate {:.4} at epoch {}",
        outcome.epochs_run, outcome.best_dev_per, outcome.best_epoch
    );
    Ok(ExitCode::SUCCESS)
}
