use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::data::{synth_corpus, SynthKind, SynthSpec};
use asrkit::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    /// Task: copy, reverse, or blockmap
    #[arg(long, default_value = "copy")]
    pub task: String,
    #[arg(long, default_value_t = 8)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,
    #[arg(long, default_value_t = 200)]
    pub n_train: usize,
    #[arg(long, default_value_t = 50)]
    pub n_dev: usize,
    #[arg(long, default_value_t = 0)]
    pub n_test: usize,
    /// Standard deviation of the additive feature noise
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1234)]
    pub seed: u64,
    /// Output directory for features, manifest.tsv, and vocab.txt
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let kind = SynthKind::parse(&args.task)?;
    let mut spec = SynthSpec::new(kind, args.vocab_size, args.seed);
    spec.min_len = args.min_len;
    spec.max_len = args.max_len;
    spec.n_train = args.n_train;
    spec.n_dev = args.n_dev;
    spec.n_test = args.n_test;
    spec.noise = args.noise;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let mut corpus = synth_corpus(&spec, &args.out)?;
    for record in &mut corpus.manifest.records {
        let name = record.path.file_name().ok_or_else(|| {
            Error::Data(format!("feature path {} has no file name", record.path.display()))
        })?;
        record.path = PathBuf::from(name);
    }
    corpus.vocab.save(&args.out.join("vocab.txt"))?;
    corpus.manifest.save(&args.out.join("manifest.tsv"), &corpus.vocab)?;

    println!(
        "wrote {} utterances ({} train, {} dev, {} test) to {}",
        corpus.manifest.records.len(),
        spec.n_train,
        spec.n_dev,
        spec.n_test,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
