use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::features::io::{write_features, write_norm_stats};
use asrkit::features::{featurize, read_wav, FeatureConfig, NormStats};
use asrkit::{Error, Result};

#[derive(clap::Args)]
pub struct Args {
    /// Directory holding .wav files
    pub audio_dir: PathBuf,
    /// Output directory for .ften feature files
    #[arg(long)]
    pub out: PathBuf,
    /// Optional path for normalization statistics over the whole directory
    #[arg(long)]
    pub stats_out: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let entries = std::fs::read_dir(&args.audio_dir)
        .map_err(|e| Error::io(format!("reading {}", args.audio_dir.display()), e))?;
    let mut wavs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    wavs.sort();
    if wavs.is_empty() {
        eprintln!("no audio found in {}", args.audio_dir.display());
        return Ok(ExitCode::from(1));
    }

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let cfg = FeatureConfig::default();
    let mut tensors = Vec::new();
    let mut failures = Vec::new();
    for wav in &wavs {
        match read_wav(wav).and_then(|audio| featurize(&audio, &cfg)) {
            Ok(tensor) => {
                let stem = wav.file_stem().unwrap_or_default().to_string_lossy();
                write_features(&args.out.join(format!("{stem}.ften")), &tensor)?;
                tensors.push(tensor);
            }
            Err(err) => failures.push((wav.clone(), err)),
        }
    }

    if let Some(stats_path) = &args.stats_out {
        if !tensors.is_empty() {
            let stats = NormStats::compute(&tensors)?;
            write_norm_stats(stats_path, &stats)?;
        }
    }

    if failures.is_empty() {
        println!("featurized {} files into {}", wavs.len(), args.out.display());
        Ok(ExitCode::SUCCESS)
    } else {
        for (wav, err) in &failures {
            eprintln!("{}: {err}", wav.display());
        }
        eprintln!("{} of {} files failed", failures.len(), wavs.len());
        Ok(ExitCode::from(1))
    }
}
