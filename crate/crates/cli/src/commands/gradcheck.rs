use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::autodiff::GradCheckOptions;
use asrkit::seq2seq::{model_gradcheck, ModelConfig};
use asrkit::Result;

use super::load_config;

#[derive(clap::Args)]
pub struct Args {
    /// Config file for model dimensions; a small built-in model when omitted
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for the random weights and features
    #[arg(long, default_value_t = 2)]
    pub seed: u64,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let cfg = match &args.config {
        Some(_) => load_config(&args.config)?.model_config(6),
        None => ModelConfig::tiny(6),
    };
    let reports = model_gradcheck(&cfg, args.seed, &GradCheckOptions::default())?;

    let mut failed = Vec::new();
    let mut worst = 0.0_f64;
    for (name, report) in &reports {
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{name}: max rel err {:.3e} over {} entries: {verdict}",
            report.max_rel_err, report.checked
        );
        worst = worst.max(report.max_rel_err);
        if !report.passed() {
            failed.push(name.clone());
        }
    }

    if failed.is_empty() {
        println!("gradcheck passed: worst relative error {worst:.3e}");
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("gradcheck failed for: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}
