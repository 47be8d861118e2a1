use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use asrkit::data::{Manifest, Split};
use asrkit::evaluation::{score_report, PhoneMap};
use asrkit::{Error, Result};

use super::resolve_vocab;

#[derive(clap::Args)]
pub struct Args {
    /// Reference manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Hypothesis file: `id <tab> labels` or `id <tab> score <tab> labels`
    #[arg(long)]
    pub hypotheses: PathBuf,
    /// Vocabulary file; defaults to vocab.txt next to the manifest
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Restrict references to one split and require full coverage of it
    #[arg(long)]
    pub split: Option<String>,
    /// Label folding applied to references and hypotheses before scoring
    #[arg(long)]
    pub phone_map: Option<PathBuf>,
    /// Also write the report to this file
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &Args) -> Result<ExitCode> {
    let vocab = resolve_vocab(&args.manifest, &args.vocab)?;
    let manifest = Manifest::load(&args.manifest, &vocab)?;
    let refs = reference_labels(&manifest, &vocab, &args.split)?;
    let hyps = parse_hypotheses(&args.hypotheses)?;
    check_coverage(&refs, &hyps, args.split.is_some())?;

    let map = match &args.phone_map {
        Some(path) => Some(PhoneMap::load(path)?),
        None => None,
    };
    let mut pairs = Vec::with_capacity(hyps.len());
    for (id, hyp) in &hyps {
        let reference = &refs[id];
        let pair = match &map {
            Some(m) => (m.apply(reference)?, m.apply(hyp)?),
            None => (reference.clone(), hyp.clone()),
        };
        pairs.push(pair);
    }

    let report = score_report(&pairs)?;
    println!("{report}");
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{report}\n"))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn reference_labels(
    manifest: &Manifest,
    vocab: &asrkit::data::Vocab,
    split: &Option<String>,
) -> Result<BTreeMap<String, Vec<String>>> {
    let records: Vec<&asrkit::data::Record> = match split {
        Some(name) => manifest.split(Split::parse(name)?),
        None => manifest.records.iter().collect(),
    };
    let mut refs = BTreeMap::new();
    for record in records {
        let mut labels = Vec::with_capacity(record.labels.len());
        for &id in &record.labels {
            labels.push(
                vocab
                    .label(id)
                    .ok_or_else(|| Error::Data(format!("label id {id} outside the vocabulary")))?
                    .to_string(),
            );
        }
        refs.insert(record.id.clone(), labels);
    }
    Ok(refs)
}

fn parse_hypotheses(path: &PathBuf) -> Result<Vec<(String, Vec<String>)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut hyps = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (id, labels) = match fields.as_slice() {
            [id, labels] => (*id, *labels),
            [id, _score, labels] => (*id, *labels),
            _ => {
                return Err(Error::Data(format!(
                    "hypothesis line {}: expected 2 or 3 tab-separated fields, got {}",
                    i + 1,
                    fields.len()
                )))
            }
        };
        if !seen.insert(id.to_string()) {
            return Err(Error::Data(format!("duplicate hypothesis id {id}")));
        }
        let tokens = labels.split_whitespace().map(str::to_string).collect();
        hyps.push((id.to_string(), tokens));
    }
    if hyps.is_empty() {
        return Err(Error::Data(format!("no hypotheses in {}", path.display())));
    }
    Ok(hyps)
}

fn check_coverage(
    refs: &BTreeMap<String, Vec<String>>,
    hyps: &[(String, Vec<String>)],
    require_full: bool,
) -> Result<()> {
    let missing_refs: Vec<&str> = hyps
        .iter()
        .filter(|(id, _)| !refs.contains_key(id))
        .map(|(id, _)| id.as_str())
        .collect();
    if !missing_refs.is_empty() {
        return Err(Error::Data(format!(
            "hypothesis ids missing from the reference: {}",
            missing_refs.join(", ")
        )));
    }
    if require_full {
        let scored: std::collections::BTreeSet<&str> =
            hyps.iter().map(|(id, _)| id.as_str()).collect();
        let unscored: Vec<&str> = refs
            .keys()
            .map(String::as_str)
            .filter(|id| !scored.contains(id))
            .collect();
        if !unscored.is_empty() {
            return Err(Error::Data(format!(
                "reference ids missing from the hypotheses: {}",
                unscored.join(", ")
            )));
        }
    }
    Ok(())
}
