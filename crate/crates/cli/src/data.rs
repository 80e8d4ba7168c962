// SPDX-License-Identifier: MIT OR Apache-2.0

//! `perturb`.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tracetrust::actv::DimensionLabel;
use tracetrust::datasets::{perturbation_corpus, LabeledCorpus};

use crate::config::{self, Outputs};
use crate::Status;

#[derive(Args)]
pub struct PerturbArgs {
    /// Two-column `sentence<TAB>label` file; labels are ignored.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Fraction of letters whose case is flipped, in [0, 1]. Required.
    #[arg(long)]
    rate: Option<f64>,
    /// Perturbation seed (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output TSV; the resolved config goes to `<out>.config.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PerturbRun {
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    rate: Option<f64>,
    seed: u64,
}

/// `dir/name.tsv` becomes `dir/name.config.json`.
pub fn config_path_for(out: &Path) -> PathBuf {
    out.with_extension("config.json")
}

pub fn perturb(args: PerturbArgs) -> Result<Status> {
    let mut run: PerturbRun = config::load(args.config.as_deref())?;
    config::set(&mut run.input, args.input.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.rate, args.rate.map(Some));
    config::set(&mut run.seed, args.seed);
    let input = config::required(&run.input, "input")?;
    let out = config::required(&run.out, "out")?;
    let rate = run
        .rate
        .context("missing required setting `rate` (flag or config file)")?;

    let file = File::open(&input).with_context(|| format!("opening {}", input.display()))?;
    let corpus = LabeledCorpus::read_tsv(BufReader::new(file), DimensionLabel::Robustness)
        .with_context(|| format!("reading {}", input.display()))?;
    let combined = perturbation_corpus(&corpus, rate, run.seed)?;

    let mut tsv = Vec::new();
    combined.write_tsv(&mut tsv)?;
    let mut files = Outputs::default();
    files.add(out.clone(), tsv);
    files.add_json(config_path_for(&out), &run)?;
    files.commit()?;
    eprintln!("{} sentences -> {} rows", corpus.len(), combined.len());
    Ok(Status::Success)
}
