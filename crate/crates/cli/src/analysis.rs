// SPDX-License-Identifier: MIT OR Apache-2.0

//! `probe` and `mi`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tracetrust::actv::Manifest;
use tracetrust::datasets::SplitScheme;
use tracetrust::infotheory::{detect_phases, mi_sweep_manifest, DEFAULT_SIGMA_GRID};
use tracetrust::probes::{probe_sweep, write_reports_csv, ProbeConfig, SweepOutcome};

use crate::config::{self, Outputs, CONFIG_FILE};
use crate::Status;

pub fn parse_split(s: &str) -> Result<SplitScheme, String> {
    match s {
        "dev_test" | "dev-test" => Ok(SplitScheme::DevTest),
        "simple" => Ok(SplitScheme::Simple),
        _ => Err(format!("unknown split `{s}` (expected dev_test or simple)")),
    }
}

/// Directory holding the manifest; entry paths are relative to it.
pub fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    Manifest::load(path).context("cannot load manifest")
}

#[derive(Args)]
pub struct ProbeArgs {
    /// Manifest of activation datasets (JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed for splits (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Row split: dev_test (1:1, train on 4/5 of dev) or simple (4:1).
    #[arg(long, value_parser = parse_split)]
    split: Option<SplitScheme>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ProbeRun {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
    split: SplitScheme,
    probe: ProbeConfig,
}

#[derive(Serialize)]
struct CellError<'a> {
    checkpoint_id: &'a str,
    layer: u32,
    error: &'a str,
}

pub fn probe(args: ProbeArgs) -> Result<Status> {
    let mut run: ProbeRun = config::load(args.config.as_deref())?;
    config::set(&mut run.manifest, args.manifest.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.seed, args.seed);
    config::set(&mut run.split, args.split);
    let manifest_path = config::required(&run.manifest, "manifest")?;
    let out = config::required(&run.out, "out")?;

    let manifest = load_manifest(&manifest_path)?;
    let outcomes = probe_sweep(
        &manifest,
        &manifest_dir(&manifest_path),
        run.split,
        &run.probe,
        run.seed,
    )?;

    let reports: Vec<_> = outcomes
        .iter()
        .filter_map(SweepOutcome::report)
        .cloned()
        .collect();
    let errors: Vec<CellError> = outcomes
        .iter()
        .filter_map(|o| match o {
            SweepOutcome::Failed { key, error } => Some(CellError {
                checkpoint_id: &key.checkpoint_id,
                layer: key.layer,
                error,
            }),
            SweepOutcome::Report(_) => None,
        })
        .collect();

    let mut csv = Vec::new();
    write_reports_csv(&reports, &mut csv)?;
    let mut files = Outputs::default();
    files.add(out.join("probe_reports.csv"), csv);
    files.add_json(out.join(CONFIG_FILE), &run)?;
    if !errors.is_empty() {
        files.add_json(out.join("errors.json"), &errors)?;
    }
    files.commit()?;

    for e in &errors {
        eprintln!("failed {} layer {}: {}", e.checkpoint_id, e.layer, e.error);
    }
    eprintln!("{} of {} cells probed", reports.len(), outcomes.len());
    Ok(if errors.is_empty() {
        Status::Success
    } else {
        Status::Partial
    })
}

#[derive(Args)]
pub struct MiArgs {
    /// Manifest of activation datasets (JSON).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Layer whose trace is computed.
    #[arg(long)]
    layer: Option<u32>,
    /// Layer standing in for the input (default 0, the embeddings).
    #[arg(long)]
    first_layer: Option<u32>,
    /// Kernel bandwidth grid as lo:hi:step (default 50:400:50).
    #[arg(long, value_parser = config::parse_grid)]
    sigma_grid: Option<config::Reals>,
    /// Odd moving-average window applied before peak detection (default 3).
    #[arg(long)]
    smoothing: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct MiRun {
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
    layer: Option<u32>,
    first_layer: u32,
    sigma_grid: Vec<f64>,
    smoothing: usize,
}

impl Default for MiRun {
    fn default() -> Self {
        Self {
            manifest: None,
            out: None,
            layer: None,
            first_layer: 0,
            sigma_grid: DEFAULT_SIGMA_GRID.to_vec(),
            smoothing: 3,
        }
    }
}

pub fn mi(args: MiArgs) -> Result<Status> {
    let mut run: MiRun = config::load(args.config.as_deref())?;
    config::set(&mut run.manifest, args.manifest.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.layer, args.layer.map(Some));
    config::set(&mut run.first_layer, args.first_layer);
    config::set(&mut run.sigma_grid, args.sigma_grid.map(|g| g.0));
    config::set(&mut run.smoothing, args.smoothing);
    let manifest_path = config::required(&run.manifest, "manifest")?;
    let out = config::required(&run.out, "out")?;
    let layer = run
        .layer
        .context("missing required setting `layer` (flag or config file)")?;

    let manifest = load_manifest(&manifest_path)?;
    let trace = mi_sweep_manifest(
        &manifest,
        &manifest_dir(&manifest_path),
        layer,
        run.first_layer,
        &run.sigma_grid,
    )?;
    let phases = detect_phases(&trace, run.smoothing)?;

    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    let mut files = Outputs::default();
    files.add(out.join("mi_trace.csv"), csv);
    files.add_json(out.join("phase_report.json"), &phases)?;
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    eprintln!(
        "layer {layer}: {} checkpoints, I(T,X) peak at step {}",
        trace.points.len(),
        phases.peak_step
    );
    Ok(Status::Success)
}
