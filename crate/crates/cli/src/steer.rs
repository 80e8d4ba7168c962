// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steer extract`, `steer apply` and `steer sweep`.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracetrust::actv::read_actv_file;
use tracetrust::datasets::{make_split_with, SplitScheme};
use tracetrust::probes::{probe_dataset, ProbeConfig};
use tracetrust::steering::{
    strength_sweep, InterventionScope, InterventionSpec, SteeringVector, SweepSettings,
};
use tracetrust::toylm::{self, load_checkpoint, tokenizer, ToyLmCheckpoint};

use crate::analysis::parse_split;
use crate::config::{self, Outputs, CONFIG_FILE};
use crate::Status;

/// Vector file written by `steer extract`; its sidecar is `steering_vector.json`.
pub const VECTOR_FILE: &str = "steering_vector.actv";

#[derive(Subcommand)]
pub enum SteerCommand {
    /// Mass-mean vector (label 1 minus label 0) from the development rows of
    /// an activation dataset.
    Extract(ExtractArgs),
    /// Greedy generation with and without the intervention.
    Apply(ApplyArgs),
    /// Probe score and perplexity over a list of strengths.
    Sweep(SweepArgs),
}

pub fn run(cmd: SteerCommand) -> Result<Status> {
    match cmd {
        SteerCommand::Extract(a) => extract(a),
        SteerCommand::Apply(a) => apply(a),
        SteerCommand::Sweep(a) => sweep(a),
    }
}

fn parse_scope(s: &str) -> Result<InterventionScope, String> {
    match s {
        "all_positions" | "all" => Ok(InterventionScope::AllPositions),
        "last_position" | "last" => Ok(InterventionScope::LastPosition),
        _ => Err(format!(
            "unknown scope `{s}` (expected all_positions or last_position)"
        )),
    }
}

fn load_ckpt(path: &std::path::Path) -> Result<ToyLmCheckpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn load_vector(path: &std::path::Path) -> Result<SteeringVector> {
    SteeringVector::load(path)
        .with_context(|| format!("loading steering vector {}", path.display()))
}

/// Intervention from a vector, an optional layer override and a scope,
/// checked against the model.
fn intervention(
    vector: SteeringVector,
    alpha: f64,
    layer: Option<usize>,
    scope: InterventionScope,
    ckpt: &ToyLmCheckpoint,
) -> Result<InterventionSpec> {
    let cfg = ckpt.config();
    if vector.dim() != cfg.d_model {
        bail!(
            "steering vector has dimension {}, model d_model is {}",
            vector.dim(),
            cfg.d_model
        );
    }
    let mut spec = InterventionSpec::new(vector, alpha);
    config::set(&mut spec.layer, layer);
    spec.scope = scope;
    if spec.layer > cfg.n_layers {
        bail!("layer {} out of range 0..={}", spec.layer, cfg.n_layers);
    }
    Ok(spec)
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ExtractArgs {
    /// Labeled activation dataset (ACTV1).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Split seed (default 0); only development rows are used.
    #[arg(long)]
    seed: Option<u64>,
    /// Row split: dev_test (default) or simple.
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
struct ExtractRun {
    input: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: u64,
    split: SplitScheme,
}

fn extract(args: ExtractArgs) -> Result<Status> {
    let mut run: ExtractRun = config::load(args.config.as_deref())?;
    config::set(&mut run.input, args.input.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.seed, args.seed);
    config::set(&mut run.split, args.split);
    let input = config::required(&run.input, "input")?;
    let out = config::required(&run.out, "out")?;

    let data = read_actv_file(&input).with_context(|| format!("reading {}", input.display()))?;
    let plan = make_split_with(data.n(), run.seed, run.split)?;
    let vector = SteeringVector::from_dataset(&data.select(&plan.dev())?)?;

    let mut files = Outputs::default();
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    vector.save(&out.join(VECTOR_FILE))?;
    eprintln!(
        "layer {} vector from {} positive and {} negative rows",
        vector.layer, vector.n_positive, vector.n_negative
    );
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// apply
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ApplyArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vector file written by `steer extract`.
    #[arg(long)]
    vector: Option<PathBuf>,
    /// Intervention strength. Required.
    #[arg(long, allow_hyphen_values = true)]
    alpha: Option<f64>,
    /// Layer receiving the intervention (default: the vector's layer).
    #[arg(long)]
    layer: Option<usize>,
    /// all_positions (default) or last_position.
    #[arg(long, value_parser = parse_scope)]
    scope: Option<InterventionScope>,
    /// Prompt text; repeat for several prompts.
    #[arg(long)]
    prompt: Vec<String>,
    /// File with one prompt per line, appended after `--prompt` values.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Tokens generated per prompt (default 16).
    #[arg(long)]
    steps: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ApplyRun {
    checkpoint: Option<PathBuf>,
    vector: Option<PathBuf>,
    out: Option<PathBuf>,
    alpha: Option<f64>,
    layer: Option<usize>,
    scope: InterventionScope,
    prompts: Vec<String>,
    prompts_file: Option<PathBuf>,
    steps: usize,
}

impl Default for ApplyRun {
    fn default() -> Self {
        Self {
            checkpoint: None,
            vector: None,
            out: None,
            alpha: None,
            layer: None,
            scope: InterventionScope::AllPositions,
            prompts: Vec::new(),
            prompts_file: None,
            steps: 16,
        }
    }
}

#[derive(Serialize)]
struct Generation {
    prompt: String,
    baseline: String,
    steered: String,
    baseline_tokens: Vec<u32>,
    steered_tokens: Vec<u32>,
}

#[derive(Serialize)]
struct Generations {
    layer: usize,
    alpha: f64,
    scope: InterventionScope,
    generations: Vec<Generation>,
}

/// Prompts from the run plus the optional prompts file.
fn collect_prompts(inline: &[String], file: Option<&std::path::Path>) -> Result<Vec<String>> {
    let mut prompts = inline.to_vec();
    if let Some(f) = file {
        prompts.extend(config::read_lines(f)?);
    }
    if prompts.is_empty() {
        bail!("no prompts given (use --prompt or --prompts)");
    }
    Ok(prompts)
}

fn continuation(
    ckpt: &ToyLmCheckpoint,
    prompt: &[u32],
    steps: usize,
    spec: Option<&InterventionSpec>,
) -> Result<Vec<u32>> {
    let seq = toylm::generate(ckpt, prompt, steps, spec)?;
    Ok(seq[prompt.len()..].to_vec())
}

fn apply(args: ApplyArgs) -> Result<Status> {
    let mut run: ApplyRun = config::load(args.config.as_deref())?;
    config::set(&mut run.checkpoint, args.checkpoint.map(Some));
    config::set(&mut run.vector, args.vector.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.alpha, args.alpha.map(Some));
    config::set(&mut run.layer, args.layer.map(Some));
    config::set(&mut run.scope, args.scope);
    config::set(
        &mut run.prompts,
        (!args.prompt.is_empty()).then_some(args.prompt),
    );
    config::set(&mut run.prompts_file, args.prompts.map(Some));
    config::set(&mut run.steps, args.steps);
    let ckpt_dir = config::required(&run.checkpoint, "checkpoint")?;
    let vector_path = config::required(&run.vector, "vector")?;
    let out = config::required(&run.out, "out")?;
    let alpha = run
        .alpha
        .context("missing required setting `alpha` (flag or config file)")?;
    if !alpha.is_finite() {
        bail!("alpha must be finite, got {alpha}");
    }

    let ckpt = load_ckpt(&ckpt_dir)?;
    let spec = intervention(
        load_vector(&vector_path)?,
        alpha,
        run.layer,
        run.scope,
        &ckpt,
    )?;
    let prompts = collect_prompts(&run.prompts, run.prompts_file.as_deref())?;
    let generations = prompts
        .par_iter()
        .map(|p| {
            let tokens = tokenizer::encode(p);
            let base = continuation(&ckpt, &tokens, run.steps, None)?;
            let steered = continuation(&ckpt, &tokens, run.steps, Some(&spec))?;
            Ok(Generation {
                prompt: p.clone(),
                baseline: tokenizer::decode(&base),
                steered: tokenizer::decode(&steered),
                baseline_tokens: base,
                steered_tokens: steered,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let changed = generations
        .iter()
        .filter(|g| g.baseline_tokens != g.steered_tokens)
        .count();

    let mut files = Outputs::default();
    files.add_json(
        out.join("generations.json"),
        &Generations {
            layer: spec.layer,
            alpha,
            scope: spec.scope,
            generations,
        },
    )?;
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    eprintln!(
        "{changed} of {} generations changed by the intervention",
        prompts.len()
    );
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct SweepArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Vector file written by `steer extract`.
    #[arg(long)]
    vector: Option<PathBuf>,
    /// Comma-separated strengths, e.g. `0,1,2`. Required.
    #[arg(long, value_parser = config::parse_list, allow_hyphen_values = true)]
    alpha_list: Option<config::Reals>,
    /// Labeled activations at the steered layer; a probe is fitted on them.
    #[arg(long)]
    probe_data: Option<PathBuf>,
    /// File with one evaluation prompt per line.
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// File with one held-out line per row for perplexity.
    #[arg(long)]
    ppl_corpus: Option<PathBuf>,
    /// Layer receiving the intervention (default: the vector's layer).
    #[arg(long)]
    layer: Option<usize>,
    /// all_positions (default) or last_position.
    #[arg(long, value_parser = parse_scope)]
    scope: Option<InterventionScope>,
    /// Tokens generated per prompt before scoring (default 8).
    #[arg(long)]
    gen_steps: Option<usize>,
    /// Perplexity ceiling as a multiple of the unsteered value (default 1.5).
    #[arg(long)]
    ppl_ceiling_factor: Option<f64>,
    /// Seed of the probe's row split (default 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SweepRun {
    checkpoint: Option<PathBuf>,
    vector: Option<PathBuf>,
    probe_data: Option<PathBuf>,
    prompts: Option<PathBuf>,
    ppl_corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    alphas: Vec<f64>,
    layer: Option<usize>,
    scope: InterventionScope,
    seed: u64,
    split: SplitScheme,
    probe: ProbeConfig,
    settings: SweepSettings,
}

fn sweep(args: SweepArgs) -> Result<Status> {
    let mut run: SweepRun = config::load(args.config.as_deref())?;
    config::set(&mut run.checkpoint, args.checkpoint.map(Some));
    config::set(&mut run.vector, args.vector.map(Some));
    config::set(&mut run.probe_data, args.probe_data.map(Some));
    config::set(&mut run.prompts, args.prompts.map(Some));
    config::set(&mut run.ppl_corpus, args.ppl_corpus.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.alphas, args.alpha_list.map(|a| a.0));
    config::set(&mut run.layer, args.layer.map(Some));
    config::set(&mut run.scope, args.scope);
    config::set(&mut run.seed, args.seed);
    config::set(&mut run.settings.gen_steps, args.gen_steps);
    config::set(
        &mut run.settings.ppl_ceiling_factor,
        args.ppl_ceiling_factor,
    );
    let ckpt_dir = config::required(&run.checkpoint, "checkpoint")?;
    let vector_path = config::required(&run.vector, "vector")?;
    let probe_path = config::required(&run.probe_data, "probe_data")?;
    let prompts_path = config::required(&run.prompts, "prompts")?;
    let ppl_path = config::required(&run.ppl_corpus, "ppl_corpus")?;
    let out = config::required(&run.out, "out")?;
    if run.alphas.is_empty() {
        bail!("missing required setting `alphas` (--alpha-list or config file)");
    }

    let ckpt = load_ckpt(&ckpt_dir)?;
    let template = intervention(load_vector(&vector_path)?, 0.0, run.layer, run.scope, &ckpt)?;
    let probe_data =
        read_actv_file(&probe_path).with_context(|| format!("reading {}", probe_path.display()))?;
    if probe_data.meta().layer as usize != template.layer {
        bail!(
            "probe data comes from layer {}, intervention targets layer {}",
            probe_data.meta().layer,
            template.layer
        );
    }
    let (probe, _) = probe_dataset(&probe_data, run.split, &run.probe, run.seed)?;
    let prompts: Vec<Vec<u32>> = config::read_lines(&prompts_path)?
        .iter()
        .map(|p| tokenizer::encode(p))
        .collect();
    let ppl_corpus: Vec<Vec<u32>> = config::read_lines(&ppl_path)?
        .iter()
        .map(|p| tokenizer::encode(p))
        .collect();
    let result = strength_sweep(
        &ckpt,
        &template,
        &run.alphas,
        &prompts,
        &ppl_corpus,
        &probe,
        &run.settings,
    )?;

    let mut csv = Vec::new();
    result.write_csv(&mut csv)?;
    let mut files = Outputs::default();
    files.add(out.join("sweep.csv"), csv);
    files.add_json(out.join("sweep.json"), &result)?;
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    let flagged = result.rows.iter().filter(|r| r.exceeds_ceiling).count();
    eprintln!(
        "{} strengths, {flagged} above the perplexity ceiling {:.3}",
        result.rows.len(),
        result.ppl_ceiling
    );
    Ok(Status::Success)
}
