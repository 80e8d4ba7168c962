// SPDX-License-Identifier: MIT OR Apache-2.0

//! `toy corpus`, `toy train`, `toy extract` and `proxy-generate`.

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracetrust::actv::DimensionLabel;
use tracetrust::datasets::{tagged_lines, two_style_corpus, LabeledCorpus, StyleCorpusConfig};
use tracetrust::proxytune;
use tracetrust::toylm::{
    extract_activations, load_checkpoint, mean_loss, save_checkpoint, tokenizer, train, Optimizer,
    ToyLmCheckpoint, ToyLmConfig, TrainConfig,
};

use crate::config::{self, Outputs, CONFIG_FILE};
use crate::Status;

#[derive(Subcommand)]
pub enum ToyCommand {
    /// Synthetic two-style corpus: `corpus.tsv` (sentence, label) and
    /// `train.txt` (sentences followed by a label tag, one per line).
    Corpus(CorpusArgs),
    /// Train a toy model on a text file, one sequence per line, writing a
    /// `step_NNNNNN` checkpoint directory at every checkpoint step.
    Train(TrainArgs),
    /// Last-token activations of labeled sentences for every checkpoint and
    /// layer, plus a manifest.
    Extract(ExtractArgs),
}

pub fn run(cmd: ToyCommand) -> Result<Status> {
    match cmd {
        ToyCommand::Corpus(a) => corpus(a),
        ToyCommand::Train(a) => train_cmd(a),
        ToyCommand::Extract(a) => extract(a),
    }
}

fn load_ckpt(path: &Path) -> Result<ToyLmCheckpoint> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn read_corpus(path: &Path, dimension: DimensionLabel) -> Result<LabeledCorpus> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    LabeledCorpus::read_tsv(BufReader::new(file), dimension)
        .with_context(|| format!("reading {}", path.display()))
}

// ---------------------------------------------------------------------------
// corpus
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct CorpusArgs {
    /// Number of sentences (default 1000); labels alternate 0, 1.
    #[arg(long)]
    n: Option<usize>,
    /// Letters per sentence (default 24).
    #[arg(long)]
    length: Option<usize>,
    /// Probability of a random letter instead of the style step (default 0.2).
    #[arg(long)]
    noise: Option<f64>,
    /// Generator seed (default 0).
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
struct CorpusRun {
    out: Option<PathBuf>,
    corpus: StyleCorpusConfig,
}

fn corpus(args: CorpusArgs) -> Result<Status> {
    let mut run: CorpusRun = config::load(args.config.as_deref())?;
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.corpus.n, args.n);
    config::set(&mut run.corpus.length, args.length);
    config::set(&mut run.corpus.noise, args.noise);
    config::set(&mut run.corpus.seed, args.seed);
    let out = config::required(&run.out, "out")?;

    let corpus = two_style_corpus(&run.corpus)?;
    let mut tsv = Vec::new();
    corpus.write_tsv(&mut tsv)?;
    let mut lines = tagged_lines(&corpus).join("\n");
    lines.push('\n');

    let mut files = Outputs::default();
    files.add(out.join("corpus.tsv"), tsv);
    files.add(out.join("train.txt"), lines.into_bytes());
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn parse_optimizer(s: &str) -> Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::adam()),
        _ => Err(format!("unknown optimizer `{s}` (expected sgd or adam)")),
    }
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training text, one sequence per line (BOS is prepended).
    #[arg(long)]
    lines: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model; the model
    /// settings are then taken from it.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Residual width (default 64).
    #[arg(long)]
    d_model: Option<usize>,
    /// Number of blocks (default 4).
    #[arg(long)]
    n_layers: Option<usize>,
    /// Attention heads per block (default 4).
    #[arg(long)]
    n_heads: Option<usize>,
    /// Feed-forward width (default 256).
    #[arg(long)]
    d_ff: Option<usize>,
    /// Context length (default 128).
    #[arg(long)]
    max_seq_len: Option<usize>,
    /// Parameter initialization seed (default 0).
    #[arg(long)]
    model_seed: Option<u64>,
    /// Optimizer steps (default 500).
    #[arg(long)]
    steps: Option<u64>,
    /// Checkpoint interval in steps (default 50).
    #[arg(long)]
    checkpoint_every: Option<u64>,
    /// Learning rate (default 0.1).
    #[arg(long)]
    lr: Option<f32>,
    /// Sequences per step (default 8).
    #[arg(long)]
    batch_size: Option<usize>,
    /// sgd (default) or adam.
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<Optimizer>,
    /// Batch sampling seed (default 0).
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
struct TrainRun {
    lines: Option<PathBuf>,
    init: Option<PathBuf>,
    out: Option<PathBuf>,
    model: ToyLmConfig,
    train: TrainConfig,
}

#[derive(Serialize)]
struct LossPoint {
    checkpoint_id: String,
    step: u64,
    mean_loss: f64,
}

fn train_cmd(args: TrainArgs) -> Result<Status> {
    let mut run: TrainRun = config::load(args.config.as_deref())?;
    config::set(&mut run.lines, args.lines.map(Some));
    config::set(&mut run.init, args.init.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.model.d_model, args.d_model);
    config::set(&mut run.model.n_layers, args.n_layers);
    config::set(&mut run.model.n_heads, args.n_heads);
    config::set(&mut run.model.d_ff, args.d_ff);
    config::set(&mut run.model.max_seq_len, args.max_seq_len);
    config::set(&mut run.model.seed, args.model_seed);
    config::set(&mut run.train.steps, args.steps);
    config::set(&mut run.train.checkpoint_every, args.checkpoint_every);
    config::set(&mut run.train.learning_rate, args.lr);
    config::set(&mut run.train.batch_size, args.batch_size);
    config::set(&mut run.train.optimizer, args.optimizer);
    config::set(&mut run.train.seed, args.seed);
    let lines = config::required(&run.lines, "lines")?;
    let out = config::required(&run.out, "out")?;

    let start = match &run.init {
        Some(dir) => {
            let ckpt = load_ckpt(dir)?;
            run.model = *ckpt.config();
            ckpt
        }
        None => ToyLmCheckpoint::init(run.model)?,
    };
    let seqs: Vec<Vec<u32>> = config::read_lines(&lines)?
        .iter()
        .map(|l| tokenizer::encode(l))
        .collect();
    let ckpts = train(&start, &seqs, &run.train)?;
    let losses = ckpts
        .par_iter()
        .map(|c| {
            Ok(LossPoint {
                checkpoint_id: c.checkpoint_id(),
                step: c.step(),
                mean_loss: mean_loss(c, &seqs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = Outputs::default();
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.add_json(out.join("losses.json"), &losses)?;
    files.commit()?;
    for c in &ckpts {
        save_checkpoint(c, &out.join(c.checkpoint_id()))?;
    }
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!(
            "{} checkpoints; mean loss {:.4} (step {}) -> {:.4} (step {})",
            ckpts.len(),
            first.mean_loss,
            first.step,
            last.mean_loss,
            last.step
        );
    }
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

fn parse_layers(s: &str) -> Result<Layers, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Layers)
}

/// Comma-separated layer indices, kept as one flag value.
#[derive(Debug, Clone)]
pub struct Layers(Vec<usize>);

#[derive(Args)]
pub struct ExtractArgs {
    /// Directory holding `step_NNNNNN` checkpoint directories (all are used).
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    /// Labeled sentences, `sentence<TAB>label`.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Comma-separated layers (default: every layer, 0 = embeddings).
    #[arg(long, value_parser = parse_layers)]
    layers: Option<Layers>,
    /// Dataset name recorded in every file (default `corpus`).
    #[arg(long)]
    name: Option<String>,
    /// Dimension label recorded in every file (default `other`).
    #[arg(long)]
    dimension: Option<DimensionLabel>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExtractRun {
    checkpoints: Option<PathBuf>,
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    layers: Option<Vec<usize>>,
    name: String,
    dimension: DimensionLabel,
}

impl Default for ExtractRun {
    fn default() -> Self {
        Self {
            checkpoints: None,
            corpus: None,
            out: None,
            layers: None,
            name: "corpus".into(),
            dimension: DimensionLabel::Other,
        }
    }
}

/// `step_*` subdirectories of `dir`, sorted by name.
fn checkpoint_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("step_"))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!("no step_* checkpoint directories in {}", dir.display());
    }
    Ok(dirs)
}

fn extract(args: ExtractArgs) -> Result<Status> {
    let mut run: ExtractRun = config::load(args.config.as_deref())?;
    config::set(&mut run.checkpoints, args.checkpoints.map(Some));
    config::set(&mut run.corpus, args.corpus.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(&mut run.layers, args.layers.map(|l| Some(l.0)));
    config::set(&mut run.name, args.name);
    config::set(&mut run.dimension, args.dimension);
    let ckpt_root = config::required(&run.checkpoints, "checkpoints")?;
    let corpus_path = config::required(&run.corpus, "corpus")?;
    let out = config::required(&run.out, "out")?;

    let ckpts = checkpoint_dirs(&ckpt_root)?
        .iter()
        .map(|d| load_ckpt(d))
        .collect::<Result<Vec<_>>>()?;
    let corpus = read_corpus(&corpus_path, run.dimension)?;
    let layers = run
        .layers
        .clone()
        .unwrap_or_else(|| (0..=ckpts[0].config().n_layers).collect());

    let report = extract_activations(&ckpts, &corpus, &layers, &out, &run.name)?;
    let mut files = Outputs::default();
    files.add_json(out.join(CONFIG_FILE), &run)?;
    if !report.skipped.is_empty() {
        files.add_json(out.join("skipped.json"), &report.skipped)?;
    }
    files.commit()?;
    eprintln!(
        "{} datasets from {} checkpoints; {} rows skipped",
        report.manifest.entries.len(),
        ckpts.len(),
        report.skipped.len()
    );
    Ok(Status::Success)
}

// ---------------------------------------------------------------------------
// proxy-generate
// ---------------------------------------------------------------------------

#[derive(Args)]
pub struct ProxyArgs {
    /// Base model checkpoint directory.
    #[arg(long)]
    base: Option<PathBuf>,
    /// Tuned expert checkpoint directory.
    #[arg(long)]
    tuned: Option<PathBuf>,
    /// Untuned ancestor of the expert.
    #[arg(long)]
    untuned: Option<PathBuf>,
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
struct ProxyRun {
    base: Option<PathBuf>,
    tuned: Option<PathBuf>,
    untuned: Option<PathBuf>,
    out: Option<PathBuf>,
    prompts: Vec<String>,
    prompts_file: Option<PathBuf>,
    steps: usize,
}

impl Default for ProxyRun {
    fn default() -> Self {
        Self {
            base: None,
            tuned: None,
            untuned: None,
            out: None,
            prompts: Vec::new(),
            prompts_file: None,
            steps: 16,
        }
    }
}

#[derive(Serialize)]
struct ProxyGeneration {
    prompt: String,
    text: String,
    tokens: Vec<u32>,
}

pub fn proxy_generate(args: ProxyArgs) -> Result<Status> {
    let mut run: ProxyRun = config::load(args.config.as_deref())?;
    config::set(&mut run.base, args.base.map(Some));
    config::set(&mut run.tuned, args.tuned.map(Some));
    config::set(&mut run.untuned, args.untuned.map(Some));
    config::set(&mut run.out, args.out.map(Some));
    config::set(
        &mut run.prompts,
        (!args.prompt.is_empty()).then_some(args.prompt),
    );
    config::set(&mut run.prompts_file, args.prompts.map(Some));
    config::set(&mut run.steps, args.steps);
    let base = load_ckpt(&config::required(&run.base, "base")?)?;
    let tuned = load_ckpt(&config::required(&run.tuned, "tuned")?)?;
    let untuned = load_ckpt(&config::required(&run.untuned, "untuned")?)?;
    let out = config::required(&run.out, "out")?;

    let mut prompts = run.prompts.clone();
    if let Some(f) = &run.prompts_file {
        prompts.extend(config::read_lines(f)?);
    }
    if prompts.is_empty() {
        bail!("no prompts given (use --prompt or --prompts)");
    }
    let generations = prompts
        .par_iter()
        .map(|p| {
            let tokens = tokenizer::encode(p);
            let seq = proxytune::proxy_generate(&base, &tuned, &untuned, &tokens, run.steps)?;
            let cont = seq[tokens.len()..].to_vec();
            Ok(ProxyGeneration {
                prompt: p.clone(),
                text: tokenizer::decode(&cont),
                tokens: cont,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut files = Outputs::default();
    files.add_json(out.join("generations.json"), &generations)?;
    files.add_json(out.join(CONFIG_FILE), &run)?;
    files.commit()?;
    Ok(Status::Success)
}
