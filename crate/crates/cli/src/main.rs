// SPDX-License-Identifier: MIT OR Apache-2.0

//! `tracetrust`: probe, trace, steer and proxy-tune toy language models from
//! the command line.
//!
//! Every setting resolves as defaults, then the optional `--config` JSON
//! file, then flags. Each run writes its resolved config as `config.json`
//! next to its outputs. Nothing is written unless the whole computation
//! succeeds.
//!
//! Exit codes: 0 success, 1 partial failure (some sweep cells failed),
//! 2 usage, config or input error.

mod analysis;
mod config;
mod data;
mod steer;
mod toy;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// How a command finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Success,
    /// Outputs were written but some items failed.
    Partial,
}

#[derive(Parser)]
#[command(
    name = "tracetrust",
    version,
    about = "Probe, trace and steer concept directions across training checkpoints"
)]
struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true, env = "TRACE_TRUST_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit and evaluate one linear probe per (checkpoint, layer) of a manifest.
    Probe(analysis::ProbeArgs),
    /// Trace HSIC estimates of one layer across checkpoints and split the
    /// trace into fitting and compression phases.
    Mi(analysis::MiArgs),
    /// Steering vectors: extract, apply during generation, sweep strengths.
    #[command(subcommand)]
    Steer(steer::SteerCommand),
    /// Build a robustness corpus: each sentence followed by a case-flipped copy.
    Perturb(data::PerturbArgs),
    /// Greedy generation from base + (tuned - untuned) logits.
    ProxyGenerate(toy::ProxyArgs),
    /// Toy language model: synthetic corpus, training, activation extraction.
    #[command(subcommand)]
    Toy(toy::ToyCommand),
}

fn run(cli: Cli) -> anyhow::Result<Status> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.into())
            .build_global()?;
    }
    match cli.command {
        Command::Probe(a) => analysis::probe(a),
        Command::Mi(a) => analysis::mi(a),
        Command::Steer(c) => steer::run(c),
        Command::Perturb(a) => data::perturb(a),
        Command::ProxyGenerate(a) => toy::proxy_generate(a),
        Command::Toy(c) => toy::run(c),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(Status::Success) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let s = cause.to_string();
        if msg.ends_with(&s) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&s);
    }
    msg
}
