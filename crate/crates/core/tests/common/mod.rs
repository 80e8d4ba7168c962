// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures: a toy model trained on the two-style corpus and the
//! activation datasets extracted from its checkpoints.

#![allow(dead_code)]

use tracetrust::actv::{read_actv_file, ActivationDataset};
use tracetrust::datasets::{tagged_lines, two_style_corpus, LabeledCorpus, StyleCorpusConfig};
use tracetrust::toylm::{
    extract_activations, tokenizer, train, ExtractionReport, Optimizer, ToyLmCheckpoint,
    ToyLmConfig, TrainConfig,
};

pub const MIDDLE_LAYER: usize = 2;

pub fn style_model_config() -> ToyLmConfig {
    ToyLmConfig {
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 128,
        max_seq_len: 32,
        seed: 1,
        ..ToyLmConfig::default()
    }
}

pub fn style_train_config(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        checkpoint_every: 50,
        learning_rate: 3e-3,
        batch_size: 8,
        optimizer: Optimizer::adam(),
        grad_clip: Some(1.0),
        seed: 7,
    }
}

pub struct StylePipeline {
    pub ckpts: Vec<ToyLmCheckpoint>,
    pub probe_corpus: LabeledCorpus,
    pub report: ExtractionReport,
    pub dir: tempfile::TempDir,
}

impl StylePipeline {
    pub fn final_ckpt(&self) -> &ToyLmCheckpoint {
        self.ckpts.last().expect("at least the initial checkpoint")
    }

    /// Activation dataset of `(checkpoint, layer)`.
    pub fn dataset(&self, ckpt: &ToyLmCheckpoint, layer: usize) -> ActivationDataset {
        let id = ckpt.checkpoint_id();
        let entry = self
            .report
            .manifest
            .entries
            .iter()
            .find(|e| e.checkpoint_id == id && e.layer as usize == layer)
            .expect("extracted cell");
        read_actv_file(&self.dir.path().join(&entry.path)).expect("readable dataset")
    }

    pub fn prompt(&self, row: usize) -> Vec<u32> {
        tokenizer::encode(&self.probe_corpus.sentences[row])
    }
}

/// Trains the style model for `steps` steps and extracts layers `0..=n_layers`
/// of every checkpoint over a held-out probe corpus of `n_probe` sentences.
pub fn style_pipeline(steps: u64, n_probe: usize) -> StylePipeline {
    let cfg = style_model_config();
    let train_corpus = two_style_corpus(&StyleCorpusConfig {
        n: 2000,
        seed: 100,
        ..StyleCorpusConfig::default()
    })
    .unwrap();
    let probe_corpus = two_style_corpus(&StyleCorpusConfig {
        n: n_probe,
        seed: 200,
        ..StyleCorpusConfig::default()
    })
    .unwrap();
    let seqs: Vec<Vec<u32>> = tagged_lines(&train_corpus)
        .iter()
        .map(|s| tokenizer::encode(s))
        .collect();
    let init = ToyLmCheckpoint::init(cfg).unwrap();
    let ckpts = train(&init, &seqs, &style_train_config(steps)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let layers: Vec<usize> = (0..=cfg.n_layers).collect();
    let report =
        extract_activations(&ckpts, &probe_corpus, &layers, dir.path(), "two_style").unwrap();
    StylePipeline {
        ckpts,
        probe_corpus,
        report,
        dir,
    }
}

/// Held-out tagged lines for perplexity.
pub fn style_ppl_corpus(n: usize) -> Vec<Vec<u32>> {
    let c = two_style_corpus(&StyleCorpusConfig {
        n,
        seed: 300,
        ..StyleCorpusConfig::default()
    })
    .unwrap();
    tagged_lines(&c)
        .iter()
        .map(|s| tokenizer::encode(s))
        .collect()
}
