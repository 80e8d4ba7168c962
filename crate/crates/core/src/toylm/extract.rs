// SPDX-License-Identifier: MIT OR Apache-2.0

//! Last-token activation dumps from toy checkpoints into ACTV1 files plus a
//! sweep manifest.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{forward, tokenizer, CaptureRequest, ToyLmCheckpoint};
use crate::actv::{write_actv_file, ActivationDataset, DatasetMeta, Manifest, ManifestEntry};
use crate::datasets::LabeledCorpus;
use crate::error::{Error, Result};

/// Corpus row left out of every emitted dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRow {
    pub index: usize,
    pub reason: String,
}

/// Result of [`extract_activations`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionReport {
    pub manifest: Manifest,
    /// Rows dropped before extraction; the same rows are absent from every file.
    pub skipped: Vec<SkippedRow>,
}

/// File name of one `(checkpoint, layer)` dataset.
pub fn dataset_file_name(checkpoint_id: &str, layer: usize) -> String {
    format!("{checkpoint_id}_layer{layer:02}.actv")
}

/// Runs every checkpoint over `corpus` and writes one ACTV1 dataset per
/// `(checkpoint, layer)` into `out_dir`, plus `manifest.json`.
///
/// Sentences are tokenized as `[BOS] + bytes`. Rows that do not fit
/// `max_seq_len`, or contain tokens outside the vocabulary, are skipped in
/// every file so rows stay aligned across layers and checkpoints. All
/// checkpoints must share one config.
pub fn extract_activations(
    ckpts: &[ToyLmCheckpoint],
    corpus: &LabeledCorpus,
    layers: &[usize],
    out_dir: &Path,
    dataset_name: &str,
) -> Result<ExtractionReport> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::invalid("no checkpoints"))?;
    let cfg = *first.config();
    if ckpts.iter().any(|c| *c.config() != cfg) {
        return Err(Error::invalid("checkpoints do not share one config"));
    }
    if layers.is_empty() {
        return Err(Error::invalid("no layers requested"));
    }
    if let Some(&l) = layers.iter().find(|&&l| l > cfg.n_layers) {
        return Err(Error::invalid(format!(
            "layer {l} out of range 0..={}",
            cfg.n_layers
        )));
    }
    let mut ids: Vec<String> = ckpts.iter().map(|c| c.checkpoint_id()).collect();
    ids.sort();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("two checkpoints share a step"));
    }

    let mut kept = Vec::new();
    let mut skipped = Vec::new();
    for (i, s) in corpus.sentences.iter().enumerate() {
        let tokens = tokenizer::encode(s);
        if tokens.len() > cfg.max_seq_len {
            skipped.push(SkippedRow {
                index: i,
                reason: format!(
                    "{} tokens exceed max_seq_len {}",
                    tokens.len(),
                    cfg.max_seq_len
                ),
            });
        } else if tokens.iter().any(|&t| t as usize >= cfg.vocab_size) {
            skipped.push(SkippedRow {
                index: i,
                reason: format!("token out of range for vocab_size {}", cfg.vocab_size),
            });
        } else {
            kept.push((i, tokens));
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("every corpus row was skipped"));
    }
    let labels: Vec<u8> = kept.iter().map(|(i, _)| corpus.labels[*i]).collect();
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let balanced = pos.abs_diff(labels.len() - pos) <= 1;

    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let captures: Vec<CaptureRequest> = layers
        .iter()
        .map(|&l| CaptureRequest::last_token(l))
        .collect();
    let mut entries = Vec::new();
    for ckpt in ckpts {
        let rows = kept
            .par_iter()
            .map(|(_, tokens)| forward(ckpt, tokens, &captures, None).map(|o| o.captures))
            .collect::<Result<Vec<_>>>()?;
        let id = ckpt.checkpoint_id();
        for (li, &layer) in layers.iter().enumerate() {
            let layer_rows: Vec<&[f32]> = rows.iter().map(|r| r[li].as_slice()).collect();
            let meta = DatasetMeta {
                balanced,
                ..DatasetMeta::last_token(
                    dataset_name,
                    corpus.dimension_label,
                    id.clone(),
                    layer as u32,
                )
            };
            let ds = ActivationDataset::from_rows(&layer_rows, labels.clone(), meta)?;
            let file = dataset_file_name(&id, layer);
            write_actv_file(&ds, &out_dir.join(&file))?;
            entries.push(ManifestEntry {
                checkpoint_id: id.clone(),
                layer: layer as u32,
                path: file.into(),
                dataset_name: dataset_name.to_string(),
                dimension_label: corpus.dimension_label,
                step: Some(ckpt.step()),
            });
        }
    }
    let manifest = Manifest { entries };
    manifest.ordered_entries()?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(ExtractionReport { manifest, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actv::{read_actv_file, validate_manifest, DimensionLabel};
    use crate::toylm::ToyLmConfig;

    fn cfg() -> ToyLmConfig {
        ToyLmConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_seq_len: 12,
            ..ToyLmConfig::default()
        }
    }

    fn corpus() -> LabeledCorpus {
        let sentences: Vec<String> = (0..10).map(|i| format!("row {i}")).collect();
        let labels = (0..10).map(|i| (i % 2) as u8).collect();
        LabeledCorpus::new(sentences, labels, DimensionLabel::Robustness).unwrap()
    }

    #[test]
    fn shapes_and_determinism() {
        let ck = ToyLmCheckpoint::init(cfg()).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let rep = extract_activations(
            std::slice::from_ref(&ck),
            &corpus(),
            &[1, 2],
            a.path(),
            "toy",
        )
        .unwrap();
        extract_activations(&[ck], &corpus(), &[1, 2], b.path(), "toy").unwrap();
        assert_eq!(rep.manifest.entries.len(), 2);
        assert_eq!(validate_manifest(&rep.manifest, a.path()).unwrap().len(), 2);
        for e in &rep.manifest.entries {
            let ds = read_actv_file(&a.path().join(&e.path)).unwrap();
            assert_eq!((ds.n(), ds.d()), (10, 8));
            assert_eq!(ds.labels(), corpus().labels.as_slice());
            assert!(ds.meta().balanced);
            let bytes_a = std::fs::read(a.path().join(&e.path)).unwrap();
            let bytes_b = std::fs::read(b.path().join(&e.path)).unwrap();
            assert_eq!(bytes_a, bytes_b);
        }
    }

    #[test]
    fn skipped_rows_are_consistent() {
        let ck = ToyLmCheckpoint::init(cfg()).unwrap();
        let mut c = corpus();
        c.sentences[3] = "this sentence is too long".into();
        let dir = tempfile::tempdir().unwrap();
        let rep = extract_activations(&[ck], &c, &[0, 2], dir.path(), "toy").unwrap();
        assert_eq!(rep.skipped.len(), 1);
        assert_eq!(rep.skipped[0].index, 3);
        let mut want = c.labels.clone();
        want.remove(3);
        for e in &rep.manifest.entries {
            let ds = read_actv_file(&dir.path().join(&e.path)).unwrap();
            assert_eq!(ds.n(), 9);
            assert_eq!(ds.labels(), want.as_slice());
        }
    }
}
