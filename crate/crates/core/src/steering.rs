// SPDX-License-Identifier: MIT OR Apache-2.0

//! Mass-mean steering vectors and the additive residual-stream intervention.
//!
//! A steering vector is the difference between the centroid of positive and
//! negative activations at one layer. Steering adds `α·v` to the residual
//! stream after that layer at every decode step. The direction is not
//! normalized; `α` carries all scaling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{
    read_actv_file, write_actv_file, ActivationDataset, DatasetMeta, DimensionLabel,
};
use crate::error::{Error, Result};
use crate::probes::ProbeModel;
use crate::toylm::{self, CaptureRequest, ToyLmCheckpoint};

/// Dataset name written into saved vector files.
pub const VECTOR_DATASET_NAME: &str = "steering_vector";

/// Default perplexity ceiling as a multiple of the unsteered perplexity.
pub const DEFAULT_PPL_CEILING_FACTOR: f64 = 1.5;

/// A direction in the residual stream of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub direction: Vec<f64>,
    pub layer: u32,
    pub source_checkpoint: String,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Centroid difference `mean(positives) − mean(negatives)` in f64.
pub fn mass_mean<R, T>(positives: &[R], negatives: &[R]) -> Result<Vec<f64>>
where
    R: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let mp = centroid(positives, "positive")?;
    let mn = centroid(negatives, "negative")?;
    if mp.len() != mn.len() {
        return Err(Error::DimensionMismatch {
            expected: mp.len(),
            got: mn.len(),
        });
    }
    Ok(mp.iter().zip(&mn).map(|(p, n)| p - n).collect())
}

fn centroid<R, T>(rows: &[R], side: &str) -> Result<Vec<f64>>
where
    R: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let first = rows
        .first()
        .ok_or_else(|| Error::invalid(format!("empty {side} set")))?;
    let d = first.as_ref().len();
    let mut sum = vec![0.0f64; d];
    for r in rows {
        let r = r.as_ref();
        if r.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        for (s, &v) in sum.iter_mut().zip(r) {
            *s += v.into();
        }
    }
    let n = rows.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

/// Mass-mean vector from explicit positive and negative rows.
pub fn mass_mean_vector<R, T>(
    positives: &[R],
    negatives: &[R],
    layer: u32,
    source_checkpoint: impl Into<String>,
) -> Result<SteeringVector>
where
    R: AsRef<[T]>,
    T: Copy + Into<f64>,
{
    let direction = mass_mean(positives, negatives)?;
    if direction.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("non-finite steering direction"));
    }
    Ok(SteeringVector {
        direction,
        layer,
        source_checkpoint: source_checkpoint.into(),
        n_positive: positives.len(),
        n_negative: negatives.len(),
    })
}

impl SteeringVector {
    /// Mass-mean vector of a labeled activation dataset (label 1 positive).
    pub fn from_dataset(data: &ActivationDataset) -> Result<Self> {
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (row, &y) in data.rows().zip(data.labels()) {
            if y == 1 {
                pos.push(row);
            } else {
                neg.push(row);
            }
        }
        mass_mean_vector(
            &pos,
            &neg,
            data.meta().layer,
            data.meta().checkpoint_id.clone(),
        )
    }

    pub fn dim(&self) -> usize {
        self.direction.len()
    }

    /// Writes `path` as a one-row ACTV1 file and a JSON sidecar next to it
    /// (same stem, `.json` extension). The file stores the direction as f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let row: Vec<f32> = self.direction.iter().map(|&v| v as f32).collect();
        let meta = DatasetMeta {
            label_semantics: "mass-mean steering direction; label unused".into(),
            ..DatasetMeta::last_token(
                VECTOR_DATASET_NAME,
                DimensionLabel::Other,
                self.source_checkpoint.clone(),
                self.layer,
            )
        };
        let ds = ActivationDataset::new(row.len(), row, vec![0], meta)?;
        write_actv_file(&ds, path)?;
        let sidecar = VectorSidecar {
            layer: self.layer,
            source_checkpoint: self.source_checkpoint.clone(),
            n_positive: self.n_positive,
            n_negative: self.n_negative,
        };
        let side = sidecar_path(path);
        let mut text = serde_json::to_string_pretty(&sidecar)?;
        text.push('\n');
        std::fs::write(&side, text).map_err(|e| Error::file(&side, e))
    }

    /// Reads a vector written by [`SteeringVector::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let ds = read_actv_file(path)?;
        if ds.n() != 1 {
            return Err(Error::validation(format!(
                "{}: steering vector file has {} rows, expected 1",
                path.display(),
                ds.n()
            )));
        }
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::file(&side, e))?;
        let sidecar: VectorSidecar = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: invalid sidecar: {e}", side.display())))?;
        if sidecar.layer != ds.meta().layer || sidecar.source_checkpoint != ds.meta().checkpoint_id
        {
            return Err(Error::validation(format!(
                "{}: sidecar disagrees with vector file metadata",
                side.display()
            )));
        }
        Ok(Self {
            direction: ds.row(0).iter().map(|&v| v as f64).collect(),
            layer: sidecar.layer,
            source_checkpoint: sidecar.source_checkpoint,
            n_positive: sidecar.n_positive,
            n_negative: sidecar.n_negative,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VectorSidecar {
    layer: u32,
    source_checkpoint: String,
    n_positive: usize,
    n_negative: usize,
}

/// Sidecar location for a vector file: same path with a `.json` extension.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Which positions of the residual stream receive the intervention.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionScope {
    /// Every position, prompt included.
    #[default]
    AllPositions,
    /// Only the final position of each forward pass.
    LastPosition,
}

/// `h ← h + α·v` after block `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub vector: SteeringVector,
    pub alpha: f64,
    pub layer: usize,
    #[serde(default)]
    pub scope: InterventionScope,
}

impl InterventionSpec {
    /// Intervention at the vector's own layer, all positions.
    pub fn new(vector: SteeringVector, alpha: f64) -> Self {
        let layer = vector.layer as usize;
        Self {
            vector,
            alpha,
            layer,
            scope: InterventionScope::AllPositions,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }
}

/// Returns `h + α·v`. With `α = 0` the input is returned bitwise unchanged.
pub fn apply_intervention(h: &[f64], spec: &InterventionSpec) -> Result<Vec<f64>> {
    let v = &spec.vector.direction;
    if h.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: v.len(),
            got: h.len(),
        });
    }
    if spec.alpha == 0.0 {
        return Ok(h.to_vec());
    }
    Ok(h.iter().zip(v).map(|(&x, &d)| x + spec.alpha * d).collect())
}

/// In-place f32 form used inside the model: each entry becomes
/// `(h + α·v)` evaluated in f64 and rounded once. No-op when `α = 0`.
///
/// The caller guarantees matching lengths.
pub(crate) fn apply_intervention_f32(h: &mut [f32], spec: &InterventionSpec) {
    debug_assert_eq!(h.len(), spec.vector.direction.len());
    if spec.alpha == 0.0 {
        return;
    }
    for (x, &d) in h.iter_mut().zip(&spec.vector.direction) {
        *x = (*x as f64 + spec.alpha * d) as f32;
    }
}

/// Settings for [`strength_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    /// Tokens generated per prompt before scoring.
    pub gen_steps: usize,
    /// Ceiling on steered perplexity, as a multiple of the unsteered value.
    pub ppl_ceiling_factor: f64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            gen_steps: 8,
            ppl_ceiling_factor: DEFAULT_PPL_CEILING_FACTOR,
        }
    }
}

/// One strength of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    /// Mean probe logit of the steered last-token activation.
    pub mean_probe_score: f64,
    pub perplexity: f64,
    pub exceeds_ceiling: bool,
}

/// Output of [`strength_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrengthSweep {
    pub layer: usize,
    pub baseline_score: f64,
    pub baseline_perplexity: f64,
    pub ppl_ceiling: f64,
    /// Rows sorted by `alpha` (stable, so duplicates stay adjacent).
    pub rows: Vec<SweepRow>,
}

/// Mean probe logit of the last-token activation at `spec.layer` after
/// greedy generation from every prompt, with the intervention active
/// (or none when `spec` is `None`).
pub fn steered_probe_score(
    ckpt: &ToyLmCheckpoint,
    layer: usize,
    spec: Option<&InterventionSpec>,
    prompts: &[Vec<u32>],
    probe: &ProbeModel,
    gen_steps: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::invalid("no evaluation prompts"));
    }
    if probe.dim() != ckpt.config().d_model {
        return Err(Error::DimensionMismatch {
            expected: ckpt.config().d_model,
            got: probe.dim(),
        });
    }
    let max = ckpt.config().max_seq_len;
    let mut total = 0.0;
    for prompt in prompts {
        let seq = toylm::generate(ckpt, prompt, gen_steps, spec)?;
        let window = &seq[seq.len().saturating_sub(max)..];
        let out = toylm::forward(ckpt, window, &[CaptureRequest::last_token(layer)], spec)?;
        total += probe.logit(&out.captures[0]);
    }
    Ok(total / prompts.len() as f64)
}

/// Scores each strength in `alphas` by steered probe logit and perplexity.
///
/// The intervention in `template` supplies vector, layer and scope; its
/// `alpha` is ignored. Rows whose perplexity exceeds
/// `ppl_ceiling_factor × baseline` are flagged. Strengths run in parallel.
pub fn strength_sweep(
    ckpt: &ToyLmCheckpoint,
    template: &InterventionSpec,
    alphas: &[f64],
    eval_prompts: &[Vec<u32>],
    ppl_corpus: &[Vec<u32>],
    probe: &ProbeModel,
    settings: &SweepSettings,
) -> Result<StrengthSweep> {
    if alphas.is_empty() {
        return Err(Error::invalid("empty strength list"));
    }
    if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
        return Err(Error::invalid(format!("non-finite strength {a}")));
    }
    let layer = template.layer;
    let baseline_score =
        steered_probe_score(ckpt, layer, None, eval_prompts, probe, settings.gen_steps)?;
    let baseline_perplexity = toylm::perplexity(ckpt, ppl_corpus, None)?;
    let ppl_ceiling = settings.ppl_ceiling_factor * baseline_perplexity;

    let mut ordered: Vec<f64> = alphas.to_vec();
    ordered.sort_by(f64::total_cmp);
    let rows = ordered
        .par_iter()
        .map(|&alpha| {
            let spec = template.with_alpha(alpha);
            let score = steered_probe_score(
                ckpt,
                layer,
                Some(&spec),
                eval_prompts,
                probe,
                settings.gen_steps,
            )?;
            let ppl = toylm::perplexity(ckpt, ppl_corpus, Some(&spec))?;
            Ok(SweepRow {
                alpha,
                mean_probe_score: score,
                perplexity: ppl,
                exceeds_ceiling: ppl > ppl_ceiling,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StrengthSweep {
        layer,
        baseline_score,
        baseline_perplexity,
        ppl_ceiling,
        rows,
    })
}

impl StrengthSweep {
    /// CSV with columns `alpha, mean_probe_score, perplexity, exceeds_ceiling`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}
