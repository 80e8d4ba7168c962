// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dependence traces over training checkpoints and fitting/compression
//! phase detection.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::hsic::{sigma_search, Samples};
use crate::actv::{read_actv_file, ActivationDataset, Manifest};
use crate::error::{Error, Result};

/// Activations of one checkpoint: the reference layer standing in for the
/// input (`X`) and the layer under study (`T`). Labels (`Y`) come from the
/// datasets and must agree between the two.
#[derive(Debug, Clone)]
pub struct StepActivations {
    pub step: u64,
    pub first: ActivationDataset,
    pub target: ActivationDataset,
}

/// One checkpoint of an [`MiTrace`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiPoint {
    pub step: u64,
    /// HSIC between the target layer and the reference layer.
    pub i_tx: f64,
    /// HSIC between the target layer and the labels.
    pub i_ty: f64,
    /// Bandwidth on `T` selected for `i_tx`.
    pub sigma_tx: f64,
    /// Bandwidth on `T` selected for `i_ty`.
    pub sigma_ty: f64,
    /// Bandwidth on `X` selected for `i_tx`.
    pub sigma_x: f64,
    /// Bandwidth on `Y` selected for `i_ty`.
    pub sigma_y: f64,
}

/// `I(T,X)` and `I(T,Y)` estimates of one layer across checkpoints, ordered
/// by strictly increasing step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiTrace {
    pub layer: u32,
    pub points: Vec<MiPoint>,
}

impl MiTrace {
    pub fn new(layer: u32, points: Vec<MiPoint>) -> Result<Self> {
        if points.windows(2).any(|w| w[0].step >= w[1].step) {
            return Err(Error::validation("trace steps must be strictly increasing"));
        }
        Ok(Self { layer, points })
    }

    /// Trace with only `i_tx` populated; handy for phase analysis of
    /// externally computed series.
    pub fn from_i_tx(layer: u32, steps: &[u64], i_tx: &[f64]) -> Result<Self> {
        if steps.len() != i_tx.len() {
            return Err(Error::DimensionMismatch {
                expected: steps.len(),
                got: i_tx.len(),
            });
        }
        let points = steps
            .iter()
            .zip(i_tx)
            .map(|(&step, &v)| MiPoint {
                step,
                i_tx: v,
                i_ty: 0.0,
                sigma_tx: f64::NAN,
                sigma_ty: f64::NAN,
                sigma_x: f64::NAN,
                sigma_y: f64::NAN,
            })
            .collect();
        Self::new(layer, points)
    }

    pub fn steps(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.step).collect()
    }

    pub fn i_tx(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.i_tx).collect()
    }

    pub fn i_ty(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.i_ty).collect()
    }

    /// CSV with columns `step, i_tx, i_ty, sigma_tx, sigma_ty, sigma_x, sigma_y`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        if self.points.is_empty() {
            out.write_record([
                "step", "i_tx", "i_ty", "sigma_tx", "sigma_ty", "sigma_x", "sigma_y",
            ])?;
        }
        for p in &self.points {
            out.serialize(p)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Computes one [`MiPoint`] per checkpoint.
///
/// Each estimate uses its own bandwidth pair chosen by [`sigma_search`] over
/// `grid`. Labels enter through a one-dimensional `{0, 1}` encoding.
pub fn mi_sweep(
    checkpoints: &[StepActivations],
    target_layer: u32,
    first_layer: u32,
    grid: &[f64],
) -> Result<MiTrace> {
    let mut ordered: Vec<&StepActivations> = checkpoints.iter().collect();
    ordered.sort_by_key(|c| c.step);
    let mut points = Vec::with_capacity(ordered.len());
    for c in ordered {
        if c.first.meta().layer != first_layer || c.target.meta().layer != target_layer {
            return Err(Error::validation(format!(
                "step {}: expected layers ({first_layer}, {target_layer}), found ({}, {})",
                c.step,
                c.first.meta().layer,
                c.target.meta().layer
            )));
        }
        if c.first.n() != c.target.n() || c.first.labels() != c.target.labels() {
            return Err(Error::validation(format!(
                "step {}: rows of layer {first_layer} and layer {target_layer} are not aligned",
                c.step
            )));
        }
        let t = Samples::from_dataset(&c.target);
        let x = Samples::from_dataset(&c.first);
        let y = Samples::from_labels(c.target.labels());
        let tx = sigma_search(&t, &x, grid)?;
        let ty = sigma_search(&t, &y, grid)?;
        points.push(MiPoint {
            step: c.step,
            i_tx: tx.value,
            i_ty: ty.value,
            sigma_tx: tx.sigma_x,
            sigma_ty: ty.sigma_x,
            sigma_x: tx.sigma_y,
            sigma_y: ty.sigma_y,
        });
    }
    MiTrace::new(target_layer, points)
}

/// Loads the `(first_layer, target_layer)` pair of every checkpoint listed in
/// a manifest and runs [`mi_sweep`].
///
/// Checkpoints lacking either layer are skipped; other files are ignored.
pub fn mi_sweep_manifest(
    manifest: &Manifest,
    base_dir: &Path,
    target_layer: u32,
    first_layer: u32,
    grid: &[f64],
) -> Result<MiTrace> {
    let entries = manifest.ordered_entries()?;
    let mut by_ckpt: BTreeMap<&str, (Option<&_>, Option<&_>)> = BTreeMap::new();
    for e in &entries {
        let slot = by_ckpt.entry(e.checkpoint_id.as_str()).or_default();
        if e.layer == first_layer {
            slot.0 = Some(e);
        }
        if e.layer == target_layer {
            slot.1 = Some(e);
        }
    }
    let mut steps = Vec::new();
    for (_, pair) in by_ckpt {
        let (Some(first), Some(target)) = pair else {
            continue;
        };
        let load = |e: &crate::actv::ManifestEntry| {
            let path = Manifest::resolve_path(e, base_dir);
            let ds = read_actv_file(&path)?;
            crate::actv::check_entry_meta(e, ds.meta(), &path)?;
            Ok::<_, Error>(ds)
        };
        steps.push(StepActivations {
            step: target.step()?,
            first: load(first)?,
            target: load(target)?,
        });
    }
    if steps.is_empty() {
        return Err(Error::validation(format!(
            "manifest has no checkpoint with both layer {first_layer} and layer {target_layer}"
        )));
    }
    let mut seen: Vec<u64> = steps.iter().map(|s| s.step).collect();
    seen.sort_unstable();
    if seen.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::validation(
            "two checkpoints resolve to the same step",
        ));
    }
    mi_sweep(&steps, target_layer, first_layer, grid)
}

// ---------------------------------------------------------------------------
// Phase detection
// ---------------------------------------------------------------------------

/// Inclusive range of checkpoint steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRange {
    pub start: u64,
    pub end: u64,
}

/// Split of a trace into a fitting phase (up to the `I(T,X)` peak) and a
/// compression phase (after it).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub layer: u32,
    pub peak_step: u64,
    /// Index of the peak within the trace.
    pub peak_index: usize,
    pub fitting_range: StepRange,
    /// `None` when the peak is the last checkpoint.
    pub compression_range: Option<StepRange>,
    pub smoothing_window: usize,
    /// Smoothed `I(T,X)` series the peak was taken from.
    pub smoothed_i_tx: Vec<f64>,
}

/// Centered moving average; the window is truncated at both ends.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Locates the end of the fitting phase as the argmax of smoothed `I(T,X)`
/// (earliest step on ties).
pub fn detect_phases(trace: &MiTrace, smoothing_window: usize) -> Result<PhaseReport> {
    if smoothing_window == 0 || smoothing_window % 2 == 0 {
        return Err(Error::invalid(format!(
            "smoothing window must be a positive odd integer, got {smoothing_window}"
        )));
    }
    if trace.points.len() < smoothing_window {
        return Err(Error::invalid(format!(
            "too-short trace: {} points for smoothing window {smoothing_window}",
            trace.points.len()
        )));
    }
    let smoothed = moving_average(&trace.i_tx(), smoothing_window);
    let mut peak_index = 0;
    for (i, &v) in smoothed.iter().enumerate() {
        if v > smoothed[peak_index] {
            peak_index = i;
        }
    }
    let steps = trace.steps();
    let last = steps.len() - 1;
    Ok(PhaseReport {
        layer: trace.layer,
        peak_step: steps[peak_index],
        peak_index,
        fitting_range: StepRange {
            start: steps[0],
            end: steps[peak_index],
        },
        compression_range: (peak_index < last).then(|| StepRange {
            start: steps[peak_index + 1],
            end: steps[last],
        }),
        smoothing_window,
        smoothed_i_tx: smoothed,
    })
}

/// Sample Pearson correlation coefficient.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::invalid("correlation needs at least two points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&x, &y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Undefined(
            "undefined correlation: constant input".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(values: &[f64]) -> MiTrace {
        let steps: Vec<u64> = (0..values.len() as u64).map(|s| s * 10).collect();
        MiTrace::from_i_tx(0, &steps, values).unwrap()
    }

    #[test]
    fn unimodal_peak() {
        let r = detect_phases(&trace(&[0.0, 1.0, 2.0, 1.0, 0.0]), 1).unwrap();
        assert_eq!(r.peak_index, 2);
        assert_eq!(r.peak_step, 20);
        assert_eq!(r.fitting_range, StepRange { start: 0, end: 20 });
        assert_eq!(r.compression_range, Some(StepRange { start: 30, end: 40 }));
    }

    #[test]
    fn monotone_has_no_compression() {
        let r = detect_phases(&trace(&[0.0, 1.0, 2.0, 3.0]), 3).unwrap();
        assert_eq!(r.peak_index, 3);
        assert_eq!(r.compression_range, None);
    }

    #[test]
    fn ties_pick_earliest() {
        let r = detect_phases(&trace(&[1.0, 3.0, 3.0, 1.0]), 1).unwrap();
        assert_eq!(r.peak_index, 1);
    }

    #[test]
    fn window_errors() {
        assert!(detect_phases(&trace(&[1.0]), 3).is_err());
        assert!(detect_phases(&trace(&[1.0, 2.0]), 2).is_err());
        assert!(detect_phases(&trace(&[1.0, 2.0]), 0).is_err());
    }

    #[test]
    fn moving_average_edges() {
        assert_eq!(moving_average(&[3.0, 0.0, 6.0], 3), vec![1.5, 3.0, 3.0]);
    }

    #[test]
    fn steps_must_increase() {
        assert!(MiTrace::from_i_tx(0, &[0, 0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pearson_examples() {
        let xs = [1.0, 2.0, 3.0, 4.5];
        assert_eq!(pearson(&xs, &xs).unwrap(), 1.0);
        let neg: Vec<f64> = xs.iter().map(|v| -v).collect();
        assert_eq!(pearson(&xs, &neg).unwrap(), -1.0);

        // Direct arithmetic: cov = 3, var_x = 2, var_y = 14/3 (sums of squares).
        let oracle = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        let r = pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - oracle).abs() < 1e-15);
        assert!((r - 0.981).abs() < 1e-3);

        assert!(matches!(
            pearson(&[1.0, 1.0], &[1.0, 2.0]),
            Err(Error::Undefined(_))
        ));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }
}
