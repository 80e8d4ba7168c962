// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear probes: L2-regularized logistic regression on standardized
//! activations, and the checkpoint × layer sweep that fits one probe per cell.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::{read_actv_file, ActivationDataset, Manifest, ManifestEntry, SweepKey};
use crate::datasets::{make_split_with, SplitScheme};
use crate::error::{Error, Result};

/// Hyperparameters of [`fit_probe`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights (the bias is not penalized).
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the Euclidean norm of the full gradient drops below this.
    pub grad_tol: f64,
    /// Fixed gradient-descent step. `None` uses `1 / L`, with `L` the
    /// smoothness constant of the objective estimated from the data.
    pub learning_rate: Option<f64>,
    /// Standardize features with train-split mean and standard deviation.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            max_iters: 2000,
            grad_tol: 1e-6,
            learning_rate: None,
            standardize: true,
        }
    }
}

/// A fitted binary linear classifier.
///
/// The affine score of a row `x` is `Σ w_j (x_j − mean_j) / scale_j + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Accuracy on the rows the model was fitted to.
    pub train_accuracy: f64,
    pub n_train: usize,
    pub seed: u64,
    /// Gradient-descent iterations actually run.
    pub iterations: usize,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Pre-sigmoid score ("probe logit") of one activation row.
    pub fn logit(&self, row: &[f32]) -> f64 {
        debug_assert_eq!(row.len(), self.dim());
        let mut z = self.bias;
        for (((&x, w), m), s) in row
            .iter()
            .zip(&self.weights)
            .zip(&self.mean)
            .zip(&self.scale)
        {
            z += w * ((x as f64 - m) / s);
        }
        z
    }

    pub fn probability(&self, row: &[f32]) -> f64 {
        sigmoid(self.logit(row))
    }

    /// Predicted class; a probability of exactly 0.5 predicts class 1.
    pub fn predict(&self, row: &[f32]) -> u8 {
        u8::from(self.probability(row) >= 0.5)
    }

    pub fn accuracy(&self, data: &ActivationDataset) -> Result<f64> {
        if data.d() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.d(),
            });
        }
        let correct = data
            .rows()
            .zip(data.labels())
            .filter(|(row, &y)| self.predict(row) == y)
            .count();
        Ok(correct as f64 / data.n() as f64)
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Evaluation record for one `(checkpoint, layer)` cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub key: SweepKey,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// Largest eigenvalue of `AᵀA / n` for the standardized design augmented with
/// a constant column, by power iteration.
fn gram_spectral_radius(z: &[f64], n: usize, d: usize) -> f64 {
    let mut v = vec![1.0 / ((d + 1) as f64).sqrt(); d + 1];
    let mut lambda = 0.0;
    let mut av = vec![0.0; n];
    for _ in 0..100 {
        for i in 0..n {
            let row = &z[i * d..(i + 1) * d];
            av[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum::<f64>() + v[d];
        }
        let mut w = vec![0.0; d + 1];
        for i in 0..n {
            let row = &z[i * d..(i + 1) * d];
            for j in 0..d {
                w[j] += row[j] * av[i];
            }
            w[d] += av[i];
        }
        w.iter_mut().for_each(|x| *x /= n as f64);
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        v = w.into_iter().map(|x| x / norm).collect();
        if (next - lambda).abs() <= 1e-9 * next {
            return next;
        }
        lambda = next;
    }
    lambda
}

/// Fits a logistic-regression probe by full-batch gradient descent.
///
/// Deterministic: the same data and config give bitwise-equal weights. The
/// seed is recorded in the model for provenance.
pub fn fit_probe(train: &ActivationDataset, config: &ProbeConfig, seed: u64) -> Result<ProbeModel> {
    let (n, d) = (train.n(), train.d());
    let (neg, pos) = train.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::invalid(
            "probe training set must contain both classes",
        ));
    }
    if train.activations().iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(
            "non-finite activations in probe training set",
        ));
    }

    let mut mean = vec![0.0; d];
    let mut scale = vec![1.0; d];
    if config.standardize {
        for row in train.rows() {
            for j in 0..d {
                mean[j] += row[j] as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for row in train.rows() {
            for j in 0..d {
                let c = row[j] as f64 - mean[j];
                var[j] += c * c;
            }
        }
        for j in 0..d {
            let sd = (var[j] / n as f64).sqrt();
            scale[j] = if sd > 0.0 { sd } else { 1.0 };
        }
    }
    let mut z = Vec::with_capacity(n * d);
    for row in train.rows() {
        for j in 0..d {
            z.push((row[j] as f64 - mean[j]) / scale[j]);
        }
    }
    let y: Vec<f64> = train.labels().iter().map(|&v| v as f64).collect();

    let step = match config.learning_rate {
        Some(lr) if lr > 0.0 && lr.is_finite() => lr,
        Some(lr) => {
            return Err(Error::invalid(format!(
                "learning rate {lr} must be positive"
            )))
        }
        None => 1.0 / (0.25 * gram_spectral_radius(&z, n, d) + config.l2),
    };

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut grad = vec![0.0; d];
    let mut iterations = 0;
    while iterations < config.max_iters {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut grad_b = 0.0;
        for i in 0..n {
            let row = &z[i * d..(i + 1) * d];
            let s = b + row.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = sigmoid(s) - y[i];
            for j in 0..d {
                grad[j] += r * row[j];
            }
            grad_b += r;
        }
        for j in 0..d {
            grad[j] = grad[j] / n as f64 + config.l2 * w[j];
        }
        grad_b /= n as f64;
        let norm = (grad.iter().map(|g| g * g).sum::<f64>() + grad_b * grad_b).sqrt();
        if norm < config.grad_tol {
            break;
        }
        for j in 0..d {
            w[j] -= step * grad[j];
        }
        b -= step * grad_b;
        iterations += 1;
    }

    if w.iter().any(|v| !v.is_finite()) || !b.is_finite() {
        return Err(Error::Undefined("probe training diverged".into()));
    }
    let mut model = ProbeModel {
        weights: w,
        bias: b,
        mean,
        scale,
        train_accuracy: 0.0,
        n_train: n,
        seed,
        iterations,
    };
    model.train_accuracy = model.accuracy(train)?;
    Ok(model)
}

/// Scores `model` on `test`.
pub fn eval_probe(model: &ProbeModel, test: &ActivationDataset) -> Result<ProbeReport> {
    let test_accuracy = model.accuracy(test)?;
    Ok(ProbeReport {
        key: test.meta().key(),
        test_accuracy,
        train_accuracy: model.train_accuracy,
        n_train: model.n_train,
        n_test: test.n(),
        seed: model.seed,
    })
}

/// Splits one dataset with `scheme`, fits on the train rows and evaluates on
/// the test rows.
pub fn probe_dataset(
    data: &ActivationDataset,
    scheme: SplitScheme,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeModel, ProbeReport)> {
    let plan = make_split_with(data.n(), seed, scheme)?;
    let train = data.select(&plan.train)?;
    let test = data.select(&plan.test)?;
    let model = fit_probe(&train, config, seed)?;
    let report = eval_probe(&model, &test)?;
    Ok((model, report))
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Result of one sweep cell.
#[derive(Debug, Clone, PartialEq)]
pub enum SweepOutcome {
    Report(ProbeReport),
    Failed { key: SweepKey, error: String },
}

impl SweepOutcome {
    pub fn key(&self) -> &SweepKey {
        match self {
            Self::Report(r) => &r.key,
            Self::Failed { key, .. } => key,
        }
    }

    pub fn report(&self) -> Option<&ProbeReport> {
        match self {
            Self::Report(r) => Some(r),
            Self::Failed { .. } => None,
        }
    }
}

/// Fits and evaluates one probe per manifest entry.
///
/// Entries are processed in [`SweepKey`] order (duplicates are rejected up
/// front). A cell whose file cannot be read or fitted becomes
/// [`SweepOutcome::Failed`] and the sweep continues.
pub fn probe_sweep(
    manifest: &Manifest,
    base_dir: &Path,
    scheme: SplitScheme,
    config: &ProbeConfig,
    seed: u64,
) -> Result<Vec<SweepOutcome>> {
    let entries = manifest.ordered_entries()?;
    Ok(entries
        .par_iter()
        .map(
            |entry| match probe_entry(entry, base_dir, scheme, config, seed) {
                Ok(report) => SweepOutcome::Report(report),
                Err(e) => SweepOutcome::Failed {
                    key: entry.key(),
                    error: e.to_string(),
                },
            },
        )
        .collect())
}

fn probe_entry(
    entry: &ManifestEntry,
    base_dir: &Path,
    scheme: SplitScheme,
    config: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let path = Manifest::resolve_path(entry, base_dir);
    let data = read_actv_file(&path)?;
    crate::actv::check_entry_meta(entry, data.meta(), &path)?;
    let (_, mut report) = probe_dataset(&data, scheme, config, seed)?;
    report.key = entry.key();
    Ok(report)
}

#[derive(Serialize)]
struct ReportRow<'a> {
    checkpoint_id: &'a str,
    layer: u32,
    test_accuracy: f64,
    train_accuracy: f64,
    n_train: usize,
    n_test: usize,
    seed: u64,
}

/// Writes reports as CSV: `checkpoint_id, layer, test_accuracy,
/// train_accuracy, n_train, n_test, seed`.
pub fn write_reports_csv<W: Write>(reports: &[ProbeReport], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for r in reports {
        out.serialize(ReportRow {
            checkpoint_id: &r.key.checkpoint_id,
            layer: r.key.layer,
            test_accuracy: r.test_accuracy,
            train_accuracy: r.train_accuracy,
            n_train: r.n_train,
            n_test: r.n_test,
            seed: r.seed,
        })?;
    }
    if reports.is_empty() {
        out.write_record([
            "checkpoint_id",
            "layer",
            "test_accuracy",
            "train_accuracy",
            "n_train",
            "n_test",
            "seed",
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a CSV produced by [`write_reports_csv`].
pub fn read_reports_csv<R: std::io::Read>(reader: R) -> Result<Vec<ProbeReport>> {
    #[derive(Deserialize)]
    struct Row {
        checkpoint_id: String,
        layer: u32,
        test_accuracy: f64,
        train_accuracy: f64,
        n_train: usize,
        n_test: usize,
        seed: u64,
    }
    let mut rdr = csv::Reader::from_reader(reader);
    rdr.deserialize::<Row>()
        .map(|row| {
            let r = row?;
            Ok(ProbeReport {
                key: SweepKey::new(r.checkpoint_id, r.layer),
                test_accuracy: r.test_accuracy,
                train_accuracy: r.train_accuracy,
                n_train: r.n_train,
                n_test: r.n_test,
                seed: r.seed,
            })
        })
        .collect()
}
