// SPDX-License-Identifier: MIT OR Apache-2.0

//! Gaussian-kernel HSIC estimator and bandwidth search.
//!
//! The empirical estimator is
//!
//! ```text
//! HSIC(X, Y) = (n − 1)⁻² · tr(K_X H K_Y H),    H = I − 11ᵀ/n
//! ```
//!
//! with `K[i][j] = exp(−‖x_i − x_j‖² / (2σ²))`. Because `H` is idempotent the
//! trace equals the Frobenius inner product of the two double-centered Gram
//! matrices, which is what [`hsic`] computes in `O(n²)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actv::ActivationDataset;
use crate::error::{Error, Result};

/// Default bandwidth grid: 50 to 400 in steps of 50.
pub const DEFAULT_SIGMA_GRID: [f64; 8] = [50.0, 100.0, 150.0, 200.0, 250.0, 300.0, 350.0, 400.0];

/// Row-major `n × dim` sample matrix in double precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Samples {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Samples {
    pub fn new(n: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("samples need at least one column"));
        }
        if data.len() != n * dim {
            return Err(Error::validation(format!(
                "sample buffer has {} values, expected {n}×{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite sample value"));
        }
        Ok(Self { n, dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(1);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn from_dataset(data: &ActivationDataset) -> Self {
        Self {
            n: data.n(),
            dim: data.d(),
            data: data.activations().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Binary labels as a one-column matrix of 0.0 / 1.0.
    pub fn from_labels(labels: &[u8]) -> Self {
        Self {
            n: labels.len(),
            dim: 1,
            data: labels.iter().map(|&y| y as f64).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Same rows reordered by `perm` (`out[k] = self[perm[k]]`).
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for &p in perm {
            data.extend_from_slice(self.row(p));
        }
        Self {
            n: perm.len(),
            dim: self.dim,
            data,
        }
    }

    /// Pairwise squared Euclidean distances, `n × n` row-major.
    ///
    /// `D[i][j]` and `D[j][i]` are the same computed value.
    pub fn squared_distances(&self) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            let a = self.row(i);
            for j in (i + 1)..n {
                let b = self.row(j);
                let d2: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                out[i * n + j] = d2;
                out[j * n + i] = d2;
            }
        }
        out
    }
}

/// Symmetric `n × n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    n: usize,
    data: Vec<f64>,
}

impl Gram {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `H K H`: subtract row and column means, add back the grand mean.
    pub fn centered(&self) -> Gram {
        let n = self.n;
        let row_mean: Vec<f64> = self
            .data
            .chunks_exact(n)
            .map(|r| r.iter().sum::<f64>() / n as f64)
            .collect();
        let grand = row_mean.iter().sum::<f64>() / n as f64;
        let mut data = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                data.push(self.data[i * n + j] - row_mean[i] - row_mean[j] + grand);
            }
        }
        Gram { n, data }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )))
    }
}

fn kernel_from_distances(d2: &[f64], n: usize, sigma: f64) -> Gram {
    let denom = 2.0 * sigma * sigma;
    Gram {
        n,
        data: d2.iter().map(|&v| (-v / denom).exp()).collect(),
    }
}

/// Gaussian kernel matrix `K[i][j] = exp(−‖x_i − x_j‖² / (2σ²))`.
///
/// Symmetric with a unit diagonal. Off-diagonal entries lie in `(0, 1]`
/// unless `exp` underflows for points many bandwidths apart.
pub fn gaussian_kernel_matrix(points: &Samples, sigma: f64) -> Result<Gram> {
    check_sigma(sigma)?;
    Ok(kernel_from_distances(
        &points.squared_distances(),
        points.n(),
        sigma,
    ))
}

/// One HSIC evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsicEstimate {
    /// Estimate clamped at zero.
    pub value: f64,
    /// Unclamped estimate; may be a tiny negative number from rounding.
    pub raw: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub n: usize,
}

/// Neumaier-compensated Frobenius inner product of two centered Grams.
fn frobenius(a: &Gram, b: &Gram) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (x, y) in a.data.iter().zip(&b.data) {
        let term = x * y;
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn estimate_from_centered(kx: &Gram, ky: &Gram, sigma_x: f64, sigma_y: f64) -> HsicEstimate {
    let n = kx.n();
    let denom = ((n - 1) * (n - 1)) as f64;
    let raw = frobenius(kx, ky) / denom;
    HsicEstimate {
        value: raw.max(0.0),
        raw,
        sigma_x,
        sigma_y,
        n,
    }
}

fn check_pair(x: &Samples, y: &Samples) -> Result<()> {
    if x.n() != y.n() {
        return Err(Error::DimensionMismatch {
            expected: x.n(),
            got: y.n(),
        });
    }
    if x.n() < 2 {
        return Err(Error::invalid(format!(
            "HSIC needs at least 2 samples, got {}",
            x.n()
        )));
    }
    Ok(())
}

/// Empirical HSIC with Gaussian kernels of bandwidth `sigma_x` and `sigma_y`.
///
/// Symmetric: `hsic(x, y, a, b)` and `hsic(y, x, b, a)` are bitwise equal.
pub fn hsic(x: &Samples, y: &Samples, sigma_x: f64, sigma_y: f64) -> Result<HsicEstimate> {
    check_pair(x, y)?;
    check_sigma(sigma_x)?;
    check_sigma(sigma_y)?;
    let kx = gaussian_kernel_matrix(x, sigma_x)?.centered();
    let ky = gaussian_kernel_matrix(y, sigma_y)?.centered();
    Ok(estimate_from_centered(&kx, &ky, sigma_x, sigma_y))
}

/// Evaluates [`hsic`] for every `(σ_x, σ_y)` in `grid × grid` and returns the
/// largest estimate.
///
/// Ties go to the smaller `σ_x`, then the smaller `σ_y`.
pub fn sigma_search(x: &Samples, y: &Samples, grid: &[f64]) -> Result<HsicEstimate> {
    check_pair(x, y)?;
    if grid.is_empty() {
        return Err(Error::invalid("sigma grid is empty"));
    }
    for &s in grid {
        check_sigma(s)?;
    }
    let mut sigmas = grid.to_vec();
    sigmas.sort_by(f64::total_cmp);
    sigmas.dedup();

    let n = x.n();
    let dx = x.squared_distances();
    let dy = y.squared_distances();
    let y_grams: Vec<Gram> = sigmas
        .par_iter()
        .map(|&s| kernel_from_distances(&dy, n, s).centered())
        .collect();

    let mut best: Option<HsicEstimate> = None;
    for &sx in &sigmas {
        let kx = kernel_from_distances(&dx, n, sx).centered();
        for (ky, &sy) in y_grams.iter().zip(&sigmas) {
            let est = estimate_from_centered(&kx, ky, sx, sy);
            if best.map_or(true, |b| est.raw > b.raw) {
                best = Some(est);
            }
        }
    }
    Ok(best.expect("grid is non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_entries() {
        let sigma = 2.0;
        // Squared distance 2σ² = 8: points (0,0) and (2,2).
        let pts = Samples::from_rows(&[vec![0.0, 0.0], vec![2.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let k = gaussian_kernel_matrix(&pts, sigma).unwrap();
        assert_eq!(k.get(0, 0), 1.0);
        assert_eq!(k.get(0, 2), 1.0);
        assert!((k.get(0, 1) - (-1.0f64).exp()).abs() < 1e-15);
        assert!((k.get(0, 1) - 0.367_879).abs() < 1e-6);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(k.get(i, j).to_bits(), k.get(j, i).to_bits());
            }
        }
    }

    #[test]
    fn bad_sigma() {
        let pts = Samples::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(gaussian_kernel_matrix(&pts, 0.0).is_err());
        assert!(gaussian_kernel_matrix(&pts, -1.0).is_err());
        assert!(hsic(&pts, &pts, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn too_few_rows_or_mismatch() {
        let one = Samples::from_rows(&[vec![0.0]]).unwrap();
        assert!(hsic(&one, &one, 1.0, 1.0).is_err());
        let two = Samples::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let three = Samples::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        assert!(matches!(
            hsic(&two, &three, 1.0, 1.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn constant_side_gives_exact_zero() {
        let x = Samples::from_rows(&[vec![0.0], vec![1.0], vec![5.0], vec![2.0]]).unwrap();
        let y = Samples::from_rows(&[[3.0, 3.0]; 4]).unwrap();
        assert_eq!(hsic(&x, &y, 1.0, 1.0).unwrap().raw, 0.0);
        let best = sigma_search(&x, &y, &DEFAULT_SIGMA_GRID).unwrap();
        assert_eq!(best.value, 0.0);
    }

    #[test]
    fn single_value_grid() {
        let x = Samples::from_rows(&[vec![0.0], vec![1.0], vec![3.0]]).unwrap();
        let y = Samples::from_rows(&[vec![1.0], vec![0.0], vec![3.0]]).unwrap();
        let best = sigma_search(&x, &y, &[7.0]).unwrap();
        assert_eq!((best.sigma_x, best.sigma_y), (7.0, 7.0));
    }

    #[test]
    fn empty_grid() {
        let x = Samples::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(sigma_search(&x, &x, &[]).is_err());
    }
}
