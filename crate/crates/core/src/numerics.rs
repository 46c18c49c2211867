//! Dense vector/matrix kernel shared by every other module.
//!
//! Everything here is plain `f64`; on-disk payloads are `f32` and widened on
//! load. The finite-difference routine is the oracle used by the gradient
//! tests across the crate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Row-major dense matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LabError::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(coordinate) = data.iter().position(|v| !v.is_finite()) {
            return Err(LabError::NonFinite { coordinate });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equal-length rows. `cols` is needed so that an
    /// empty row list still carries a width.
    pub fn from_rows(cols: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(LabError::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Entries drawn i.i.d. from N(0, scale²).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-width matrix still has rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &DenseMatrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(LabError::DimensionMismatch {
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let lhs = self.row(i);
            let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    /// `self += factor * other`, shapes must agree.
    pub fn add_scaled(&mut self, other: &DenseMatrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LabError::DimensionMismatch {
                expected: self.data.len(),
                actual: other.data.len(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Mean of all rows; `None` for an empty matrix.
    pub fn mean_row(&self) -> Option<Vec<f64>> {
        if self.rows == 0 {
            return None;
        }
        let mut acc = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.rows as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Some(acc)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine of the angle between `a` and `b`, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(LabError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (aa, bb) = (dot(a, a), dot(b, b));
    if aa == 0.0 || bb == 0.0 {
        return Err(LabError::ZeroNorm);
    }
    Ok((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// `ln Σ exp(v_i)` with the max-shift trick.
pub fn logsumexp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(LabError::EmptyInput("logsumexp of an empty vector"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if let Some(coordinate) = values.iter().position(|v| !v.is_finite()) {
        return Err(LabError::NonFinite { coordinate });
    }
    if values.len() == 1 {
        return Ok(values[0]);
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + sum.ln())
}

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of `f` at `params`.
pub fn finite_difference_gradient<F>(mut f: F, params: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(LabError::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = f(&probe);
        probe[i] = orig - eps;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(LabError::NonFinite { coordinate: i });
        }
        grad.push((up - down) / (2.0 * eps));
    }
    Ok(grad)
}

/// `max|a - g| / (max(|a|, |g|) + 1e-8)` over all coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, g)| (a - g).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    diff / (scale + 1e-8)
}

/// Orthogonal matrix from the QR factorisation (modified Gram-Schmidt) of
/// a seeded Gaussian matrix.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DenseMatrix {
    loop {
        let g = DenseMatrix::gaussian(n, n, 1.0, rng);
        // Orthonormalise columns: work on the transpose so columns are rows.
        let mut basis = g.transpose();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let (done, rest) = basis.data.split_at_mut(i * n);
                let qj = &done[j * n..(j + 1) * n];
                let vi = &mut rest[..n];
                let proj = dot(qj, vi);
                vi.iter_mut().zip(qj).for_each(|(v, q)| *v -= proj * q);
            }
            let row = basis.row_mut(i);
            let norm = l2_norm(row);
            if norm < 1e-10 {
                ok = false;
                break;
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        if ok {
            return basis.transpose();
        }
    }
}
