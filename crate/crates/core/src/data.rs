//! Observations, covariance estimation and the demixing transform.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcaError};

/// `N` observations of an `m`-component random vector, one observation per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: DMatrix<f64>,
}

impl Dataset {
    pub fn new(samples: DMatrix<f64>) -> Result<Self> {
        let (n, m) = samples.shape();
        if n < 2 {
            return Err(TcaError::InvalidData(format!("need at least 2 samples, got {n}")));
        }
        if m < 2 {
            return Err(TcaError::InvalidData(format!("need at least 2 components, got {m}")));
        }
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(TcaError::InvalidData(format!(
                "non-finite value at row {}, column {}",
                pos % n,
                pos / n
            )));
        }
        Ok(Self { samples })
    }

    /// Builds a dataset from row-major observations.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != m) {
            return Err(TcaError::InvalidData(format!(
                "row {i} has {} values, expected {m}",
                r.len()
            )));
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
    }

    /// Builds a dataset from per-component columns.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let m = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != n) {
            return Err(TcaError::InvalidData("columns have unequal lengths".into()));
        }
        Self::new(DMatrix::from_fn(n, m, |i, j| columns[j][i]))
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn into_samples(self) -> DMatrix<f64> {
        self.samples
    }

    pub fn n(&self) -> usize {
        self.samples.nrows()
    }

    pub fn m(&self) -> usize {
        self.samples.ncols()
    }

    /// Samples of component `j` as a contiguous slice.
    pub fn component(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.samples.as_slice()[j * n..(j + 1) * n]
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.m())
            .map(|j| self.component(j).iter().sum::<f64>() / self.n() as f64)
            .collect()
    }

    /// Copy with every component shifted to zero sample mean.
    pub fn centered(&self) -> Dataset {
        let means = self.means();
        let mut samples = self.samples.clone();
        for (j, mut col) in samples.column_iter_mut().enumerate() {
            col.add_scalar_mut(-means[j]);
        }
        Dataset { samples }
    }

    /// Rows selected by `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Dataset> {
        let m = self.m();
        Dataset::new(DMatrix::from_fn(indices.len(), m, |i, j| {
            self.samples[(indices[i], j)]
        }))
    }
}

/// Empirical covariance together with its symmetric inverse square root.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    sigma: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
    sqrt: DMatrix<f64>,
}

impl CovarianceMatrix {
    /// Wraps a known covariance (e.g. a population matrix).
    pub fn from_sigma(sigma: DMatrix<f64>) -> Result<Self> {
        if !sigma.is_square() {
            return Err(TcaError::DimensionMismatch {
                expected: sigma.nrows(),
                actual: sigma.ncols(),
            });
        }
        let sigma = (&sigma + sigma.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sigma.clone());
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(max > 0.0) || min < 1e-12 * max {
            return Err(TcaError::SingularCovariance {
                ratio: if max > 0.0 { min / max } else { 0.0 },
            });
        }
        let v = &eig.eigenvectors;
        let inv_sqrt =
            v * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * v.transpose();
        let sqrt = v * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * v.transpose();
        Ok(Self {
            sigma,
            inv_sqrt,
            sqrt,
        })
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// The unique symmetric positive-definite `Σ^{-1/2}`.
    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn dim(&self) -> usize {
        self.sigma.nrows()
    }
}

/// Mean-centered second moments, normalized by `N`.
pub fn estimate_covariance(data: &Dataset) -> Result<CovarianceMatrix> {
    let centered = data.centered();
    let x = centered.samples();
    let sigma = x.transpose() * x / data.n() as f64;
    CovarianceMatrix::from_sigma(sigma)
}

/// An invertible `m x m` demixing matrix `W`, acting as `s = W x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct DemixingMatrix(DMatrix<f64>);

impl DemixingMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() {
            return Err(TcaError::DimensionMismatch {
                expected: w.nrows(),
                actual: w.ncols(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(TcaError::InvalidData("non-finite demixing entry".into()));
        }
        let det = w.determinant();
        if det == 0.0 || !det.is_finite() {
            return Err(TcaError::SingularMatrix { det });
        }
        Ok(Self(w))
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().copied().collect()
    }

    pub fn log_abs_det(&self) -> f64 {
        self.0.determinant().abs().ln()
    }

    /// `W_a W_b`, the transform that applies `b` first.
    pub fn compose(&self, other: &DemixingMatrix) -> Result<DemixingMatrix> {
        DemixingMatrix::new(&self.0 * &other.0)
    }

    pub fn inverse(&self) -> Result<DMatrix<f64>> {
        self.0
            .clone()
            .try_inverse()
            .ok_or(TcaError::SingularMatrix { det: 0.0 })
    }
}

impl TryFrom<Vec<Vec<f64>>> for DemixingMatrix {
    type Error = TcaError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let m = rows.len();
        if rows.iter().any(|r| r.len() != m) {
            return Err(TcaError::InvalidData("demixing matrix must be square".into()));
        }
        DemixingMatrix::new(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
    }
}

impl From<DemixingMatrix> for Vec<Vec<f64>> {
    fn from(w: DemixingMatrix) -> Self {
        matrix_rows(&w.0)
    }
}

pub fn matrix_rows(a: &DMatrix<f64>) -> Vec<Vec<f64>> {
    a.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != m) {
        return Err(TcaError::InvalidData("ragged matrix rows".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Applies `s = W x` to every observation.
pub fn transform_sources(w: &DemixingMatrix, data: &Dataset) -> Result<Dataset> {
    transform_with_matrix(w.matrix(), data)
}

pub(crate) fn transform_with_matrix(w: &DMatrix<f64>, data: &Dataset) -> Result<Dataset> {
    if w.ncols() != data.m() || w.nrows() != data.m() {
        return Err(TcaError::DimensionMismatch {
            expected: data.m(),
            actual: w.ncols(),
        });
    }
    Ok(Dataset {
        samples: data.samples() * w.transpose(),
    })
}

/// One source component `s_i = x w_i^T` for row `w_i`.
pub(crate) fn project_row(data: &Dataset, row: &[f64]) -> Vec<f64> {
    let n = data.n();
    let mut out = vec![0.0; n];
    for (j, &wj) in row.iter().enumerate() {
        if wj == 0.0 {
            continue;
        }
        for (o, &x) in out.iter_mut().zip(data.component(j)) {
            *o += wj * x;
        }
    }
    out
}

pub(crate) fn mean_and_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
