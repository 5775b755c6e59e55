//! Kernel functions and Gram matrices over row-major sample matrices.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−‖x−z‖² / (2σ²))`
    Rbf {
        sigma: f64,
    },
    /// `(x·z + coef0)^degree`
    Polynomial {
        degree: u32,
        coef0: f64,
    },
    Linear,
}

impl KernelSpec {
    /// RBF written as `exp(−γ‖x−z‖²)`.
    pub fn rbf_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::Argument(format!("gamma must be positive, got {gamma}")));
        }
        Ok(KernelSpec::Rbf { sigma: (0.5 / gamma).sqrt() })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Rbf { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(Error::Argument(format!("rbf sigma must be positive, got {sigma}")))
            }
            KernelSpec::Polynomial { degree: 0, .. } => Err(Error::Argument("polynomial degree must be at least 1".into())),
            KernelSpec::Polynomial { coef0, .. } if !coef0.is_finite() => Err(Error::Argument("polynomial coef0 must be finite".into())),
            _ => Ok(()),
        }
    }

    /// Kernel value from the dot product and the two squared norms.
    #[inline]
    pub fn from_dot(&self, dot: f64, norm_a: f64, norm_b: f64) -> f64 {
        match *self {
            KernelSpec::Rbf { sigma } => {
                let d2 = (norm_a + norm_b - 2.0 * dot).max(0.0);
                (-0.5 * d2 / (sigma * sigma)).exp()
            }
            KernelSpec::Polynomial { degree, coef0 } => (dot + coef0).powi(degree as i32),
            KernelSpec::Linear => dot,
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Rbf { sigma } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-0.5 * d2 / (sigma * sigma)).exp()
            }
            _ => self.from_dot(dot(a, b), 0.0, 0.0),
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense row-major `rows × cols` sample matrix, one sample per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl SampleMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Size {
                expected: rows * cols,
                found: data.len(),
            });
        }
        if cols == 0 {
            return Err(Error::Argument("samples must have at least one feature".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Value("sample matrix has non-finite entries".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if let Some(bad) = rows.iter().find(|r| r.as_ref().len() != cols) {
            return Err(Error::Size {
                expected: cols,
                found: bad.as_ref().len(),
            });
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols)
    }

    /// Rows picked by index, repeats allowed.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn squared_norms(&self) -> Vec<f64> {
        self.iter_rows().map(|r| dot(r, r)).collect()
    }
}

/// `X·Xᵀ` via a blocked GEMM.
pub(crate) fn inner_products(x: &SampleMatrix) -> DMatrix<f64> {
    let n = x.rows;
    let d = x.cols;
    let mut out = vec![0.0f64; n * n];
    // SAFETY: dimensions and strides describe `x.data` (n×d row-major), its
    // transpose, and `out` (n×n row-major) exactly.
    unsafe {
        matrixmultiply::dgemm(
            n,
            d,
            n,
            1.0,
            x.data.as_ptr(),
            d as isize,
            1,
            x.data.as_ptr(),
            1,
            d as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    let mut g = DMatrix::from_row_slice(n, n, &out);
    // GEMM blocking can leave last-bit asymmetry.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Pairwise squared distances from an inner-product matrix.
pub(crate) fn squared_distances(inner: &DMatrix<f64>) -> DMatrix<f64> {
    let n = inner.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (inner[(i, i)] + inner[(j, j)] - 2.0 * inner[(i, j)]).max(0.0)
        }
    })
}

pub(crate) fn gram_from_inner(inner: &DMatrix<f64>, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = inner.nrows();
    let mut k = DMatrix::from_fn(n, n, |i, j| kernel.from_dot(inner[(i, j)], inner[(i, i)], inner[(j, j)]));
    if matches!(kernel, KernelSpec::Rbf { .. }) {
        k.fill_diagonal(1.0);
    }
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("gram matrix has non-finite entries".into()));
    }
    Ok(k)
}

/// `K_ij = k(x_i, x_j)`.
pub fn gram_matrix(x: &SampleMatrix, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    if x.rows() < 2 {
        return Err(Error::Argument(format!("gram matrix needs at least 2 samples, got {}", x.rows())));
    }
    gram_from_inner(&inner_products(x), kernel)
}

/// Kernel values between each row of `a` and each row of `b` (`a.rows × b.rows`).
pub fn cross_gram(a: &SampleMatrix, b: &SampleMatrix, kernel: &KernelSpec) -> Result<DMatrix<f64>> {
    kernel.validate()?;
    if a.cols() != b.cols() {
        return Err(Error::Argument(format!("feature dimension mismatch: {} vs {}", a.cols(), b.cols())));
    }
    let bn = b.squared_norms();
    let rows: Vec<Vec<f64>> = a
        .iter_rows()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|ra| {
            let na = dot(ra, ra);
            b.iter_rows().zip(&bn).map(|(rb, &nb)| kernel.from_dot(dot(ra, rb), na, nb)).collect()
        })
        .collect();
    let k = DMatrix::from_fn(a.rows(), b.rows(), |i, j| rows[i][j]);
    if k.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("kernel matrix has non-finite entries".into()));
    }
    Ok(k)
}

/// Median of the pairwise Euclidean distances (strict upper triangle).
pub(crate) fn median_pairwise_distance(inner: &DMatrix<f64>) -> f64 {
    let d2 = squared_distances(inner);
    let n = d2.nrows();
    let mut v: Vec<f64> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .map(|(i, j)| d2[(i, j)].sqrt())
        .collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len();
    if m % 2 == 1 {
        v[m / 2]
    } else {
        0.5 * (v[m / 2 - 1] + v[m / 2])
    }
}
