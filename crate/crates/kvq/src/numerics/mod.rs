//! Minimal dense linear algebra used by every other module.
//!
//! Everything is `f64` row-major. Reductions accumulate strictly
//! left-to-right over the contraction index, never reassociated, so results
//! are reproducible across runs and across parallel callers.

mod rng;

pub use rng::{sample_gaussian, Covariance, SeededRng};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data. Rejects length mismatches and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry {} of a {}x{} matrix",
                pos, rows, cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from a slice of equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("matrix rows".into()));
        }
        let cols = rows[0].len();
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::Dimension(format!(
                "row {} has length {}, expected {}",
                bad,
                rows[bad].len(),
                cols
            )));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Borrows row `r` as a contiguous slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Standard product `self * other`.
    ///
    /// Each output cell is a dot product accumulated left-to-right over the
    /// contraction index, bit-for-bit identical to the naive triple loop.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        Ok(out)
    }

    /// `self * other^T` without materializing the transpose. Same
    /// left-to-right accumulation as [`Matrix::matmul`].
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_nt {}x{} by {}x{}^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Max absolute entry; 0 for an empty matrix.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm, accumulated left-to-right.
    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Left-to-right dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Euclidean norm of a slice.
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Symmetric positive-definite matrix. Symmetry is validated on
/// construction; positive definiteness is verified indirectly by
/// [`cholesky`] succeeding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>,
}

/// Relative symmetry tolerance for SPD construction.
const SYMMETRY_TOL: f64 = 1e-9;

impl SpdMatrix {
    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Dimension(format!(
                "SPD matrix must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        let scale = m.max_abs().max(1.0);
        for r in 0..m.rows() {
            for c in (r + 1)..m.cols() {
                let gap = (m.get(r, c) - m.get(c, r)).abs();
                if gap > SYMMETRY_TOL * scale {
                    return Err(Error::NotSymmetric(format!(
                        "|a[{r},{c}] - a[{c},{r}]| = {gap:e} exceeds {SYMMETRY_TOL:e} relative"
                    )));
                }
            }
        }
        Ok(Self {
            dim: m.rows(),
            data: m.data().to_vec(),
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            data: Matrix::identity(dim).data().to_vec(),
        }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &v) in diag.iter().enumerate() {
            data[i * dim + i] = v;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// Returns `self + eps * (trace/dim) * I`, the scale-invariant jitter
    /// used before factorization of possibly rank-deficient moments.
    pub fn regularized(&self, eps: f64) -> SpdMatrix {
        if eps == 0.0 {
            return self.clone();
        }
        let jitter = eps * self.trace() / self.dim as f64;
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += jitter;
        }
        out
    }

    /// Quadratic form `v * self * v^T` for a row vector `v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut acc = 0.0;
        for r in 0..self.dim {
            let mut inner = 0.0;
            for c in 0..self.dim {
                inner += self.data[r * self.dim + c] * v[c];
            }
            acc += v[r] * inner;
        }
        acc
    }
}

/// Lower-triangular Cholesky factor with strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    data: Vec<f64>, // row-major, upper part zero
}

impl CholeskyFactor {
    /// Validates that `m` is lower-triangular with positive diagonal.
    pub fn from_lower(m: &Matrix) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::Dimension(format!(
                "factor must be square, got {}x{}",
                m.rows(),
                m.cols()
            )));
        }
        for r in 0..m.rows() {
            for c in (r + 1)..m.cols() {
                if m.get(r, c) != 0.0 {
                    return Err(Error::Format(format!(
                        "upper-triangular entry [{r},{c}] = {} is nonzero",
                        m.get(r, c)
                    )));
                }
            }
            if m.get(r, r) <= 0.0 {
                return Err(Error::ZeroDiagonal(r));
            }
        }
        Ok(Self {
            dim: m.rows(),
            data: m.data().to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.dim + c]
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.dim,
            cols: self.dim,
            data: self.data.clone(),
        }
    }

    /// Reconstructs `L * L^T` for verification against the source matrix.
    pub fn reconstruct(&self) -> Matrix {
        let l = self.to_matrix();
        l.matmul_nt(&l).expect("square factor")
    }

    /// Solves `L * X = rhs` by forward substitution (column version of the
    /// lower-triangular solve).
    pub fn forward_solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.rows() != self.dim {
            return Err(Error::Dimension(format!(
                "forward_solve: factor dim {} vs rhs rows {}",
                self.dim,
                rhs.rows()
            )));
        }
        let mut x = rhs.clone();
        for c in 0..x.cols() {
            for r in 0..self.dim {
                let mut acc = x.get(r, c);
                for k in 0..r {
                    acc -= self.get(r, k) * x.get(k, c);
                }
                let d = self.get(r, r);
                if d == 0.0 {
                    return Err(Error::ZeroDiagonal(r));
                }
                x.set(r, c, acc / d);
            }
        }
        Ok(x)
    }

    /// Solves `X * L = rhs` for row-vector systems; this is the
    /// multiply-by-`L^{-1}`-on-the-right used to map transformed codewords
    /// back to the original space.
    pub fn right_solve(&self, rhs: &Matrix) -> Result<Matrix> {
        if rhs.cols() != self.dim {
            return Err(Error::Dimension(format!(
                "right_solve: factor dim {} vs rhs cols {}",
                self.dim,
                rhs.cols()
            )));
        }
        let mut x = rhs.clone();
        for r in 0..x.rows() {
            // b_j = sum_{i >= j} x_i L[i][j]; solve from the last column down.
            for j in (0..self.dim).rev() {
                let mut acc = x.get(r, j);
                for i in (j + 1)..self.dim {
                    acc -= x.get(r, i) * self.get(i, j);
                }
                let d = self.get(j, j);
                if d == 0.0 {
                    return Err(Error::ZeroDiagonal(j));
                }
                x.set(r, j, acc / d);
            }
        }
        Ok(x)
    }
}

/// Cholesky decomposition of an SPD matrix into `L * L^T`.
///
/// A non-positive pivot is an error; callers decide whether and how to
/// regularize, this routine never does.
pub fn cholesky(h: &SpdMatrix) -> Result<CholeskyFactor> {
    let n = h.dim();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut pivot = h.get(j, j);
        for k in 0..j {
            pivot -= l[j * n + k] * l[j * n + k];
        }
        if pivot <= 0.0 || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite { index: j, pivot });
        }
        let diag = pivot.sqrt();
        l[j * n + j] = diag;
        for i in (j + 1)..n {
            let mut acc = h.get(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = acc / diag;
        }
    }
    Ok(CholeskyFactor { dim: n, data: l })
}
