//! Dense row-major matrices and the small symmetric eigensolver used by the
//! spectral positional encoding.

use crate::error::{DegtaError, Result};

/// Dense row-major matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match extents");
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from per-row slices, rejecting ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DegtaError::RaggedRows {
                    row: i,
                    got: r.len(),
                    expected: cols,
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "inner dimensions must agree");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                let dst = out.row_mut(i);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Sums addends in a label-independent order (sorted by total order) so that
/// results are bit-identical under any permutation of the inputs.
pub fn sum_canonical(buf: &mut Vec<f64>) -> f64 {
    buf.sort_unstable_by(|a, b| a.total_cmp(b));
    let s = buf.iter().sum();
    buf.clear();
    s
}

/// Jacobi eigendecomposition of a symmetric matrix: `a = V diag(l) V^T`.
///
/// Returns eigenvalues (unsorted) and the eigenvector matrix whose columns
/// are unit eigenvectors. Cyclic sweeps over the upper triangle; converges
/// when the off-diagonal sum drops below `tol`.
pub fn eigen_sym(a: &Matrix, tol: f64, max_sweeps: usize) -> Result<(Vec<f64>, Matrix)> {
    assert_eq!(a.rows, a.cols, "matrix must be square");
    let n = a.rows;
    let mut a = a.clone();
    let mut v = Matrix::identity(n);
    let mut l: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    let mut b = l.clone();
    let mut z = vec![0.0; n];

    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)].abs();
            }
        }
        if off < tol {
            return Ok((l, v));
        }

        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                if a[(p, q)] == 0.0 {
                    continue;
                }
                let h = l[q] - l[p];
                let t = if h.abs() <= tol {
                    1.0
                } else {
                    let theta = 0.5 * h / a[(p, q)];
                    let mut t = 1.0 / (theta.abs() + (1.0 + theta * theta).sqrt());
                    if theta < 0.0 {
                        t = -t;
                    }
                    t
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);
                let h = t * a[(p, q)];
                z[p] -= h;
                z[q] += h;
                l[p] -= h;
                l[q] += h;
                a[(p, q)] = 0.0;
                for j in 0..p {
                    let g = a[(j, p)];
                    let h = a[(j, q)];
                    a[(j, p)] = g - s * (h + g * tau);
                    a[(j, q)] = h + s * (g - h * tau);
                }
                for j in (p + 1)..q {
                    let g = a[(p, j)];
                    let h = a[(j, q)];
                    a[(p, j)] = g - s * (h + g * tau);
                    a[(j, q)] = h + s * (g - h * tau);
                }
                for j in (q + 1)..n {
                    let g = a[(p, j)];
                    let h = a[(q, j)];
                    a[(p, j)] = g - s * (h + g * tau);
                    a[(q, j)] = h + s * (g - h * tau);
                }
                for j in 0..n {
                    let g = v[(j, p)];
                    let h = v[(j, q)];
                    v[(j, p)] = g - s * (h + g * tau);
                    v[(j, q)] = h + s * (g - h * tau);
                }
            }
        }
        for p in 0..n {
            b[p] += z[p];
            z[p] = 0.0;
            l[p] = b[p];
        }
    }

    let mut off = 0.0;
    for p in 0..n {
        for q in (p + 1)..n {
            off += a[(p, q)].abs();
        }
    }
    Err(DegtaError::EigenNoConvergence {
        residual: off,
        sweeps: max_sweeps,
    })
}
