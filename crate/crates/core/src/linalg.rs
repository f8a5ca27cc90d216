//! Dense tensors and the handful of exact kernels the optimizers rely on.
//!
//! Storage is row-major `f64` throughout. Higher layers address tensors through
//! their shape metadata only.

use crate::error::{Error, Result};

/// Dense n-dimensional array of finite `f64` values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` matches `data.len()` and that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data"));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Rank-1 tensor over `data`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Rank-2 tensor from nested rows. Rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Element `[i, j]` of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }
}

/// Symmetric matrix intended for Cholesky solves.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SpdMatrix {
    /// Wraps a row-major `n x n` buffer, rejecting asymmetric input.
    ///
    /// Symmetry tolerance is `1e-12 * max(1, |a_ij|)`.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Shape {
                op: "spd_matrix",
                left: vec![n, n],
                right: vec![data.len()],
            });
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (a, b) = (data[i * n + j], data[j * n + i]);
                if (a - b).abs() > 1e-12 * a.abs().max(1.0) {
                    return Err(Error::NotSymmetric { row: i, col: j });
                }
            }
        }
        Ok(Self { n, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { n, data }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            data[i * n + i] = *d;
        }
        Self { n, data }
    }

    /// `Jᵀ J` for a row-major `rows x cols` matrix `j`.
    pub fn gram(j: &[f64], rows: usize, cols: usize) -> Result<Self> {
        if j.len() != rows * cols {
            return Err(Error::Shape {
                op: "gram",
                left: vec![rows, cols],
                right: vec![j.len()],
            });
        }
        let mut data = vec![0.0; cols * cols];
        gram_accumulate(j, rows, cols, &mut data);
        symmetrize(&mut data, cols);
        Ok(Self { n: cols, data })
    }

    /// Wraps a buffer produced by [`gram_accumulate`] without re-checking symmetry.
    pub(crate) fn from_gram_unchecked(n: usize, mut data: Vec<f64>) -> Self {
        symmetrize(&mut data, n);
        Self { n, data }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    /// Copy with `lambda` added to every diagonal entry.
    pub fn with_added_diagonal(&self, lambda: f64) -> Self {
        let mut out = self.clone();
        for i in 0..self.n {
            out.data[i * self.n + i] += lambda;
        }
        out
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        self.data
            .chunks_exact(self.n)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Overwrites the lower triangle with the upper one so the buffer is exactly symmetric.
fn symmetrize(data: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            data[j * n + i] = data[i * n + j];
        }
    }
}

/// `out += Jᵀ J` where `j` is row-major `rows x cols` and `out` is `cols x cols`.
pub fn gram_accumulate(j: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    assert_eq!(j.len(), rows * cols);
    assert_eq!(out.len(), cols * cols);
    if rows == 0 || cols == 0 {
        return;
    }
    // SAFETY: pointer/stride pairs describe exactly the slices asserted above;
    // `out` does not alias `j`.
    unsafe {
        matrixmultiply::dgemm(
            cols,
            rows,
            cols,
            1.0,
            j.as_ptr(),
            1,
            cols as isize,
            j.as_ptr(),
            cols as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            cols as isize,
            1,
        );
    }
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: row-major layouts with the shapes checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                k as isize,
                1,
                b.data.as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "dot",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot_unchecked(a, a).sqrt()
}

/// `y += alpha * x`
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`, row-major.
pub fn cholesky_factor(a: &SpdMatrix) -> Result<Vec<f64>> {
    let n = a.n;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let (head, tail) = l.split_at_mut(j * n);
        let row_j = &mut tail[..n];
        // Off-diagonal entries of row j, columns < j.
        for k in 0..j {
            let row_k = &head[k * n..k * n + k];
            let s = a.data[j * n + k] - dot_unchecked(&row_j[..k], row_k);
            row_j[k] = s / head[k * n + k];
        }
        let d = a.data[j * n + j] - dot_unchecked(&row_j[..j], &row_j[..j]);
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        row_j[j] = d.sqrt();
    }
    Ok(l)
}

/// Solves `A x = b` through a Cholesky factorization; never forms an inverse.
pub fn cholesky_solve(a: &SpdMatrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.n;
    if b.len() != n {
        return Err(Error::Shape {
            op: "cholesky_solve",
            left: vec![n, n],
            right: vec![b.len()],
        });
    }
    let l = cholesky_factor(a)?;
    // L z = b
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s = b[i] - dot_unchecked(&l[i * n..i * n + i], &z[..i]);
        z[i] = s / l[i * n + i];
    }
    // Lᵀ x = z, processed column-wise to stay on contiguous rows of L.
    let mut x = z;
    for i in (0..n).rev() {
        x[i] /= l[i * n + i];
        let xi = x[i];
        let row = &l[i * n..i * n + i];
        for (xk, lik) in x[..i].iter_mut().zip(row) {
            *xk -= lik * xi;
        }
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cholesky_solve"));
    }
    Ok(x)
}
