//! Dense row-major linear algebra and the softmax / top-k primitives used by
//! the routers.
//!
//! Everything is `f64`. Matrices are small (at most a few hundred rows), so
//! the kernels are plain loops.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, MorError, Result};
use crate::rng::Rng;

/// A dense vector of finite reals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    /// Builds a vector, rejecting NaN and infinities.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MorError::NonFinite("Vector::new"));
        }
        Ok(Self(data))
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn norm(&self) -> f64 {
        self.dot(&self.0).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Self(data)
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

#[inline]
/// Inner product over the common prefix, with four independent partial
/// sums so short products are not bound by add latency.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = MorError;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::new",
                format!("{} entries ({rows}x{cols})", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MorError::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != n_cols) {
            return Err(shape_err("Matrix::from_rows", "rows of equal length", "ragged rows"));
        }
        Self::new(n_rows, n_cols, rows.iter().flat_map(|r| r.iter().copied()).collect())
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

    /// Mutable access to the raw storage. Callers are responsible for keeping
    /// entries finite; optimizers and the finite-difference oracle use this.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// Standard matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("lhs cols == rhs rows ({}x{} · {}x{})", self.rows, self.cols, other.rows, other.cols),
                format!("{} != {}", self.cols, other.rows),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        if !out.is_finite() {
            return Err(MorError::NonFinite("matmul"));
        }
        Ok(out)
    }

    /// `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        if x.len() != self.cols {
            return Err(shape_err(
                "matvec",
                format!("vector of len {} for {}x{} matrix", self.cols, self.rows, self.cols),
                format!("len {}", x.len()),
            ));
        }
        let out: Vec<f64> = (0..self.rows).map(|r| dot(self.row(r), x)).collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MorError::NonFinite("matvec"));
        }
        Ok(Vector(out))
    }

    /// `selfᵀ · y`, without materializing the transpose.
    pub fn matvec_t(&self, y: &[f64]) -> Result<Vector> {
        if y.len() != self.rows {
            return Err(shape_err(
                "matvec_t",
                format!("vector of len {} for transposed {}x{} matrix", self.rows, self.rows, self.cols),
                format!("len {}", y.len()),
            ));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MorError::NonFinite("matvec_t"));
        }
        Ok(Vector(out))
    }

    /// In-place rank-one update `self += scale · u ⊗ v`.
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) -> Result<()> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(shape_err(
                "add_outer",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", u.len(), v.len()),
            ));
        }
        for (r, &ur) in u.iter().enumerate() {
            let s = scale * ur;
            if s == 0.0 {
                continue;
            }
            let cols = self.cols;
            for (m, &vc) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(v) {
                *m += s * vc;
            }
        }
        Ok(())
    }

    /// In-place `self += scale · other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add_scaled",
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vector> {
    if v.is_empty() {
        return Err(MorError::InvalidArgument("softmax of an empty vector".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(MorError::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    softmax_owned(Vector(v.to_vec()), temperature)
}

/// Softmax computed in the buffer of `v`. Arguments are assumed checked
/// except for finiteness.
pub(crate) fn softmax_owned(mut v: Vector, temperature: f64) -> Result<Vector> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(MorError::NonFinite("softmax"));
    }
    v.iter_mut().for_each(|x| *x = ((*x - max) / temperature).exp());
    let total: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= total);
    Ok(v)
}

/// Vector-Jacobian product of a unit-temperature softmax: given `p =
/// softmax(z)` and `g = dL/dp`, returns `dL/dz = p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward(p: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(g, p);
    p.iter().zip(g).map(|(&pi, &gi)| pi * (gi - inner)).collect()
}

/// Indices of the `k` largest entries, ordered by descending value with ties
/// going to the lower index.
pub fn top_k_indices(v: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > v.len() {
        return Err(MorError::InvalidArgument(format!(
            "top-k requires 1 <= k <= {}, got k = {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    // stable sort keeps ascending index order among equal values
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    idx.truncate(k);
    Ok(idx)
}

/// Kaiming-normal initialization: i.i.d. N(0, 2 / cols).
pub fn init_kaiming(rows: usize, cols: usize, rng: &mut Rng) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(MorError::InvalidArgument(format!(
            "kaiming init needs positive dims, got {rows}x{cols}"
        )));
    }
    let std = (2.0 / cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| std * rng.standard_normal()).collect();
    Matrix::new(rows, cols, data)
}

pub fn init_zeros(rows: usize, cols: usize) -> Matrix {
    Matrix::zeros(rows, cols)
}
