//! Dense linear algebra used by the fitter and the diagnostics.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{} matrix",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|x| x.len() != c) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    pub fn column_vector(v: &[f64]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
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

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn trace(&self) -> f64 {
        self.diag().iter().sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, o) in dst.iter_mut().zip(orow) {
                    *d += a * o;
                }
            }
        }
        Ok(out)
    }

    pub fn mat_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if self.cols != v.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `xᵀ M y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.rows {
            s += x[i] * dot(self.row(i), y);
        }
        s
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let tol = rel_tol * self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in 0..i {
                if (self[(i, j)] - self[(j, i)]).abs() > tol {
                    return false;
                }
            }
        }
        true
    }

    pub fn symmetrize(&mut self) {
        for i in 0..self.rows {
            for j in 0..i {
                let v = 0.5 * (self[(i, j)] + self[(j, i)]);
                self[(i, j)] = v;
                self[(j, i)] = v;
            }
        }
    }

    /// Select rows and columns by index.
    pub fn submatrix(&self, rows: &[usize], cols: &[usize]) -> Self {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }

    pub fn remove_column(&self, k: usize) -> Self {
        let keep: Vec<usize> = (0..self.cols).filter(|&j| j != k).collect();
        let all: Vec<usize> = (0..self.rows).collect();
        self.submatrix(&all, &keep)
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn try_add(&self, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn try_sub(&self, other: &Matrix) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    /// Panics on a shape mismatch; use [`Matrix::matmul`] for a fallible product.
    fn mul(self, rhs: &Matrix) -> Matrix {
        self.matmul(rhs).expect("matrix product shape mismatch")
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        self.try_add(rhs).expect("matrix sum shape mismatch")
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        self.try_sub(rhs).expect("matrix difference shape mismatch")
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin QR factors of an `m x n` matrix with `m >= n`.
#[derive(Debug, Clone)]
pub struct Qr {
    pub q: Matrix,
    pub r: Matrix,
}

/// Householder QR. The diagonal of `R` is made positive.
pub fn qr(x: &Matrix) -> Result<Qr> {
    let (m, n) = (x.rows(), x.cols());
    if m < n {
        return Err(Error::ShapeMismatch(format!("QR needs rows >= cols, got {m}x{n}")));
    }
    let mut a = x.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v: Vec<f64> = (k..m).map(|i| a[(i, k)]).collect();
        let alpha = norm2(&v);
        if alpha == 0.0 {
            vs.push(vec![0.0; m - k]);
            continue;
        }
        let sign = if v[0] >= 0.0 { 1.0 } else { -1.0 };
        v[0] += sign * alpha;
        let vn = norm2(&v);
        for e in v.iter_mut() {
            *e /= vn;
        }
        for j in k..n {
            let s: f64 = (k..m).map(|i| v[i - k] * a[(i, j)]).sum();
            for i in k..m {
                a[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
        vs.push(v);
    }
    let mut r = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            r[(i, j)] = a[(i, j)];
        }
    }
    // Q = H_1 ... H_n applied to the first n columns of the identity.
    let mut q = Matrix::zeros(m, n);
    for j in 0..n {
        q[(j, j)] = 1.0;
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        for j in 0..n {
            let s: f64 = (k..m).map(|i| v[i - k] * q[(i, j)]).sum();
            for i in k..m {
                q[(i, j)] -= 2.0 * v[i - k] * s;
            }
        }
    }
    let rmax = (0..n).fold(0.0f64, |acc, i| acc.max(r[(i, i)].abs()));
    for i in 0..n {
        if r[(i, i)].abs() <= 1e-10 * rmax || rmax == 0.0 {
            return Err(Error::RankDeficient(i));
        }
        if r[(i, i)] < 0.0 {
            for j in i..n {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..m {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok(Qr { q, r })
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() {
        return Err(Error::ShapeMismatch(format!("{}x{} is not square", a.rows(), a.cols())));
    }
    if !a.is_symmetric(1e-10) {
        return Err(Error::NotSymmetric);
    }
    let n = a.rows();
    let tol = f64::EPSILON * a.trace();
    if n > 0 && a.trace() <= 0.0 {
        return Err(Error::NotPositiveDefinite);
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= tol {
            return Err(Error::NotPositiveDefinite);
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn forward_sub(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

fn back_sub_lt(l: &Matrix, b: &[f64]) -> Vec<f64> {
    // Solves Lᵀ x = b.
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solve `A x = b` for symmetric positive definite `A`.
pub fn solve_spd(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != a.rows() {
        return Err(Error::ShapeMismatch("right-hand side length".into()));
    }
    let l = cholesky(a)?;
    Ok(back_sub_lt(&l, &forward_sub(&l, b)))
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn invert_spd(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = back_sub_lt(&l, &forward_sub(&l, &e));
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    inv.symmetrize();
    Ok(inv)
}

/// Inverse of an upper-triangular matrix.
pub fn invert_upper(r: &Matrix) -> Result<Matrix> {
    let n = r.rows();
    if r.cols() != n {
        return Err(Error::ShapeMismatch("triangular inverse needs a square matrix".into()));
    }
    let mut inv = Matrix::zeros(n, n);
    for j in 0..n {
        for i in (0..=j).rev() {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for k in i + 1..=j {
                s -= r[(i, k)] * inv[(k, j)];
            }
            if r[(i, i)] == 0.0 {
                return Err(Error::RankDeficient(i));
            }
            inv[(i, j)] = s / r[(i, i)];
        }
    }
    Ok(inv)
}

/// Stack row blocks `B_i` vertically.
pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
    let cols = blocks.first().map_or(0, |b| b.cols());
    if blocks.iter().any(|b| b.cols() != cols) {
        return Err(Error::ShapeMismatch("vstack column counts differ".into()));
    }
    let rows = blocks.iter().map(|b| b.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for b in blocks {
        data.extend_from_slice(b.data());
    }
    Matrix::new(rows, cols, data)
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(|b| b.rows()).sum();
    let c: usize = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(n, c);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out[(r0 + i, c0 + j)] = b[(i, j)];
            }
        }
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}
