//! Small dense linear algebra generic over [`Scalar`].
//!
//! Everything here is sized for moment matrices at desk scale (tens to a
//! few hundred rows/columns); no blocking, no BLAS.

use std::fmt;

use crate::scalar::{negligible, Scalar};

#[derive(Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Matrix {
            rows: r,
            cols: c,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn from_columns(cols: &[Vec<T>]) -> Self {
        let c = cols.len();
        let r = cols.first().map_or(0, |col| col.len());
        let mut m = Self::zeros(r, c);
        for (j, col) in cols.iter().enumerate() {
            assert_eq!(col.len(), r, "ragged columns");
            for (i, v) in col.iter().enumerate() {
                m[(i, j)] = v.clone();
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)].clone()).collect()
    }

    pub fn columns(&self) -> Vec<Vec<T>> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)].clone();
            }
        }
        t
    }

    pub fn mul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows, "dimension mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = &self[(i, k)];
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let prod = a.clone() * other[(k, j)].clone();
                    out[(i, j)] += prod;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len(), "dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    pub fn select(&self, rows: &[usize], cols: &[usize]) -> Matrix<T> {
        let mut out = Self::zeros(rows.len(), cols.len());
        for (a, &i) in rows.iter().enumerate() {
            for (b, &j) in cols.iter().enumerate() {
                out[(a, b)] = self[(i, j)].clone();
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.to_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f64(&self) -> Matrix<f64> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

impl<T: fmt::Debug> fmt::Debug for Matrix<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for i in 0..self.rows {
            let row: Vec<String> = (0..self.cols)
                .map(|j| format!("{:?}", self.data[i * self.cols + j]))
                .collect();
            writeln!(f, "  [{}]", row.join(", "))?;
        }
        Ok(())
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        if x.is_zero() || y.is_zero() {
            continue;
        }
        acc += x.clone() * y.clone();
    }
    acc
}

pub fn norm_sq<T: Scalar>(a: &[T]) -> T {
    dot(a, a)
}

/// Gaussian elimination with max-magnitude partial pivoting on a copy of
/// `m`. Returns `(rank, pivot_columns)`. Pivots with magnitude at most
/// `tol * max|m|` count as zero.
pub fn row_echelon<T: Scalar>(m: &Matrix<T>, tol: f64) -> (usize, Vec<usize>) {
    let mut a = m.clone();
    let scale = m.max_abs();
    let mut rank = 0;
    let mut pivots = Vec::new();
    for c in 0..a.cols {
        if rank == a.rows {
            break;
        }
        let best = (rank..a.rows).max_by(|&x, &y| {
            a[(x, c)]
                .abs()
                .partial_cmp(&a[(y, c)].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                // prefer the earliest row on ties
                .then(y.cmp(&x))
        });
        let Some(p) = best else { continue };
        if negligible(&a[(p, c)], tol, scale) {
            continue;
        }
        if p != rank {
            for j in 0..a.cols {
                a.data.swap(p * a.cols + j, rank * a.cols + j);
            }
        }
        let pivot = a[(rank, c)].clone();
        for i in rank + 1..a.rows {
            if a[(i, c)].is_zero() {
                continue;
            }
            let factor = a[(i, c)].clone() / pivot.clone();
            for j in c..a.cols {
                let delta = factor.clone() * a[(rank, j)].clone();
                a[(i, j)] -= delta;
            }
        }
        pivots.push(c);
        rank += 1;
    }
    (rank, pivots)
}

pub fn rank<T: Scalar>(m: &Matrix<T>, tol: f64) -> usize {
    row_echelon(m, tol).0
}

/// Solve `a x = b` for square `a`; `None` when singular at `tol`.
pub fn solve<T: Scalar>(a: &Matrix<T>, b: &[T], tol: f64) -> Option<Vec<T>> {
    let n = a.rows;
    assert_eq!(a.cols, n, "square system required");
    assert_eq!(b.len(), n);
    let sol = solve_many(a, &Matrix::from_columns(&[b.to_vec()]), tol)?;
    Some(sol.column(0))
}

/// Solve `a X = B` column by column with one factorization.
pub fn solve_many<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, tol: f64) -> Option<Matrix<T>> {
    let n = a.rows;
    assert_eq!(a.cols, n, "square system required");
    assert_eq!(b.rows, n);
    let scale = a.max_abs();
    let mut m = a.clone();
    let mut rhs = b.clone();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| {
            m[(x, c)]
                .abs()
                .partial_cmp(&m[(y, c)].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(y.cmp(&x))
        })?;
        if negligible(&m[(p, c)], tol, scale) {
            return None;
        }
        if p != c {
            for j in 0..n {
                m.data.swap(p * n + j, c * n + j);
            }
            for j in 0..rhs.cols {
                rhs.data.swap(p * rhs.cols + j, c * rhs.cols + j);
            }
        }
        let pivot = m[(c, c)].clone();
        for i in c + 1..n {
            if m[(i, c)].is_zero() {
                continue;
            }
            let factor = m[(i, c)].clone() / pivot.clone();
            for j in c..n {
                let delta = factor.clone() * m[(c, j)].clone();
                m[(i, j)] -= delta;
            }
            for j in 0..rhs.cols {
                let delta = factor.clone() * rhs[(c, j)].clone();
                rhs[(i, j)] -= delta;
            }
        }
    }
    let mut x: Matrix<T> = Matrix::zeros(n, rhs.cols);
    for j in 0..rhs.cols {
        for i in (0..n).rev() {
            let mut acc = rhs[(i, j)].clone();
            for k in i + 1..n {
                if m[(i, k)].is_zero() {
                    continue;
                }
                acc -= m[(i, k)].clone() * x[(k, j)].clone();
            }
            x[(i, j)] = acc / m[(i, i)].clone();
        }
    }
    Some(x)
}

pub fn inverse<T: Scalar>(a: &Matrix<T>, tol: f64) -> Option<Matrix<T>> {
    solve_many(a, &Matrix::identity(a.rows), tol)
}

pub fn determinant<T: Scalar>(a: &Matrix<T>) -> T {
    let n = a.rows;
    assert_eq!(a.cols, n);
    let mut m = a.clone();
    let mut det = T::one();
    for c in 0..n {
        let Some(p) = (c..n).find(|&i| !m[(i, c)].is_zero()) else {
            return T::zero();
        };
        if p != c {
            for j in 0..n {
                m.data.swap(p * n + j, c * n + j);
            }
            det = -det;
        }
        let pivot = m[(c, c)].clone();
        det *= pivot.clone();
        for i in c + 1..n {
            if m[(i, c)].is_zero() {
                continue;
            }
            let factor = m[(i, c)].clone() / pivot.clone();
            for j in c..n {
                let delta = factor.clone() * m[(c, j)].clone();
                m[(i, j)] -= delta;
            }
        }
    }
    det
}

#[derive(Debug, Clone)]
pub struct LeastSquares<T> {
    pub coefficients: Vec<T>,
    pub residual: Vec<T>,
}

impl<T: Scalar> LeastSquares<T> {
    pub fn residual_norm(&self) -> f64 {
        norm_sq(&self.residual).to_f64().sqrt()
    }
}

/// Least squares via unnormalized modified Gram-Schmidt (no square roots,
/// so it stays exact over rationals). Returns `None` when the columns of
/// `a` are dependent at relative tolerance `tol`.
pub fn least_squares<T: Scalar>(a: &Matrix<T>, b: &[T], tol: f64) -> Option<LeastSquares<T>> {
    let (m, n) = (a.rows, a.cols);
    assert_eq!(b.len(), m);
    if n > m {
        return None;
    }
    let mut q: Vec<Vec<T>> = Vec::with_capacity(n);
    let mut q_norms: Vec<T> = Vec::with_capacity(n);
    let mut r = Matrix::<T>::zeros(n, n);
    for k in 0..n {
        let original = a.column(k);
        let mut v = original.clone();
        for i in 0..k {
            let coef = dot(&q[i], &v) / q_norms[i].clone();
            if !coef.is_zero() {
                for (vi, qi) in v.iter_mut().zip(&q[i]) {
                    *vi -= coef.clone() * qi.clone();
                }
            }
            r[(i, k)] = coef;
        }
        let nv = norm_sq(&v);
        if nv.is_zero() || negligible(&nv, tol * tol, norm_sq(&original).to_f64()) {
            return None;
        }
        q.push(v);
        q_norms.push(nv);
    }
    let mut c = b.to_vec();
    let mut coef = Vec::with_capacity(n);
    for i in 0..n {
        let ci = dot(&q[i], &c) / q_norms[i].clone();
        if !ci.is_zero() {
            for (cj, qj) in c.iter_mut().zip(&q[i]) {
                *cj -= ci.clone() * qj.clone();
            }
        }
        coef.push(ci);
    }
    let mut x = vec![T::zero(); n];
    for i in (0..n).rev() {
        let mut acc = coef[i].clone();
        for k in i + 1..n {
            if !r[(i, k)].is_zero() {
                acc -= r[(i, k)].clone() * x[k].clone();
            }
        }
        x[i] = acc;
    }
    Some(LeastSquares {
        coefficients: x,
        residual: c,
    })
}

/// Singular values of a float copy, descending.
pub fn singular_values<T: Scalar>(m: &Matrix<T>) -> Vec<f64> {
    if m.rows == 0 || m.cols == 0 {
        return Vec::new();
    }
    let f = m.to_f64();
    let na = nalgebra::DMatrix::from_row_slice(f.rows, f.cols, &f.data);
    let mut sv: Vec<f64> = na.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    sv
}

/// Nonsingularity of a square matrix: exact determinant when `tol == 0`,
/// otherwise `σ_min > tol · σ_max`.
pub fn is_nonsingular<T: Scalar>(m: &Matrix<T>, tol: f64) -> bool {
    if m.rows == 0 {
        return true;
    }
    if tol == 0.0 {
        return !determinant(m).is_zero();
    }
    let sv = singular_values(m);
    let (max, min) = (sv[0], *sv.last().unwrap());
    max > 0.0 && min > tol * max
}
