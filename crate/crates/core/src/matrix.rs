//! Dense row-major complex matrices.
//!
//! Sizes here are small (tens to a few thousand entries per side), so the
//! kernels are plain loops with a fixed summation order. Results are therefore
//! bitwise reproducible regardless of how callers schedule work.

use std::fmt;
use std::ops::{Index, IndexMut};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

pub type C64 = Complex64;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl fmt::Debug for ComplexMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ComplexMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(4) {
            write!(f, "\n  ")?;
            for c in 0..self.cols.min(4) {
                let v = self[(r, c)];
                write!(f, "{:+.3e}{:+.3e}j ", v.re, v.im)?;
            }
        }
        write!(f, "\n]")
    }
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(SimError::dimension(
                "ComplexMatrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Column vector from a slice.
    pub fn column(values: &[C64]) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<C64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[C64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [C64] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn col_vec(&self, c: usize) -> Vec<C64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Frobenius norm.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn scale(&mut self, s: C64) {
        for z in &mut self.data {
            *z *= s;
        }
    }

    pub fn scaled(&self, s: C64) -> Self {
        let mut out = self.clone();
        out.scale(s);
        out
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: C64, other: &ComplexMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    /// `self += alpha * other` for a real `alpha`.
    pub fn axpy_real(&mut self, alpha: f64, other: &ComplexMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            a.re += alpha * b.re;
            a.im += alpha * b.im;
        }
    }

    pub fn sub(&self, other: &ComplexMatrix) -> Result<Self> {
        self.check_same(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Real part of the Frobenius inner product `<self, other>`.
    pub fn real_dot(&self, other: &ComplexMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.re * b.re + a.im * b.im)
            .sum()
    }

    /// Elementwise product in place.
    pub fn hadamard_assign(&mut self, other: &ComplexMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b;
        }
    }

    /// Elementwise product with the conjugate of `other`, in place.
    pub fn hadamard_conj_assign(&mut self, other: &ComplexMatrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a *= b.conj();
        }
    }

    pub fn entry_magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm()).collect()
    }

    fn check_same(&self, other: &ComplexMatrix, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(SimError::dimension(
                what,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &ComplexMatrix) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(SimError::dimension(
                "matmul",
                format!("inner {}", self.cols),
                format!("inner {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    /// `self^H * rhs`.
    pub fn adjoint_matmul(&self, rhs: &ComplexMatrix) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(SimError::dimension(
                "adjoint_matmul",
                format!("rows {}", self.rows),
                format!("rows {}", rhs.rows),
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        adjoint_matmul_into(self, rhs, &mut out);
        Ok(out)
    }

    /// `self * rhs^H`.
    pub fn matmul_adjoint(&self, rhs: &ComplexMatrix) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(SimError::dimension(
                "matmul_adjoint",
                format!("cols {}", self.cols),
                format!("cols {}", rhs.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        matmul_adjoint_into(self, rhs, &mut out);
        Ok(out)
    }

    pub fn matvec(&self, v: &[C64]) -> Result<Vec<C64>> {
        if self.cols != v.len() {
            return Err(SimError::dimension("matvec", self.cols, v.len()));
        }
        Ok((0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(v)
                    .fold(C64::new(0.0, 0.0), |acc, (a, b)| acc + a * b)
            })
            .collect())
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &C64 {
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut C64 {
        &mut self.data[r * self.cols + c]
    }
}

/// `out = a * b`; shapes must agree (checked in debug builds only).
pub(crate) fn matmul_into(a: &ComplexMatrix, b: &ComplexMatrix, out: &mut ComplexMatrix) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(out.shape(), (a.rows, b.cols));
    let n = b.cols;
    for z in out.data.iter_mut() {
        *z = C64::new(0.0, 0.0);
    }
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for p in 0..a.cols {
            let s = a.data[i * a.cols + p];
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, x) in orow.iter_mut().zip(brow) {
                *o += s * x;
            }
        }
    }
}

/// `out = a^H * b`.
pub(crate) fn adjoint_matmul_into(a: &ComplexMatrix, b: &ComplexMatrix, out: &mut ComplexMatrix) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(out.shape(), (a.cols, b.cols));
    let n = b.cols;
    for z in out.data.iter_mut() {
        *z = C64::new(0.0, 0.0);
    }
    for p in 0..a.rows {
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..a.cols {
            let s = a.data[p * a.cols + i].conj();
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, x) in orow.iter_mut().zip(brow) {
                *o += s * x;
            }
        }
    }
}

/// `out = a * b^H`.
pub(crate) fn matmul_adjoint_into(a: &ComplexMatrix, b: &ComplexMatrix, out: &mut ComplexMatrix) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(out.shape(), (a.rows, b.rows));
    let k = a.cols;
    for i in 0..a.rows {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..b.rows {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut acc = C64::new(0.0, 0.0);
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y.conj();
            }
            out.data[i * b.rows + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn matmul_small() {
        let a = ComplexMatrix::from_vec(2, 2, vec![c(1., 0.), c(0., 1.), c(2., 0.), c(0., 0.)]).unwrap();
        let b = ComplexMatrix::from_vec(2, 1, vec![c(1., 1.), c(3., 0.)]).unwrap();
        let p = a.matmul(&b).unwrap();
        assert_eq!(p[(0, 0)], c(1., 4.));
        assert_eq!(p[(1, 0)], c(2., 2.));
    }

    #[test]
    fn adjoint_products_agree_with_explicit_adjoint() {
        let a = ComplexMatrix::from_fn(3, 4, |r, c| C64::new(r as f64 - 1.0, c as f64 * 0.5));
        let b = ComplexMatrix::from_fn(3, 2, |r, c| C64::new(c as f64 + 0.25, r as f64));
        let lhs = a.adjoint_matmul(&b).unwrap();
        let rhs = a.adjoint().matmul(&b).unwrap();
        assert_eq!(lhs, rhs);

        let d = ComplexMatrix::from_fn(5, 4, |r, c| C64::new((r * c) as f64, 1.0));
        let lhs = a.matmul_adjoint(&d).unwrap();
        let rhs = a.matmul(&d.adjoint()).unwrap();
        for (x, y) in lhs.as_slice().iter().zip(rhs.as_slice()) {
            assert!((x - y).norm() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = ComplexMatrix::zeros(2, 3);
        let b = ComplexMatrix::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(SimError::Dimension { .. })));
    }
}
