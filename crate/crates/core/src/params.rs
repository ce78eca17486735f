//! Dense parameter vectors.
//!
//! A [`ParamVector`] carries models, client returns, server momentum and every
//! optimizer buffer. Public operations allocate their result and reject
//! non-finite output, so a vector that exists is always finite.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Index;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    /// Wraps `values`, rejecting empty or non-finite input.
    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("parameter vector"));
        }
        check_finite(values, "parameter vector")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&v| v == 0.0)
    }

    /// Returns `a * x + y` elementwise.
    pub fn axpy(a: f64, x: &ParamVector, y: &ParamVector) -> Result<ParamVector> {
        same_len(x, y)?;
        if !a.is_finite() {
            return Err(Error::NonFinite("axpy scale"));
        }
        let out = x.0.iter().zip(&y.0).map(|(&xi, &yi)| a * xi + yi).collect();
        check_finite(out, "axpy")
    }

    /// Returns `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        same_len(self, other)?;
        let out = self.0.iter().zip(&other.0).map(|(&a, &b)| a - b).collect();
        check_finite(out, "subtraction")
    }

    pub fn scale(&self, a: f64) -> Result<ParamVector> {
        let out = self.0.iter().map(|&v| a * v).collect();
        check_finite(out, "scale")
    }

    pub fn l2_norm_sq(&self) -> f64 {
        self.0.iter().map(|&v| v * v).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        libm::sqrt(self.l2_norm_sq())
    }

    pub fn norm_inf(&self) -> f64 {
        self.0.iter().fold(0.0, |m, &v| f64::max(m, v.abs()))
    }

    /// Elementwise arithmetic mean, reduced in list order.
    ///
    /// Computed as `v[0] + (sum_{i>=1} (v[i] - v[0])) / k`, which equals the
    /// plain mean algebraically and returns `v[0]` exactly when all inputs agree.
    pub fn mean(vectors: &[ParamVector]) -> Result<ParamVector> {
        let first = vectors.first().ok_or(Error::Empty("mean of zero vectors"))?;
        for v in &vectors[1..] {
            same_len(first, v)?;
        }
        let k = vectors.len() as f64;
        let mut acc = vec![0.0; first.len()];
        for v in &vectors[1..] {
            for ((a, &x), &x0) in acc.iter_mut().zip(&v.0).zip(&first.0) {
                *a += x - x0;
            }
        }
        let out = acc.iter().zip(&first.0).map(|(&a, &x0)| x0 + a / k).collect();
        check_finite(out, "mean")
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> ParamVector {
        ParamVector(values)
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub(crate) fn ensure_finite(self, what: &'static str) -> Result<ParamVector> {
        check_finite(self.0, what)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl<'a> IntoIterator for &'a ParamVector {
    type Item = &'a f64;
    type IntoIter = core::slice::Iter<'a, f64>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

pub(crate) fn same_len(a: &ParamVector, b: &ParamVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(())
}

fn check_finite(values: Vec<f64>, what: &'static str) -> Result<ParamVector> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(ParamVector(values))
    } else {
        Err(Error::NonFinite(what))
    }
}
