//! Dense row-major tensor of 64-bit floats, rank 1 to 3.

use crate::error::{BhytError, Result};

/// The universal value carrier: contiguous row-major `f64` data plus a shape.
///
/// Constructors and kernels reject non-finite elements, so a `Tensor` obtained
/// through this module's API never holds NaN or Inf.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Build a tensor, validating rank, length and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Self::checked(shape, data, "Tensor::new")
    }

    pub(crate) fn checked(shape: Vec<usize>, data: Vec<f64>, site: &str) -> Result<Self> {
        if shape.is_empty() || shape.len() > 3 {
            return Err(BhytError::dim(
                "Tensor",
                format!("rank {} unsupported (must be 1..=3)", shape.len()),
            ));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(BhytError::dim(
                "Tensor",
                format!("shape {shape:?} expects {expect} elements, got {}", data.len()),
            ));
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(BhytError::NonFinite {
                site: format!("{site}[{idx}]"),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n = shape.iter().product();
        Self::checked(shape.to_vec(), vec![0.0; n], "Tensor::zeros")
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = shape.iter().product();
        Self::checked(shape.to_vec(), vec![value; n], "Tensor::filled")
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self::checked(vec![n, n], data, "Tensor::identity")
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(BhytError::dim("Tensor::from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Self::checked(vec![r, c], data, "Tensor::from_rows")
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

    /// Mutable access for in-place parameter updates. The caller owns the
    /// finiteness invariant while the borrow lives; `validate_finite` restores
    /// the checked state.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn validate_finite(&self, site: &str) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(BhytError::NonFinite {
                site: format!("{site}[{idx}]"),
            });
        }
        Ok(())
    }

    /// Shape as `(rows, cols)`, erroring unless rank is exactly 2.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(BhytError::dim(
                op,
                format!("expected rank-2 tensor, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |v| c * v)
    }

    pub fn map(&self, site: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::checked(self.shape.clone(), data, site)
    }

    pub(crate) fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(BhytError::dim(
                op,
                format!("shape {:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::checked(self.shape.clone(), data, op)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_rank_zero_and_four() {
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn identity_layout() {
        let i = Tensor::identity(2).unwrap();
        assert_eq!(i.data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
