//! Minimal deterministic numeric kernels.
//!
//! Everything downstream (normalization layers, decoder blocks, the analytic
//! variance engine) is built on the dense [`Tensor`] defined here. The kernels
//! trade performance for two hard guarantees:
//!
//! * fixed summation order — no reordering, no parallel reductions, so a given
//!   input always produces bit-identical output;
//! * non-finite values are an error, never silently propagated.

mod rng;
mod tensor;

pub use rng::RngStream;
pub use tensor::Tensor;

use crate::error::{BhytError, Result};

/// Standard matrix product `a[m×k] · b[k×n]`.
///
/// Summation runs in increasing `k` for every output element (i-k-j loop
/// order), which keeps results reproducible across runs.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(BhytError::dim(
            "matmul",
            format!("inner dimensions disagree: {m}x{ka} vs {kb}x{n}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let a_row = &ad[i * ka..(i + 1) * ka];
        let c_row = &mut out[i * n..(i + 1) * n];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &bd[k * n..(k + 1) * n];
            for (c, &bkj) in c_row.iter_mut().zip(b_row.iter()) {
                *c += aik * bkj;
            }
        }
    }
    Tensor::checked(vec![m, n], out, "matmul")
}

/// Per-row mean and population variance over the feature dimension.
///
/// With `centered == false` the mean slot is zero and the variance slot holds
/// the uncentered second moment `(1/d) Σ x_j²`; with `centered == true` it is
/// the usual population pair (divisor `d`, not `d−1`).
pub fn rowwise_moments(x: &Tensor, centered: bool) -> Result<(Tensor, Tensor)> {
    let (t, d) = x.dims2("rowwise_moments")?;
    if d == 0 {
        return Err(BhytError::dim("rowwise_moments", "feature dimension is 0"));
    }
    let mut means = vec![0.0; t];
    let mut vars = vec![0.0; t];
    let inv_d = 1.0 / d as f64;
    for r in 0..t {
        let row = &x.data()[r * d..(r + 1) * d];
        if centered {
            let mut acc = 0.0;
            for &v in row {
                acc += v;
            }
            let mean = acc * inv_d;
            let mut sq = 0.0;
            for &v in row {
                let c = v - mean;
                sq += c * c;
            }
            means[r] = mean;
            vars[r] = sq * inv_d;
        } else {
            let mut sq = 0.0;
            for &v in row {
                sq += v * v;
            }
            vars[r] = sq * inv_d;
        }
    }
    let means = Tensor::checked(vec![t], means, "rowwise_moments")?;
    let vars = Tensor::checked(vec![t], vars, "rowwise_moments")?;
    Ok((means, vars))
}

/// Sum of squared entries of a rank-2 tensor, `‖W‖_F²`.
pub fn frobenius_norm_sq(w: &Tensor) -> Result<f64> {
    w.dims2("frobenius_norm_sq")?;
    let mut acc = 0.0;
    for &v in w.data() {
        acc += v * v;
    }
    if !acc.is_finite() {
        return Err(BhytError::NonFinite {
            site: "frobenius_norm_sq".to_string(),
        });
    }
    Ok(acc)
}

/// i.i.d. `N(0, std²)` samples with a reproducible stream.
pub fn gaussian(shape: &[usize], rng: &mut RngStream, std: f64) -> Result<Tensor> {
    if std < 0.0 {
        return Err(BhytError::param("gaussian", format!("std = {std} < 0")));
    }
    let n: usize = shape.iter().product();
    let mut data = vec![0.0; n];
    if std > 0.0 {
        for v in data.iter_mut() {
            *v = std * rng.standard_normal();
        }
    }
    Tensor::checked(shape.to_vec(), data, "gaussian")
}

/// Elementwise sum of two tensors of identical shape.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

/// Elementwise difference `a − b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

/// Elementwise product.
pub fn hadamard(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "hadamard", |x, y| x * y)
}

/// Transpose of a rank-2 tensor.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data()[i * n + j];
        }
    }
    Tensor::checked(vec![n, m], out, "transpose")
}
