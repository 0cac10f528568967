//! Shared oracles for integration tests: central finite differences and
//! norm-aggregated relative error.

/// Central finite difference of a scalar function at `x` in direction `i`.
pub fn central_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut plus = x.to_vec();
    let mut minus = x.to_vec();
    plus[i] += h;
    minus[i] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Relative error between two gradient vectors, aggregated as
/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`. Aggregation avoids the blow-up of
/// per-coordinate ratios at sign changes of the gradient.
pub fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(floor)
}
