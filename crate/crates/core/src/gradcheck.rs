//! Finite-difference oracles for gradient verification.
//!
//! These estimate derivatives from forward evaluations only; they never
//! consult the tape's backward pass, so they stay independent of the code
//! they check.

use crate::tensor::{real, Real};

/// Central-difference gradient of a scalar function at `x`.
///
/// The divisor uses the actually-applied step `(x+h) - (x-h)` so rounding
/// of `h` itself cancels.
pub fn central_diff<R: Real>(mut f: impl FnMut(&[R]) -> R, x: &[R], h: f64) -> Vec<f64> {
    let hh: R = real(h as f32);
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        let xp = orig + hh;
        let xm = orig - hh;
        xs[i] = xp;
        let fp: f64 = f(&xs).into();
        xs[i] = xm;
        let fm: f64 = f(&xs).into();
        xs[i] = orig;
        let denom: f64 = (xp - xm).into();
        grad.push((fp - fm) / denom);
    }
    grad
}

/// Normwise relative error `‖a−b‖ / max(‖a‖, ‖b‖, tiny)`.
pub fn normwise_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-12)
}
