//! Central-difference gradient checking helpers, shared by unit and
//! acceptance tests.

use crate::scalar::Scalar;

use super::layers::Param;

/// Numeric gradient of `loss` w.r.t. one flat element of `param`.
pub fn numeric_grad<T: Scalar>(
    param: &Param<T>,
    flat_index: usize,
    h: f64,
    mut loss: impl FnMut() -> f64,
) -> f64 {
    let perturb = |delta: f64| {
        param.update(|data| {
            let v = data.as_slice_mut().expect("standard layout");
            v[flat_index] = v[flat_index] + T::from_f64(delta);
        });
    };
    perturb(h);
    let up = loss();
    perturb(-2.0 * h);
    let down = loss();
    perturb(h);
    (up - down) / (2.0 * h)
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}
