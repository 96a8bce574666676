//! Central finite-difference gradient oracle.
//!
//! Deliberately independent of the tape: it only evaluates the scalar function.

use crate::tensor::Tensor;

/// Central differences `(f(θ + h·eᵢ) - f(θ - h·eᵢ)) / 2h` for every coordinate
/// of every tensor in `params`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], h: f64) -> Vec<Tensor>
where
    F: FnMut(&[Tensor]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Denominator floor for [`relative_error`]; below this magnitude the
/// comparison is effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Largest coordinate-wise [`relative_error`] between two tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &b)| relative_error(a, b))
        .fold(0.0, f64::max)
}
