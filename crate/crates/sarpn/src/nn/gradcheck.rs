//! Central finite-difference utilities for verifying analytic gradients.

use ndarray::ArrayD;

/// Default perturbation step for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative error with a small absolute floor so that near-zero gradient
/// pairs compare on an absolute scale instead of blowing up.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Full central-difference gradient of a scalar function of `x`.
pub fn central_difference(
    x: &ArrayD<f64>,
    step: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> ArrayD<f64> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut probe = x.clone();
    let flat_len = x.len();
    for i in 0..flat_len {
        let orig = probe.as_slice_mut().expect("contiguous")[i];
        probe.as_slice_mut().expect("contiguous")[i] = orig + step;
        let plus = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig - step;
        let minus = f(&probe);
        probe.as_slice_mut().expect("contiguous")[i] = orig;
        grad.as_slice_mut().expect("contiguous")[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Central differences at selected flat coordinates only.
pub fn central_difference_at(
    x: &ArrayD<f64>,
    coords: &[usize],
    step: f64,
    mut f: impl FnMut(&ArrayD<f64>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    coords
        .iter()
        .map(|&i| {
            let orig = probe.as_slice_mut().expect("contiguous")[i];
            probe.as_slice_mut().expect("contiguous")[i] = orig + step;
            let plus = f(&probe);
            probe.as_slice_mut().expect("contiguous")[i] = orig - step;
            let minus = f(&probe);
            probe.as_slice_mut().expect("contiguous")[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest relative error between an analytic gradient and central
/// differences of `f` over every coordinate of `x`.
pub fn max_relative_error(
    x: &ArrayD<f64>,
    analytic: &ArrayD<f64>,
    step: f64,
    f: impl FnMut(&ArrayD<f64>) -> f64,
) -> f64 {
    let numeric = central_difference(x, step, f);
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
