//! Central-difference gradient estimation, used to validate the analytic
//! gradients of the loss and the predictor.

/// Central-difference estimate of the full gradient of `f` at `x`.
///
/// Each coordinate is perturbed by ±`h` with all others held fixed, so `f`
/// is evaluated `2·len` times.
pub fn central_diff<F>(f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference estimate of selected coordinates only; cheaper than
/// [`central_diff`] when the parameter vector is large.
pub fn central_diff_sparse<F>(f: F, x: &[f64], h: f64, coords: &[usize]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; coords.len()];
    let mut probe = x.to_vec();
    for (out, &i) in grad.iter_mut().zip(coords) {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        *out = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative error between an analytic and a numeric derivative, guarded so
/// that near-zero pairs compare absolutely instead of blowing up.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-6 {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Largest [`rel_error`] across two gradient vectors of equal length.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_error(a, n))
        .fold(0.0, f64::max)
}
