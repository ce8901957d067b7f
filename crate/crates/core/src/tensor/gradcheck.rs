//! Central finite-difference utilities used by the gradient-check suites.

/// Central-difference gradient of `f` at `x`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let hi = f(&xs);
        xs[i] = orig - eps;
        let lo = f(&xs);
        xs[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// Worst relative error between two gradients, with an absolute floor so
/// near-zero pairs compare as equal.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| {
            let scale = a.abs().max(n.abs()).max(atol);
            (a - n).abs() / scale
        })
        .fold(0.0, f64::max)
}
