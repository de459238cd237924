//! Central finite-difference oracle for verifying reverse-mode gradients.
//!
//! Test support: re-evaluates the forward closure under perturbation and
//! never touches the tape's backward pass.

/// d loss / d params via central differences with step `h`.
pub fn finite_diff<F>(f: F, params: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(params.len());
    let mut work: Vec<Vec<f64>> = params.to_vec();
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p][i];
            work[p][i] = orig + h;
            let up = f(&work);
            work[p][i] = orig - h;
            let down = f(&work);
            work[p][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
