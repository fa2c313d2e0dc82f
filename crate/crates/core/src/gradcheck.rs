//! Central finite differences for gradient verification.
//!
//! This module never touches the tape's backward rules: it re-evaluates the
//! caller's forward closure at nudged inputs, so it stays an independent
//! oracle for reverse-mode gradients.

/// Central-difference gradient of `f` at `x` with the given step.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let hi = f(&probe);
        probe[i] = x[i] - step;
        let lo = f(&probe);
        probe[i] = x[i];
        grad[i] = (hi - lo) / (2.0 * step);
    }
    grad
}

/// Default agreement contract: within 1e-4 relative error, or 1e-7 absolute
/// when both magnitudes sit below 1e-3.
pub fn check_grad(analytic: &[f64], numeric: &[f64]) -> Result<(), String> {
    check_grad_with(analytic, numeric, 1e-4, 1e-7, 1e-3)
}

pub fn check_grad_with(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    small: f64,
) -> Result<(), String> {
    if analytic.len() != numeric.len() {
        return Err(format!(
            "gradient length mismatch: {} vs {}",
            analytic.len(),
            numeric.len()
        ));
    }
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let mag = a.abs().max(n.abs());
        let diff = (a - n).abs();
        let ok = if mag < small {
            diff <= abs_tol
        } else {
            diff <= rel_tol * mag
        };
        if !ok {
            return Err(format!(
                "gradient mismatch at index {i}: analytic {a}, numeric {n}, diff {diff}"
            ));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_of_quadratic_is_linear() {
        let x = vec![1.0, -2.0, 0.5];
        let grad = finite_diff(|v| v.iter().map(|a| a * a).sum::<f64>(), &x, 1e-5);
        for (g, xi) in grad.iter().zip(&x) {
            assert!((g - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn check_grad_rejects_disagreement() {
        assert!(check_grad(&[1.0], &[1.2]).is_err());
        assert!(check_grad(&[1.0], &[1.00001]).is_ok());
        assert!(check_grad(&[0.0], &[5e-8]).is_ok());
    }
}
