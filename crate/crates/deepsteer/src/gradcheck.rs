//! Central finite-difference gradient checking over flat parameter slices.

/// Compare an analytic gradient against central finite differences of `f`
/// and return the worst relative error. `f` must be pure and deterministic.
///
/// The relative-error denominator is floored at 1e-6: the FD estimate
/// itself carries cancellation noise of roughly ulp(f)/(2*step) (~5e-11 at
/// step 1e-5 for O(1) losses), so a tighter floor would report that noise
/// as error on coordinates whose true gradient is ~0.
///
/// `params` is restored to its original values before returning.
pub fn grad_check<F>(mut f: F, params: &mut [f64], analytic: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut max_rel: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let fp = f(params);
        params[i] = orig - step;
        let fm = f(params);
        params[i] = orig;
        let numeric = (fp - fm) / (2.0 * step);
        let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
        let rel = (numeric - analytic[i]).abs() / denom;
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

pub const DEFAULT_STEP: f64 = 1e-5;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let coeffs = [2.0, -3.0, 0.5];
        let mut params = vec![1.0, -2.0, 4.0];
        let analytic = coeffs.to_vec();
        let err = grad_check(
            |p| p.iter().zip(coeffs.iter()).map(|(a, b)| a * b).sum(),
            &mut params,
            &analytic,
            DEFAULT_STEP,
        );
        assert!(err < 1e-10, "linear fd error {err}");
    }

    #[test]
    fn constant_function_zero_gradients() {
        let mut params = vec![0.3, -0.7];
        let analytic = vec![0.0, 0.0];
        let err = grad_check(|_| 42.0, &mut params, &analytic, DEFAULT_STEP);
        assert!(err < 1e-10);
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = vec![1.0];
        let analytic = vec![5.0]; // true gradient is 2.0
        let err = grad_check(|p| 2.0 * p[0], &mut params, &analytic, DEFAULT_STEP);
        assert!(err > 0.1);
    }

    #[test]
    fn params_restored_after_check() {
        let mut params = vec![1.5, -2.5];
        let analytic = vec![1.0, 1.0];
        let _ = grad_check(|p| p[0] + p[1], &mut params, &analytic, DEFAULT_STEP);
        assert_eq!(params, vec![1.5, -2.5]);
    }
}
