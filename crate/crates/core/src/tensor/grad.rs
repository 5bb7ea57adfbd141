//! Central finite differences, the independent gradient oracle the analytic
//! backward pass is checked against.

/// Central-difference gradient `(f(x + h e_i) - f(x - h e_i)) / 2h` per
/// coordinate. `f` must be deterministic for fixed inputs and `h` positive.
pub fn finite_diff_gradient<F>(mut f: F, params: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite difference step must be positive");
    let mut theta = params.to_vec();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = theta[i];
        theta[i] = orig + h;
        let plus = f(&theta);
        theta[i] = orig - h;
        let minus = f(&theta);
        theta[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Outcome of comparing an analytic gradient against a finite-difference one.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error among coordinates judged by the relative rule.
    pub max_rel_err: f64,
    /// Worst absolute error among near-zero-gradient coordinates.
    pub max_abs_err_small: f64,
    /// Index of the worst coordinate overall.
    pub worst_index: usize,
    pub n_checked: usize,
    pub n_failed: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.n_failed == 0
    }
}

/// Compares coordinate-wise: gradients of magnitude below `small_threshold`
/// must agree within `abs_tol` absolutely, all others within `rel_tol`
/// relatively (denominator `max(|analytic|, |numeric|)`).
pub fn compare_gradients(
    analytic: &[f64],
    numeric: &[f64],
    rel_tol: f64,
    abs_tol: f64,
    small_threshold: f64,
) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err_small: 0.0,
        worst_index: 0,
        n_checked: analytic.len(),
        n_failed: 0,
    };
    let mut worst_score = 0.0;
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let denom = a.abs().max(n.abs());
        let (err, tol, is_small) = if denom < small_threshold {
            ((a - n).abs(), abs_tol, true)
        } else {
            ((a - n).abs() / denom, rel_tol, false)
        };
        if is_small {
            report.max_abs_err_small = report.max_abs_err_small.max(err);
        } else {
            report.max_rel_err = report.max_rel_err.max(err);
        }
        let score = err / tol;
        if score > worst_score {
            worst_score = score;
            report.worst_index = i;
        }
        if err > tol {
            report.n_failed += 1;
        }
    }
    report
}
