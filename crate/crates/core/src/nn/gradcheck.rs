use serde::{Deserialize, Serialize};

/// Central-difference step.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Largest accepted relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// Parameter index attaining the maximum.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub num_params: usize,
}

impl GradcheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Relative error `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `params`.
pub fn gradcheck<F>(params: &[f64], analytic: &[f64], mut loss: F) -> GradcheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len(), "gradient/parameter length mismatch");
    let mut probe = params.to_vec();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        num_params: params.len(),
    };
    for k in 0..params.len() {
        let orig = probe[k];
        probe[k] = orig + GRADCHECK_STEP;
        let up = loss(&probe);
        probe[k] = orig - GRADCHECK_STEP;
        let down = loss(&probe);
        probe[k] = orig;
        let numeric = (up - down) / (2.0 * GRADCHECK_STEP);
        let err = relative_error(analytic[k], numeric);
        if err > report.max_rel_error || err.is_nan() {
            report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_index = k;
            report.analytic = analytic[k];
            report.numeric = numeric;
        }
    }
    report
}
