//! Central finite-difference gradient checking in double precision.

/// Relative error with a floor on the denominator, so parameters whose true
/// gradient is ~0 are judged on absolute error.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(DENOM_FLOOR);
    (analytic - numeric).abs() / scale
}

pub const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// Compares `analytic` with central differences of `loss` around `params`.
pub fn check(params: &[f64], analytic: &[f64], h: f64, mut loss: impl FnMut(&[f64]) -> f64) -> GradCheckReport {
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + h;
        let up = loss(&work);
        work[i] = orig - h;
        let down = loss(&work);
        work[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], fd);
        if err > max_rel_error || err.is_nan() {
            max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
            worst_index = i;
        }
        numeric.push(fd);
    }
    GradCheckReport {
        max_rel_error,
        worst_index,
        analytic: analytic.to_vec(),
        numeric,
    }
}
