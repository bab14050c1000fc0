use super::Tensor;
use crate::error::{invalid_arg, shape_err, Error, Result};

/// Central-difference gradient of a scalar function, one element at a time.
///
/// The denominator is the realised `f32` step `x_i+ - x_i-` rather than the
/// nominal `2 * eps`, which removes the rounding of the perturbed input.
/// `f` may return `f32` or `f64`; an `f64` objective avoids the output
/// rounding that dominates differences of small `f32` losses.
pub fn finite_difference_gradient<F, R>(mut f: F, x: &Tensor, eps: f32) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<R>,
    R: Into<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(invalid_arg!("finite-difference step must be positive, got {eps}"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        let (hi, lo) = (orig + eps, orig - eps);
        probe.data_mut()[i] = hi;
        let f_hi: f64 = f(&probe)?.into();
        probe.data_mut()[i] = lo;
        let f_lo: f64 = f(&probe)?.into();
        probe.data_mut()[i] = orig;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::NonFinite(format!("objective returned NaN/Inf at element {i}")));
        }
        grad.push(((f_hi - f_lo) / (hi as f64 - lo as f64)) as f32);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub elements: usize,
    pub passed: usize,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn pass_fraction(&self) -> f64 {
        if self.elements == 0 {
            1.0
        } else {
            self.passed as f64 / self.elements as f64
        }
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        self.elements += other.elements;
        self.passed += other.passed;
        self.max_rel_err = self.max_rel_err.max(other.max_rel_err);
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        GradCheckReport {
            elements: 0,
            passed: 0,
            max_rel_err: 0.0,
        }
    }
}

/// Element-wise `|a - n| / max(|a|, |n|, floor)` against `rel_tol`.
pub fn compare_gradients(
    analytic: &Tensor,
    numeric: &Tensor,
    rel_tol: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(shape_err!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        ));
    }
    let mut report = GradCheckReport {
        elements: analytic.len(),
        ..Default::default()
    };
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let (a, n) = (a as f64, n as f64);
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        report.max_rel_err = report.max_rel_err.max(rel);
        if rel <= rel_tol {
            report.passed += 1;
        }
    }
    Ok(report)
}
