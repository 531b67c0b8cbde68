//! Moment estimators for the speckle power and the inter-look
//! correlation coefficient.
//!
//! `gamma_hat` is the mean measured power per pixel per look; it absorbs
//! the sensor-noise floor `sigma_z^2` on top of `tr(A X A^H) / n`, which
//! biases `alpha_hat` slightly downward. The bias grows with the noise
//! level and with mask opacity; it is left uncorrected deliberately so
//! the estimator matches its reference behavior.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::sim::MeasurementSet;

/// Correlation estimate with the raw (pre-clamp) value retained for
/// diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationEstimate {
    /// Mean per-pixel measured power `gamma_hat >= 0`.
    pub gamma_hat: f64,
    /// Correlation estimate clamped into `[0, 1]`.
    pub alpha_hat: f64,
    /// Unclamped ratio, possibly slightly outside `[0, 1]`.
    pub alpha_raw: f64,
    pub looks_used: usize,
}

/// `gamma_hat = (1 / (n L)) sum_l sum_i |y_{l,i}|^2`.
pub fn estimate_gamma(measurements: &MeasurementSet) -> Result<f64> {
    if measurements.looks.is_empty() {
        return Err(Error::invalid("gamma estimate needs at least one look"));
    }
    let n = measurements.len_per_look() as f64;
    let l = measurements.looks.len() as f64;
    let total: f64 = measurements.looks.iter().map(|y| y.norm_sq()).sum();
    Ok(total / (n * l))
}

/// `alpha_hat = Re{ (1 / (n (L-1))) sum_{l>=2} sum_i y_{l-1,i} conj(y_{l,i}) } / gamma_hat`,
/// clamped into `[0, 1]`. The cross-moment is real in expectation; the
/// real part discards its sampling-noise imaginary component.
pub fn estimate_alpha(measurements: &MeasurementSet) -> Result<CorrelationEstimate> {
    let looks = measurements.looks.len();
    if looks < 2 {
        return Err(Error::invalid(format!(
            "alpha estimate needs at least two looks, got {looks}"
        )));
    }
    let gamma_hat = estimate_gamma(measurements)?;
    if gamma_hat == 0.0 {
        return Err(Error::DegenerateInput(
            "alpha estimate: measurements have zero power".into(),
        ));
    }
    let n = measurements.len_per_look() as f64;
    let mut cross = Complex64::new(0.0, 0.0);
    for pair in measurements.looks.windows(2) {
        // sum_i y_{l-1,i} * conj(y_{l,i})
        cross += pair[1].inner(&pair[0]);
    }
    let alpha_raw = cross.re / (n * (looks as f64 - 1.0)) / gamma_hat;
    Ok(CorrelationEstimate {
        gamma_hat,
        alpha_hat: alpha_raw.clamp(0.0, 1.0),
        alpha_raw,
        looks_used: looks,
    })
}
