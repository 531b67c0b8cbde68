//! Image-shaped value types: the real reflectivity and complex fields.
//!
//! Both types are thin wrappers over row-major `ndarray` storage. The
//! vectorized index used throughout the crate is the row-major pixel
//! index `i = h * W + w`, so `vectorize`/`devectorize` are plain reshapes.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Nonnegative real image `x`; the per-pixel speckle variance and the
/// optimization variable of the reconstruction. Nominal display scale is
/// 0..=255 but any nonnegative values are valid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectivityImage {
    values: Array2<f64>,
}

impl ReflectivityImage {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("reflectivity image must be non-empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "reflectivity entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value))
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Vectorized dimension `n = H * W`.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

/// An H-by-W complex-valued array: speckle fields, measurements,
/// residuals, and solver iterates all use this shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField {
    values: Array2<Complex64>,
}

impl ComplexField {
    pub fn new(values: Array2<Complex64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("complex field must be non-empty"));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("complex field entries must be finite"));
        }
        Ok(Self { values })
    }

    /// Wraps without the finiteness scan; for internal arithmetic whose
    /// inputs are already validated.
    pub(crate) fn from_raw(values: Array2<Complex64>) -> Self {
        Self { values }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<Complex64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<Complex64> {
        self.values
    }

    /// Hermitian inner product `<self, other> = sum conj(self_i) * other_i`.
    pub fn inner(&self, other: &ComplexField) -> Complex64 {
        debug_assert_eq!(self.values.dim(), other.values.dim());
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v.norm_sqr()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// Flattens a field to a length-`n` vector in row-major order.
pub fn vectorize(field: &ComplexField) -> Vec<Complex64> {
    field.values().iter().copied().collect()
}

/// Rebuilds an H-by-W field from a row-major vector of length `H * W`.
pub fn devectorize(values: &[Complex64], height: usize, width: usize) -> Result<ComplexField> {
    if values.len() != height * width {
        return Err(Error::dims(format!(
            "devectorize: expected {} values for {height}x{width}, got {}",
            height * width,
            values.len()
        )));
    }
    let arr = Array2::from_shape_vec((height, width), values.to_vec())
        .expect("shape already checked");
    Ok(ComplexField::from_raw(arr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn reflectivity_rejects_negative_entries() {
        let arr = array![[1.0, -0.5], [0.0, 2.0]];
        assert!(matches!(
            ReflectivityImage::new(arr),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn reflectivity_rejects_nan() {
        let arr = array![[1.0, f64::NAN]];
        assert!(ReflectivityImage::new(arr).is_err());
    }

    #[test]
    fn vectorize_is_row_major() {
        let a = Complex64::new(1.0, 0.0);
        let b = Complex64::new(2.0, 0.0);
        let c = Complex64::new(3.0, 0.0);
        let d = Complex64::new(4.0, 0.0);
        let f = ComplexField::new(array![[a, b], [c, d]]).unwrap();
        assert_eq!(vectorize(&f), vec![a, b, c, d]);
    }

    #[test]
    fn devectorize_single_entry() {
        let v = [Complex64::new(5.0, -1.0)];
        let f = devectorize(&v, 1, 1).unwrap();
        assert_eq!(f.values()[[0, 0]], v[0]);
    }

    #[test]
    fn devectorize_length_mismatch_errors() {
        let v = [Complex64::new(0.0, 0.0); 3];
        assert!(matches!(
            devectorize(&v, 2, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn vectorize_round_trip() {
        let f = ComplexField::new(Array2::from_shape_fn((3, 5), |(i, j)| {
            Complex64::new(i as f64, j as f64)
        }))
        .unwrap();
        let back = devectorize(&vectorize(&f), 3, 5).unwrap();
        assert_eq!(back, f);
    }
}
