//! Unitary 2D FFTs and centering shifts.
//!
//! The forward operator algebra requires `F^{-1} = F^H`, i.e. an
//! orthonormal transform: both directions are scaled by `1/sqrt(H*W)`.
//! With that convention `A = F^{-1} P F` is an orthogonal projector for
//! a binary mask `P`.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Cached FFT plans for one image shape.
#[derive(Clone)]
pub struct Fft2 {
    height: usize,
    width: usize,
    fwd_row: Arc<dyn Fft<f64>>,
    fwd_col: Arc<dyn Fft<f64>>,
    inv_row: Arc<dyn Fft<f64>>,
    inv_col: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish()
    }
}

impl Fft2 {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            height,
            width,
            fwd_row: planner.plan_fft_forward(width),
            fwd_col: planner.plan_fft_forward(height),
            inv_row: planner.plan_fft_inverse(width),
            inv_col: planner.plan_fft_inverse(height),
            scale: 1.0 / ((height * width) as f64).sqrt(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place unitary forward 2D FFT.
    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.transform(data, self.fwd_row.as_ref(), self.fwd_col.as_ref());
    }

    /// In-place unitary inverse 2D FFT.
    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.transform(data, self.inv_row.as_ref(), self.inv_col.as_ref());
    }

    fn transform(
        &self,
        data: &mut Array2<Complex64>,
        row_fft: &dyn Fft<f64>,
        col_fft: &dyn Fft<f64>,
    ) {
        assert_eq!(data.dim(), (self.height, self.width), "Fft2 shape mismatch");
        let mut scratch =
            vec![Complex64::default(); row_fft.get_inplace_scratch_len()];
        for mut row in data.rows_mut() {
            let slice = row.as_slice_mut().expect("rows are contiguous");
            row_fft.process_with_scratch(slice, &mut scratch);
        }
        // Columns via a copy buffer; rows of a row-major array are the
        // only contiguous axis.
        let mut col = vec![Complex64::default(); self.height];
        let mut scratch =
            vec![Complex64::default(); col_fft.get_inplace_scratch_len()];
        for j in 0..self.width {
            for i in 0..self.height {
                col[i] = data[[i, j]];
            }
            col_fft.process_with_scratch(&mut col, &mut scratch);
            for i in 0..self.height {
                data[[i, j]] = col[i];
            }
        }
        let s = self.scale;
        data.mapv_inplace(|v| v * s);
    }
}

/// Moves the DC bin to the array center `(floor(H/2), floor(W/2))`.
pub fn fftshift<T: Clone>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        data[[(i + h - h / 2) % h, (j + w - w / 2) % w]].clone()
    })
}

/// Inverse of [`fftshift`]: moves the centered DC bin back to index 0.
pub fn ifftshift<T: Clone>(data: &Array2<T>) -> Array2<T> {
    let (h, w) = data.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        data[[(i + h / 2) % h, (j + w / 2) % w]].clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    #[test]
    fn forward_inverse_round_trip() {
        let fft = Fft2::new(16, 8);
        let orig = random_field(16, 8, 3);
        let mut data = orig.clone();
        fft.forward(&mut data);
        fft.inverse(&mut data);
        for (a, b) in data.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn unitary_norm_preservation() {
        let fft = Fft2::new(32, 32);
        for seed in 0..5 {
            let orig = random_field(32, 32, seed);
            let norm_before: f64 = orig.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            let mut data = orig;
            fft.forward(&mut data);
            let norm_after: f64 = data.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt();
            assert!(
                (norm_before - norm_after).abs() <= 1e-12 * norm_before,
                "{norm_before} vs {norm_after}"
            );
        }
    }

    #[test]
    fn dc_of_constant_field_carries_all_energy() {
        let fft = Fft2::new(8, 8);
        let mut data = Array2::from_elem((8, 8), Complex64::new(2.0, 0.0));
        fft.forward(&mut data);
        // Unitary scaling: DC bin is 2 * sqrt(64).
        assert!((data[[0, 0]] - Complex64::new(16.0, 0.0)).norm() < 1e-12);
        let rest: f64 = data.iter().skip(1).map(|v| v.norm()).sum();
        assert!(rest < 1e-12);
    }

    #[test]
    fn shifts_are_inverses_for_both_parities() {
        for (h, w) in [(4, 4), (5, 3), (6, 5)] {
            let data = Array2::from_shape_fn((h, w), |(i, j)| (i * w + j) as f64);
            assert_eq!(ifftshift(&fftshift(&data)), data);
            assert_eq!(fftshift(&ifftshift(&data)), data);
        }
    }

    #[test]
    fn fftshift_centers_dc() {
        let mut data = Array2::zeros((4, 6));
        data[[0, 0]] = 1.0;
        let shifted = fftshift(&data);
        assert_eq!(shifted[[2, 3]], 1.0);
    }
}
