//! PSNR and SSIM between a reconstruction and its ground truth.
//!
//! Both metrics assume the 0..=255 intensity scale (peak 255 unless
//! overridden). SSIM uses the standard 11x11 Gaussian window with
//! sigma 1.5 and constants k1 = 0.01, k2 = 0.03; local statistics are
//! computed only where the window fits entirely inside the image.

use ndarray::Array2;

use crate::error::{Error, Result};

/// PSNR/SSIM pair for one comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScore {
    /// Peak signal-to-noise ratio in dB; `f64::INFINITY` for identical
    /// images.
    pub psnr_db: f64,
    /// Mean local structural similarity in `[-1, 1]`.
    pub ssim: f64,
}

/// Computes both metrics with the default peak of 255.
pub fn quality(truth: &Array2<f64>, recon: &Array2<f64>) -> Result<QualityScore> {
    Ok(QualityScore {
        psnr_db: psnr(truth, recon, 255.0)?,
        ssim: ssim(truth, recon)?,
    })
}

/// `10 log10(peak^2 / MSE)`, with infinity as the identical-image
/// sentinel.
pub fn psnr(truth: &Array2<f64>, recon: &Array2<f64>, peak: f64) -> Result<f64> {
    if truth.dim() != recon.dim() {
        return Err(Error::dims(format!(
            "psnr: {:?} vs {:?}",
            truth.dim(),
            recon.dim()
        )));
    }
    let mse = truth
        .iter()
        .zip(recon.iter())
        .map(|(t, r)| (t - r) * (t - r))
        .sum::<f64>()
        / truth.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 255.0;

/// Mean local SSIM over all fully-interior window positions.
pub fn ssim(truth: &Array2<f64>, recon: &Array2<f64>) -> Result<f64> {
    if truth.dim() != recon.dim() {
        return Err(Error::dims(format!(
            "ssim: {:?} vs {:?}",
            truth.dim(),
            recon.dim()
        )));
    }
    let (h, w) = truth.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let window = gaussian_window();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);
    let half = SSIM_WINDOW / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    for ci in half..h - half {
        for cj in half..w - half {
            let mut mu_x = 0.0;
            let mut mu_y = 0.0;
            let mut xx = 0.0;
            let mut yy = 0.0;
            let mut xy = 0.0;
            for wi in 0..SSIM_WINDOW {
                for wj in 0..SSIM_WINDOW {
                    let g = window[wi * SSIM_WINDOW + wj];
                    let t = truth[[ci + wi - half, cj + wj - half]];
                    let r = recon[[ci + wi - half, cj + wj - half]];
                    mu_x += g * t;
                    mu_y += g * r;
                    xx += g * t * t;
                    yy += g * r * r;
                    xy += g * t * r;
                }
            }
            let var_x = xx - mu_x * mu_x;
            let var_y = yy - mu_y * mu_y;
            let cov = xy - mu_x * mu_y;
            let val = ((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
                / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2));
            total += val;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            let di = i as f64 - half;
            let dj = j as f64 - half;
            w.push((-(di * di + dj * dj) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..255.0))
    }

    #[test]
    fn identical_images_hit_sentinels() {
        let img = random_image(16, 16, 1);
        assert_eq!(psnr(&img, &img, 255.0).unwrap(), f64::INFINITY);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_range_error_gives_zero_db() {
        let truth = Array2::from_elem((8, 8), 0.0);
        let recon = Array2::from_elem((8, 8), 255.0);
        assert!((psnr(&truth, &recon, 255.0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_closed_form() {
        let truth = random_image(16, 16, 2);
        let recon = truth.mapv(|v| v + 1.0);
        let expect = 10.0 * (255.0f64 * 255.0).log10();
        assert!((psnr(&truth, &recon, 255.0).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 48.13080361).abs() < 1e-6);
    }

    #[test]
    fn psnr_invariant_under_common_permutation() {
        let truth = random_image(8, 8, 3);
        let recon = random_image(8, 8, 4);
        let p0 = psnr(&truth, &recon, 255.0).unwrap();
        let truth_t = truth.t().to_owned();
        let recon_t = recon.t().to_owned();
        let p1 = psnr(&truth_t, &recon_t, 255.0).unwrap();
        assert!((p0 - p1).abs() < 1e-12);
    }

    #[test]
    fn inverted_checkerboard_has_low_ssim() {
        let truth =
            Array2::from_shape_fn((16, 16), |(i, j)| if (i + j) % 2 == 0 { 255.0 } else { 0.0 });
        let recon = truth.mapv(|v| 255.0 - v);
        let s = ssim(&truth, &recon).unwrap();
        assert!(s < 0.2, "ssim {s}");
    }

    #[test]
    fn independent_noise_has_near_zero_ssim() {
        for seed in 0..10 {
            let a = random_image(32, 32, 100 + seed);
            let b = random_image(32, 32, 200 + seed);
            let s = ssim(&a, &b).unwrap();
            assert!(s.abs() < 0.1, "seed {seed}: ssim {s}");
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(16, 16, 7);
        let b = random_image(16, 16, 8);
        let s1 = ssim(&a, &b).unwrap();
        let s2 = ssim(&b, &a).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn too_small_image_is_rejected() {
        let a = Array2::zeros((8, 8));
        assert!(matches!(ssim(&a, &a), Err(Error::InvalidArgument(_))));
        let b = Array2::zeros((8, 9));
        assert!(matches!(psnr(&a, &b, 255.0), Err(Error::DimensionMismatch(_))));
    }
}
