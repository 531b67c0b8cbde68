//! Matrix-free application of the forward operator and the covariance
//! operators derived from it.
//!
//! With a unitary FFT and a binary mask `P`, the forward operator
//! `A = F^{-1} P F` is Hermitian and idempotent, so `A^H = A`. On top of
//! it the bundle applies
//!
//! - `B = A X A`            (speckle covariance seen through the aperture),
//! - `S = B + sigma_z^2 I`  (single-look measurement covariance),
//! - `M = S - alpha^2 B S^{-1} B`  (innovation covariance, via a nested
//!   CG solve for the `S^{-1}` action).
//!
//! All operators are pure and the bundle is freely shareable across
//! threads; an atomic counter tracks `S` applications since they dominate
//! the cost of every solve.

use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::aperture::ApertureMask;
use crate::cg::cg_solve;
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::field::{ComplexField, ReflectivityImage};

/// Closures over `(x, aperture, sigma_z, alpha)` exposing the matrix-free
/// operator algebra.
#[derive(Debug)]
pub struct OperatorBundle {
    x: Array2<f64>,
    mask_fft: Array2<f64>,
    fft: Fft2,
    sigma_z: f64,
    alpha: f64,
    s_applications: AtomicU64,
}

impl OperatorBundle {
    pub fn new(
        x: &ReflectivityImage,
        aperture: &ApertureMask,
        sigma_z: f64,
        alpha: f64,
    ) -> Result<Self> {
        Self::from_values(x.values().clone(), aperture, sigma_z, alpha)
    }

    /// Builds a bundle over raw reflectivity values. Entries are allowed
    /// to be slightly negative — the line search evaluates its merit at
    /// pre-projection points — as long as `S = B + sigma_z^2 I` remains
    /// positive definite (`min(x) > -sigma_z^2`).
    pub fn from_values(
        x: Array2<f64>,
        aperture: &ApertureMask,
        sigma_z: f64,
        alpha: f64,
    ) -> Result<Self> {
        if x.nrows() != aperture.height() || x.ncols() != aperture.width() {
            return Err(Error::dims(format!(
                "reflectivity {}x{} vs aperture {}x{}",
                x.nrows(),
                x.ncols(),
                aperture.height(),
                aperture.width()
            )));
        }
        if !(sigma_z > 0.0) {
            return Err(Error::invalid("sigma_z must be > 0"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid("alpha must be in [0, 1]"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("reflectivity values must be finite"));
        }
        let min = x.iter().copied().fold(f64::INFINITY, f64::min);
        if min <= -sigma_z * sigma_z {
            return Err(Error::invalid(format!(
                "reflectivity minimum {min} makes S indefinite at sigma_z {sigma_z}"
            )));
        }
        let (h, w) = x.dim();
        Ok(Self {
            x,
            mask_fft: aperture.pattern_fft_order(),
            fft: Fft2::new(h, w),
            sigma_z,
            alpha,
            s_applications: AtomicU64::new(0),
        })
    }

    pub fn height(&self) -> usize {
        self.x.nrows()
    }

    pub fn width(&self) -> usize {
        self.x.ncols()
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn sigma_z(&self) -> f64 {
        self.sigma_z
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn reflectivity(&self) -> &Array2<f64> {
        &self.x
    }

    /// `S` applications since construction or the last reset.
    pub fn s_application_count(&self) -> u64 {
        self.s_applications.load(Ordering::Relaxed)
    }

    pub fn reset_s_application_count(&self) {
        self.s_applications.store(0, Ordering::Relaxed);
    }

    fn check_dims(&self, field: &ComplexField) -> Result<()> {
        if field.height() != self.height() || field.width() != self.width() {
            return Err(Error::dims(format!(
                "field {}x{} vs operator {}x{}",
                field.height(),
                field.width(),
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }

    fn apply_a_mut(&self, data: &mut Array2<Complex64>) {
        self.fft.forward(data);
        Zip::from(&mut *data)
            .and(&self.mask_fft)
            .for_each(|v, &m| *v *= m);
        self.fft.inverse(data);
    }

    /// Forward operator `A f = IFFT2(P . FFT2(f))`. Self-adjoint, so this
    /// is also `A^H f`.
    pub fn apply_a(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check_dims(field)?;
        let mut data = field.values().clone();
        self.apply_a_mut(&mut data);
        Ok(ComplexField::from_raw(data))
    }

    /// `B f = A (x . A f)`.
    pub fn apply_b(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check_dims(field)?;
        let mut data = field.values().clone();
        self.apply_b_mut(&mut data);
        Ok(ComplexField::from_raw(data))
    }

    fn apply_b_mut(&self, data: &mut Array2<Complex64>) {
        self.apply_a_mut(data);
        Zip::from(&mut *data).and(&self.x).for_each(|v, &xv| *v *= xv);
        self.apply_a_mut(data);
    }

    /// `S f = B f + sigma_z^2 f`.
    pub fn apply_s(&self, field: &ComplexField) -> Result<ComplexField> {
        self.check_dims(field)?;
        self.s_applications.fetch_add(1, Ordering::Relaxed);
        let mut data = field.values().clone();
        self.apply_b_mut(&mut data);
        let s2 = Complex64::new(self.sigma_z * self.sigma_z, 0.0);
        Zip::from(&mut data)
            .and(field.values())
            .for_each(|v, &f| *v += s2 * f);
        Ok(ComplexField::from_raw(data))
    }

    /// Solves `S h = rhs` with CG at tolerance `tol`.
    pub fn solve_s(
        &self,
        rhs: &ComplexField,
        tol: f64,
        solver: &SolverConfig,
    ) -> Result<(ComplexField, crate::cg::CgReport)> {
        cg_solve(
            |f| self.apply_s(f),
            rhs,
            tol,
            solver.cg_iter_cap(self.len()),
        )
    }

    /// `M f = S f - alpha^2 B S^{-1} B f`, with the inner `S`-solve done
    /// by CG at `solver.nested_cg_tol`. At `alpha = 0` this reduces
    /// exactly to `apply_s`.
    pub fn apply_m(&self, field: &ComplexField, solver: &SolverConfig) -> Result<ComplexField> {
        self.check_dims(field)?;
        if self.alpha == 0.0 {
            return self.apply_s(field);
        }
        let bf = self.apply_b(field)?;
        let (q, report) = cg_solve(
            |f| self.apply_s(f),
            &bf,
            solver.nested_cg_tol,
            solver.cg_iter_cap(self.len()),
        )?;
        if !report.converged {
            return Err(Error::solver(
                format!(
                    "nested CG for S^-1 inside M did not converge in {} iterations",
                    report.iterations
                ),
                report.final_residual_norm,
            ));
        }
        let bq = self.apply_b(&q)?;
        let sf = self.apply_s(field)?;
        let a2 = self.alpha * self.alpha;
        let mut out = sf.into_values();
        Zip::from(&mut out)
            .and(bq.values())
            .for_each(|v, &b| *v -= b * a2);
        Ok(ComplexField::from_raw(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_field(h: usize, w: usize, seed: u64) -> ComplexField {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ComplexField::new(Array2::from_shape_fn((h, w), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }))
        .unwrap()
    }

    fn random_reflectivity(h: usize, w: usize, seed: u64) -> ReflectivityImage {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        ReflectivityImage::new(Array2::from_shape_fn((h, w), |_| rng.gen_range(0.0..255.0)))
            .unwrap()
    }

    fn bundle(h: usize, w: usize, alpha: f64) -> OperatorBundle {
        let x = random_reflectivity(h, w, 11);
        let ap = ApertureMask::circular(h, w, 0.8).unwrap();
        OperatorBundle::new(&x, &ap, 15.0, alpha).unwrap()
    }

    fn rel_err(a: &ComplexField, b: &ComplexField) -> f64 {
        let mut diff = 0.0;
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            diff += (x - y).norm_sqr();
        }
        diff.sqrt() / b.norm().max(1e-300)
    }

    #[test]
    fn full_aperture_a_is_identity() {
        let x = random_reflectivity(8, 8, 1);
        let ap = ApertureMask::full(8, 8).unwrap();
        let op = OperatorBundle::new(&x, &ap, 1.0, 0.0).unwrap();
        let f = random_field(8, 8, 2);
        let af = op.apply_a(&f).unwrap();
        assert!(rel_err(&af, &f) < 1e-12);
    }

    #[test]
    fn a_is_idempotent() {
        let op = bundle(16, 16, 0.5);
        let f = random_field(16, 16, 3);
        let af = op.apply_a(&f).unwrap();
        let aaf = op.apply_a(&af).unwrap();
        assert!(rel_err(&aaf, &af) < 1e-12);
    }

    #[test]
    fn a_is_self_adjoint() {
        let op = bundle(16, 16, 0.5);
        for seed in 0..5 {
            let f = random_field(16, 16, 100 + seed);
            let g = random_field(16, 16, 200 + seed);
            let lhs = op.apply_a(&f).unwrap().inner(&g);
            let rhs = f.inner(&op.apply_a(&g).unwrap());
            assert!((lhs - rhs).norm() <= 1e-12 * lhs.norm().max(1.0));
        }
    }

    #[test]
    fn b_of_zero_reflectivity_is_zero() {
        let x = ReflectivityImage::constant(8, 8, 0.0).unwrap();
        let ap = ApertureMask::circular(8, 8, 0.8).unwrap();
        let op = OperatorBundle::new(&x, &ap, 1.0, 0.0).unwrap();
        let f = random_field(8, 8, 4);
        assert!(op.apply_b(&f).unwrap().norm() < 1e-14);
    }

    #[test]
    fn b_quadratic_form_is_nonnegative() {
        let op = bundle(16, 16, 0.0);
        for seed in 0..5 {
            let f = random_field(16, 16, 300 + seed);
            let q = f.inner(&op.apply_b(&f).unwrap());
            assert!(q.im.abs() < 1e-10 * q.re.abs().max(1.0));
            assert!(q.re >= -1e-8 * f.norm_sq());
        }
    }

    #[test]
    fn s_of_zero_reflectivity_is_noise_scaling() {
        let x = ReflectivityImage::constant(8, 8, 0.0).unwrap();
        let ap = ApertureMask::circular(8, 8, 0.8).unwrap();
        let sigma = 3.0;
        let op = OperatorBundle::new(&x, &ap, sigma, 0.0).unwrap();
        let f = random_field(8, 8, 5);
        let sf = op.apply_s(&f).unwrap();
        for (s, v) in sf.values().iter().zip(f.values().iter()) {
            assert!((s - v * sigma * sigma).norm() < 1e-12);
        }
    }

    #[test]
    fn s_quadratic_form_dominates_noise_floor() {
        let op = bundle(16, 16, 0.0);
        let sigma_sq = op.sigma_z() * op.sigma_z();
        for seed in 0..5 {
            let f = random_field(16, 16, 400 + seed);
            let q = f.inner(&op.apply_s(&f).unwrap()).re;
            assert!(q >= sigma_sq * f.norm_sq() * (1.0 - 1e-12));
        }
    }

    #[test]
    fn m_at_alpha_zero_equals_s() {
        let op = bundle(16, 16, 0.0);
        let cfg = SolverConfig::default();
        let f = random_field(16, 16, 6);
        let mf = op.apply_m(&f, &cfg).unwrap();
        let sf = op.apply_s(&f).unwrap();
        assert_eq!(mf, sf);
    }

    #[test]
    fn m_quadratic_form_positive_at_alpha_one() {
        let x = random_reflectivity(16, 16, 7);
        let ap = ApertureMask::circular(16, 16, 0.8).unwrap();
        let op = OperatorBundle::new(&x, &ap, 15.0, 1.0).unwrap();
        let cfg = SolverConfig {
            nested_cg_tol: 1e-10,
            cg_tol: 1e-8,
            ..SolverConfig::default()
        };
        for seed in 0..5 {
            let f = random_field(16, 16, 500 + seed);
            let q = f.inner(&op.apply_m(&f, &cfg).unwrap()).re;
            assert!(q > 0.0, "f^H M f = {q}");
        }
    }

    // Full aperture: A = I, so M is diagonal with entries
    // (x + s^2) - a^2 x^2 / (x + s^2), verified pixelwise.
    #[test]
    fn m_full_aperture_spectral_identity() {
        let x = random_reflectivity(8, 8, 8);
        let ap = ApertureMask::full(8, 8).unwrap();
        let sigma = 15.0;
        let alpha = 0.7;
        let op = OperatorBundle::new(&x, &ap, sigma, alpha).unwrap();
        let cfg = SolverConfig {
            nested_cg_tol: 1e-12,
            cg_tol: 1e-10,
            ..SolverConfig::default()
        };
        let f = random_field(8, 8, 9);
        let mf = op.apply_m(&f, &cfg).unwrap();
        let s2 = sigma * sigma;
        for ((m, v), &xv) in mf.values().iter().zip(f.values().iter()).zip(x.values().iter()) {
            let eig = (xv + s2) - alpha * alpha * xv * xv / (xv + s2);
            assert!((m - v * eig).norm() <= 1e-7 * (v * eig).norm().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let op = bundle(16, 16, 0.0);
        let f = random_field(8, 8, 10);
        assert!(matches!(op.apply_a(&f), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn s_application_counter_tracks_calls() {
        let op = bundle(8, 8, 0.0);
        let f = random_field(8, 8, 12);
        assert_eq!(op.s_application_count(), 0);
        op.apply_s(&f).unwrap();
        op.apply_s(&f).unwrap();
        assert_eq!(op.s_application_count(), 2);
        op.reset_s_application_count();
        assert_eq!(op.s_application_count(), 0);
    }
}
