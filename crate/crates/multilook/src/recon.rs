//! Projected gradient descent with pluggable projectors.
//!
//! Iterates `s_{t+1} = x_t - mu_t grad f_L(x_t)`, `x_{t+1} = Pi(s_{t+1})`.
//! The step size backtracks from a scale-free trial
//! `mu = step_init * ||x_t||_inf / ||g_t||_inf`, accepting when the
//! quadratic part of the objective (log-dets excluded; they are not
//! needed for descent and are unaffordable at scale) drops by at least
//! `armijo_c * mu * ||g||^2`. The merit is evaluated at the
//! pre-projection point; a trial that would make `S` indefinite or that
//! breaks the inner solves is treated as a rejected step.

use std::io::Write as _;
use std::time::Instant;

use ndarray::{Array2, Zip};

use crate::aperture::ApertureMask;
use crate::config::SolverConfig;
use crate::error::{Error, Result};
use crate::estimate::{estimate_alpha, CorrelationEstimate};
use crate::field::ReflectivityImage;
use crate::likelihood::{gradient, merit_quadratic};
use crate::metrics::psnr;
use crate::operators::OperatorBundle;
use crate::rng::RngStreams;
use crate::sim::MeasurementSet;

/// Relative iterate change below which the outer loop stops.
const REL_CHANGE_TOL: f64 = 1e-5;
const MAX_BACKTRACKS: usize = 40;
/// Default lower clamp bound: a small positive floor keeps `X` strictly
/// positive definite so the nested solves stay well conditioned.
pub const DEFAULT_CLAMP_LO: f64 = 1e-3;

/// Correlation coefficient handed to the reconstruction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaSpec {
    Fixed(f64),
    /// Estimate from the measurements (needs at least two looks).
    Auto,
}

/// Projection onto the image prior set.
#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    /// Entrywise clamp into `[lo, hi]`; idempotent.
    Clamp { lo: f64, hi: f64 },
    /// Isotropic total-variation proximal map (dual projection
    /// iterations), followed by a clamp into `[lo, hi]`. A proximal map,
    /// not idempotent.
    TvProx {
        lambda: f64,
        iters: usize,
        lo: f64,
        hi: f64,
    },
    /// Members applied in order.
    Compose(Vec<Projector>),
}

impl Projector {
    pub fn validate(&self) -> Result<()> {
        match self {
            Projector::Clamp { lo, hi } => validate_bounds(*lo, *hi),
            Projector::TvProx {
                lambda, lo, hi, ..
            } => {
                if !(*lambda >= 0.0) {
                    return Err(Error::invalid("tv lambda must be >= 0"));
                }
                validate_bounds(*lo, *hi)
            }
            Projector::Compose(list) => {
                if list.is_empty() {
                    return Err(Error::invalid("compose projector must not be empty"));
                }
                list.iter().try_for_each(Projector::validate)
            }
        }
    }

    /// Clamp bounds governing the feasible box (for composes, the last
    /// member's bounds — it is applied last).
    pub fn clamp_bounds(&self) -> (f64, f64) {
        match self {
            Projector::Clamp { lo, hi } | Projector::TvProx { lo, hi, .. } => (*lo, *hi),
            Projector::Compose(list) => list.last().expect("validated non-empty").clamp_bounds(),
        }
    }

    pub fn apply(&self, image: &Array2<f64>) -> Array2<f64> {
        match self {
            Projector::Clamp { lo, hi } => image.mapv(|v| v.clamp(*lo, *hi)),
            Projector::TvProx {
                lambda,
                iters,
                lo,
                hi,
            } => {
                let smoothed = if *lambda > 0.0 {
                    tv_prox(image, *lambda, *iters)
                } else {
                    image.clone()
                };
                smoothed.mapv(|v| v.clamp(*lo, *hi))
            }
            Projector::Compose(list) => {
                let mut out = image.clone();
                for p in list {
                    out = p.apply(&out);
                }
                out
            }
        }
    }

    /// Parses a CLI projector spec: `clamp` or `tv:<lambda>`.
    pub fn parse_spec(spec: &str, lo: f64, hi: f64) -> Result<Self> {
        let parts: Vec<&str> = spec.split(':').collect();
        match parts.as_slice() {
            ["clamp"] => Ok(Projector::Clamp { lo, hi }),
            ["tv", lambda] => {
                let lambda: f64 = lambda
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad tv weight {lambda:?}")))?;
                Ok(Projector::TvProx {
                    lambda,
                    iters: 20,
                    lo,
                    hi,
                })
            }
            _ => Err(Error::invalid(format!(
                "bad projector spec {spec:?}; expected \"clamp\" or \"tv:<lambda>\""
            ))),
        }
    }
}

fn validate_bounds(lo: f64, hi: f64) -> Result<()> {
    if !(lo >= 0.0) {
        return Err(Error::invalid("clamp lower bound must be >= 0"));
    }
    if !(lo < hi) {
        return Err(Error::invalid("clamp bounds must satisfy lo < hi"));
    }
    Ok(())
}

/// Isotropic TV proximal map via the dual fixed-point iteration with
/// step 1/8 and replicate boundaries.
fn tv_prox(image: &Array2<f64>, lambda: f64, iters: usize) -> Array2<f64> {
    let (h, w) = image.dim();
    let tau = 0.125;
    let mut p1 = Array2::<f64>::zeros((h, w));
    let mut p2 = Array2::<f64>::zeros((h, w));
    let scaled = image.mapv(|v| v / lambda);
    for _ in 0..iters {
        // d = grad(div p - f / lambda)
        let mut work = divergence(&p1, &p2);
        work -= &scaled;
        let (g1, g2) = forward_gradient(&work);
        Zip::from(&mut p1)
            .and(&mut p2)
            .and(&g1)
            .and(&g2)
            .for_each(|a, b, &d1, &d2| {
                let mag = 1.0 + tau * (d1 * d1 + d2 * d2).sqrt();
                *a = (*a + tau * d1) / mag;
                *b = (*b + tau * d2) / mag;
            });
    }
    let div = divergence(&p1, &p2);
    let mut out = image.clone();
    Zip::from(&mut out).and(&div).for_each(|o, &d| *o -= lambda * d);
    out
}

fn forward_gradient(u: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let (h, w) = u.dim();
    let mut g1 = Array2::<f64>::zeros((h, w));
    let mut g2 = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                g1[[i, j]] = u[[i + 1, j]] - u[[i, j]];
            }
            if j + 1 < w {
                g2[[i, j]] = u[[i, j + 1]] - u[[i, j]];
            }
        }
    }
    (g1, g2)
}

fn divergence(p1: &Array2<f64>, p2: &Array2<f64>) -> Array2<f64> {
    let (h, w) = p1.dim();
    let mut div = Array2::<f64>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut v = 0.0;
            if i + 1 < h {
                v += p1[[i, j]];
            }
            if i > 0 {
                v -= p1[[i - 1, j]];
            }
            if j + 1 < w {
                v += p2[[i, j]];
            }
            if j > 0 {
                v -= p2[[i, j - 1]];
            }
            div[[i, j]] = v;
        }
    }
    div
}

/// Entrywise clamp into `[lo, hi]`, returned as a valid reflectivity.
pub fn project_clamp(image: &Array2<f64>, lo: f64, hi: f64) -> Result<ReflectivityImage> {
    validate_bounds(lo, hi)?;
    ReflectivityImage::new(image.mapv(|v| v.clamp(lo, hi)))
}

/// TV proximal map followed by a clamp.
pub fn project_tv(
    image: &Array2<f64>,
    lambda: f64,
    iters: usize,
    lo: f64,
    hi: f64,
) -> Result<ReflectivityImage> {
    let p = Projector::TvProx {
        lambda,
        iters,
        lo,
        hi,
    };
    p.validate()?;
    ReflectivityImage::new(p.apply(image))
}

/// Why the outer loop stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIterations,
    RelativeChange,
    /// No backtracked step achieved sufficient decrease.
    LineSearchExhausted,
}

/// One outer-iteration record; also the CSV row schema.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// Quadratic-part merit at the iterate (before stepping).
    pub merit: f64,
    pub grad_norm: f64,
    /// Accepted step size (absolute).
    pub step: f64,
    pub s_applications: u64,
    pub cg_iterations: u64,
    pub wall_seconds: f64,
    /// PSNR against the ground truth, when the measurement set has one.
    pub psnr_db: Option<f64>,
}

/// Full reconstruction record.
#[derive(Debug, Clone)]
pub struct ReconReport {
    pub iterations: usize,
    pub alpha_used: f64,
    /// Present when alpha was estimated from the data.
    pub alpha_estimate: Option<CorrelationEstimate>,
    pub stop_reason: StopReason,
    pub trace: Vec<IterationLog>,
}

impl ReconReport {
    /// Writes the per-iteration log with the documented column order:
    /// `iteration,merit,grad_norm,step,s_applications,cg_iterations,wall_seconds,psnr_db`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "iteration,merit,grad_norm,step,s_applications,cg_iterations,wall_seconds,psnr_db"
        )?;
        for row in &self.trace {
            writeln!(
                f,
                "{},{:.9e},{:.9e},{:.9e},{},{},{:.6},{}",
                row.iteration,
                row.merit,
                row.grad_norm,
                row.step,
                row.s_applications,
                row.cg_iterations,
                row.wall_seconds,
                row.psnr_db.map_or(String::new(), |p| format!("{p:.4}")),
            )?;
        }
        Ok(())
    }
}

/// Reconstructs the reflectivity by projected gradient descent on the
/// correlation-aware objective.
pub fn pgd_reconstruct(
    measurements: &MeasurementSet,
    aperture: &ApertureMask,
    sigma_z: f64,
    alpha: AlphaSpec,
    projector: &Projector,
    solver: &SolverConfig,
    streams: &RngStreams,
) -> Result<(ReflectivityImage, ReconReport)> {
    solver.validate()?;
    projector.validate()?;
    let (alpha_used, alpha_estimate) = match alpha {
        AlphaSpec::Fixed(a) => {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::invalid("alpha must be in [0, 1]"));
            }
            (a, None)
        }
        AlphaSpec::Auto => {
            let est = estimate_alpha(measurements)?;
            (est.alpha_hat, Some(est))
        }
    };

    let (lo, hi) = projector.clamp_bounds();
    let mut x = initial_iterate(measurements, aperture, lo, hi)?;
    let mut trace = Vec::new();
    let mut stop_reason = StopReason::MaxIterations;
    let mut iterations = 0;

    for t in 1..=solver.max_pgd_iters {
        let start = Instant::now();
        iterations = t;
        let bundle = OperatorBundle::from_values(x.clone(), aperture, sigma_z, alpha_used)?;
        let mut rng = streams.stream(&format!("probes/{t}"));
        let eval = gradient(&bundle, measurements, solver, &mut rng)?;
        let g = eval.gradient;
        let merit_x = eval.merit_quadratic;
        let grad_norm_sq: f64 = g.iter().map(|v| v * v).sum();
        let grad_norm = grad_norm_sq.sqrt();
        let grad_inf = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let x_inf = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));

        // Scale-free trial step; pure backtracking from there.
        let mut mu = if grad_inf > 0.0 {
            solver.step_init * x_inf.max(lo) / grad_inf
        } else {
            solver.step_init
        };
        let mut accepted = None;
        let mut s_apps = eval.diagnostics.s_applications;
        let mut cg_iters = eval.diagnostics.cg_iterations;
        for _ in 0..MAX_BACKTRACKS {
            let mut s = x.clone();
            Zip::from(&mut s).and(&g).for_each(|sv, &gv| *sv -= mu * gv);
            match trial_merit(&s, measurements, aperture, sigma_z, alpha_used, solver) {
                Ok(Some((merit_s, diag))) => {
                    s_apps += diag.s_applications;
                    cg_iters += diag.cg_iterations;
                    if merit_x - merit_s >= solver.armijo_c * mu * grad_norm_sq {
                        accepted = Some((s, mu));
                        break;
                    }
                }
                Ok(None) => {} // trial outside the PD region: shrink
                Err(e) => return Err(e),
            }
            mu *= solver.armijo_shrink;
        }

        let Some((s, step)) = accepted else {
            stop_reason = StopReason::LineSearchExhausted;
            trace.push(IterationLog {
                iteration: t,
                merit: merit_x,
                grad_norm,
                step: 0.0,
                s_applications: s_apps,
                cg_iterations: cg_iters,
                wall_seconds: start.elapsed().as_secs_f64(),
                psnr_db: psnr_vs_truth(measurements, &x),
            });
            break;
        };

        let x_next = projector.apply(&s);
        let change = {
            let num: f64 = x_next
                .iter()
                .zip(x.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let den: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            num / den.max(1e-300)
        };
        x = x_next;
        trace.push(IterationLog {
            iteration: t,
            merit: merit_x,
            grad_norm,
            step,
            s_applications: s_apps,
            cg_iterations: cg_iters,
            wall_seconds: start.elapsed().as_secs_f64(),
            psnr_db: psnr_vs_truth(measurements, &x),
        });
        if change < REL_CHANGE_TOL {
            stop_reason = StopReason::RelativeChange;
            break;
        }
    }

    let image = ReflectivityImage::new(x)?;
    Ok((
        image,
        ReconReport {
            iterations,
            alpha_used,
            alpha_estimate,
            stop_reason,
            trace,
        },
    ))
}

/// Quadratic merit at a trial point, or `None` when the trial is outside
/// the region where `S` is safely positive definite (or an inner solve
/// fails there), which the line search treats as a rejected step.
fn trial_merit(
    s: &Array2<f64>,
    measurements: &MeasurementSet,
    aperture: &ApertureMask,
    sigma_z: f64,
    alpha: f64,
    solver: &SolverConfig,
) -> Result<Option<(f64, crate::likelihood::EvalDiagnostics)>> {
    let min = s.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= -0.5 * sigma_z * sigma_z {
        return Ok(None);
    }
    let bundle = match OperatorBundle::from_values(s.clone(), aperture, sigma_z, alpha) {
        Ok(b) => b,
        Err(Error::InvalidArgument(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    match merit_quadratic(&bundle, measurements, solver) {
        Ok(v) => Ok(Some(v)),
        Err(Error::SolverFailure { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Speckle-averaged start: `(1/L) sum_l |A^H y_l|^2`, clamped.
fn initial_iterate(
    measurements: &MeasurementSet,
    aperture: &ApertureMask,
    lo: f64,
    hi: f64,
) -> Result<Array2<f64>> {
    let (h, w) = (measurements.height(), measurements.width());
    let placeholder = ReflectivityImage::constant(h, w, 0.0)?;
    // apply_a does not read the reflectivity; any bundle works here.
    let bundle = OperatorBundle::new(&placeholder, aperture, 1.0, 0.0)?;
    let mut acc = Array2::<f64>::zeros((h, w));
    for y in &measurements.looks {
        let ay = bundle.apply_a(y)?;
        Zip::from(&mut acc)
            .and(ay.values())
            .for_each(|a, &v| *a += v.norm_sqr());
    }
    let inv_l = 1.0 / measurements.looks.len() as f64;
    Ok(acc.mapv(|v| (v * inv_l).clamp(lo, hi)))
}

fn psnr_vs_truth(measurements: &MeasurementSet, x: &Array2<f64>) -> Option<f64> {
    measurements
        .truth
        .as_ref()
        .and_then(|t| psnr(t.values(), x, 255.0).ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AcquisitionParams;
    use crate::sim::simulate_measurements;

    #[test]
    fn clamp_is_idempotent() {
        let p = Projector::Clamp { lo: 0.5, hi: 10.0 };
        let img = Array2::from_shape_fn((6, 6), |(i, j)| (i as f64 - 2.0) * 3.0 + j as f64);
        let once = p.apply(&img);
        let twice = p.apply(&once);
        assert_eq!(once, twice);
    }

    #[test]
    fn tv_with_zero_weight_is_clamp_only() {
        let tv = Projector::TvProx {
            lambda: 0.0,
            iters: 10,
            lo: 0.0,
            hi: 100.0,
        };
        let clamp = Projector::Clamp { lo: 0.0, hi: 100.0 };
        let img = Array2::from_shape_fn((6, 6), |(i, j)| (i * j) as f64 * 7.0 - 20.0);
        assert_eq!(tv.apply(&img), clamp.apply(&img));
    }

    #[test]
    fn constant_image_is_tv_fixed_point() {
        let img = Array2::from_elem((8, 8), 40.0);
        let out = tv_prox(&img, 5.0, 30);
        for (a, b) in out.iter().zip(img.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn tv_smooths_noise_but_keeps_mean() {
        let mut img = Array2::from_elem((16, 16), 50.0);
        img[[8, 8]] = 150.0;
        let out = tv_prox(&img, 10.0, 50);
        assert!(out[[8, 8]] < 140.0, "peak should shrink, got {}", out[[8, 8]]);
        let mean_in: f64 = img.iter().sum::<f64>() / img.len() as f64;
        let mean_out: f64 = out.iter().sum::<f64>() / out.len() as f64;
        assert!((mean_in - mean_out).abs() < 0.5);
    }

    #[test]
    fn projector_specs_parse() {
        assert_eq!(
            Projector::parse_spec("clamp", 0.0, 255.0).unwrap(),
            Projector::Clamp { lo: 0.0, hi: 255.0 }
        );
        assert!(matches!(
            Projector::parse_spec("tv:4.5", 0.0, 255.0).unwrap(),
            Projector::TvProx { lambda, .. } if (lambda - 4.5).abs() < 1e-12
        ));
        assert!(Projector::parse_spec("dip", 0.0, 255.0).is_err());
    }

    #[test]
    fn bad_bounds_are_rejected() {
        assert!(Projector::Clamp { lo: -1.0, hi: 2.0 }.validate().is_err());
        assert!(Projector::Clamp { lo: 3.0, hi: 3.0 }.validate().is_err());
        assert!(Projector::Compose(vec![]).validate().is_err());
    }

    #[test]
    fn reconstruction_is_deterministic() {
        let x = ReflectivityImage::new(Array2::from_shape_fn((16, 16), |(i, j)| {
            30.0 + 10.0 * ((i / 4 + j / 4) % 2) as f64
        }))
        .unwrap();
        let ap = ApertureMask::circular(16, 16, 1.0).unwrap();
        let params = AcquisitionParams::new(3, 0.5, 5.0, 21).unwrap();
        let meas = simulate_measurements(&x, &ap, &params, &RngStreams::new(21)).unwrap();
        let solver = SolverConfig {
            max_pgd_iters: 3,
            mc_probes: 4,
            cg_tol: 1e-6,
            nested_cg_tol: 1e-8,
            ..SolverConfig::default()
        };
        let proj = Projector::Clamp { lo: 1e-3, hi: 255.0 };
        let run = || {
            pgd_reconstruct(
                &meas,
                &ap,
                5.0,
                AlphaSpec::Auto,
                &proj,
                &solver,
                &RngStreams::new(99),
            )
            .unwrap()
        };
        let (img1, rep1) = run();
        let (img2, rep2) = run();
        assert_eq!(img1.values(), img2.values());
        assert_eq!(rep1.iterations, rep2.iterations);
        for (a, b) in img1.values().iter().zip(img2.values().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn auto_alpha_needs_two_looks() {
        let x = ReflectivityImage::constant(16, 16, 50.0).unwrap();
        let ap = ApertureMask::full(16, 16).unwrap();
        let params = AcquisitionParams::new(1, 0.0, 5.0, 1).unwrap();
        let meas = simulate_measurements(&x, &ap, &params, &RngStreams::new(1)).unwrap();
        let solver = SolverConfig {
            max_pgd_iters: 1,
            mc_probes: 2,
            ..SolverConfig::default()
        };
        let proj = Projector::Clamp { lo: 1e-3, hi: 255.0 };
        let res = pgd_reconstruct(
            &meas,
            &ap,
            5.0,
            AlphaSpec::Auto,
            &proj,
            &solver,
            &RngStreams::new(2),
        );
        assert!(res.is_err());
    }
}
