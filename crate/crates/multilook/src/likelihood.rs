//! Correlation-aware negative log-likelihood, its gradient, and Monte
//! Carlo diagonal estimation.
//!
//! For looks `y_1 ... y_L` with innovation residuals
//! `r_l = y_l - alpha B S^{-1} y_{l-1}`, the objective is
//!
//! ```text
//! f_L(x) = log det S + y_1^H S^{-1} y_1
//!        + sum_{l=2..L} [ log det M + r_l^H M^{-1} r_l ].
//! ```
//!
//! Its gradient decomposes into per-look vector terms (CG solves against
//! `S` and `M`) and four diagonal terms `diag(A^H T A)` with
//! `T in { S^-1, M^-1, S^-1 B M^-1, S^-1 B M^-1 B S^-1 }`, estimated by
//! the probe identity `E[(D v) . v] = diag(D)` for real probes. All four
//! diagonals share one probe set per gradient call, and the intermediate
//! CG solves are shared wherever two sandwiches need the same action.

use std::time::{Duration, Instant};

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cg::cg_solve;
use crate::config::{ProbeLaw, SolverConfig};
use crate::error::{Error, Result};
use crate::field::ComplexField;
use crate::operators::OperatorBundle;
use crate::sim::MeasurementSet;

/// Probes per parallel work unit; partial sums are accumulated per chunk
/// and then reduced in chunk order, so results do not depend on the
/// number of worker threads.
const PROBE_CHUNK: usize = 8;

/// Relative imaginary residue allowed in the assembled gradient before a
/// numerical-consistency error is raised.
const GRADIENT_IMAG_TOL: f64 = 1e-6;

/// Cost counters for one gradient (or objective) evaluation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalDiagnostics {
    /// Applications of the `S` operator, the dominant cost unit.
    pub s_applications: u64,
    /// Total CG iterations across all solves, nested ones included.
    pub cg_iterations: u64,
    /// Wall-clock time of the evaluation.
    pub wall_micros: u64,
}

impl EvalDiagnostics {
    pub fn wall(&self) -> Duration {
        Duration::from_micros(self.wall_micros)
    }
}

/// The four diagonal sandwiches appearing in the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagKind {
    /// `diag(A^H S^-1 A)`
    SInv,
    /// `diag(A^H M^-1 A)`
    MInv,
    /// `diag(A^H S^-1 B M^-1 A)` (not Hermitian; real part enters the
    /// gradient)
    SInvBMInv,
    /// `diag(A^H S^-1 B M^-1 B S^-1 A)`
    SInvBMInvBSInv,
}

/// The four diagonals used by [`gradient_with_diagonals`]. Entries are
/// complex so that exact (dense-oracle) diagonals can carry their
/// roundoff-level imaginary residue into the assembly check; Monte Carlo
/// estimates store the real part mandated by the estimator contract,
/// except for the non-Hermitian sandwich whose real part is taken only
/// inside the gradient formula.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientDiagonals {
    pub s_inv: Array2<Complex64>,
    pub m_inv: Array2<Complex64>,
    pub s_inv_b_m_inv: Array2<Complex64>,
    pub s_inv_b_m_inv_b_s_inv: Array2<Complex64>,
}

/// Innovation residuals `r_l = y_l - alpha B S^{-1} y_{l-1}` for
/// `l = 2..=L`, in look order.
pub fn innovation_residuals(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
) -> Result<Vec<ComplexField>> {
    let cached = cached_s_solves(bundle, measurements, solver)?;
    residuals_from_cache(bundle, measurements, &cached)
}

fn check_compatible(bundle: &OperatorBundle, measurements: &MeasurementSet) -> Result<()> {
    if bundle.height() != measurements.height() || bundle.width() != measurements.width() {
        return Err(Error::dims(format!(
            "operator {}x{} vs measurements {}x{}",
            bundle.height(),
            bundle.width(),
            measurements.height(),
            measurements.width()
        )));
    }
    Ok(())
}

/// One `S^{-1} y_l` solve per look, computed concurrently.
fn cached_s_solves(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
) -> Result<Vec<(ComplexField, u64)>> {
    check_compatible(bundle, measurements)?;
    measurements
        .looks
        .par_iter()
        .map(|y| {
            let (h, report) = bundle.solve_s(y, solver.cg_tol, solver)?;
            if !report.converged {
                return Err(Error::solver(
                    format!("CG on S did not converge in {} iterations", report.iterations),
                    report.final_residual_norm,
                ));
            }
            Ok((h, report.iterations as u64))
        })
        .collect()
}

fn residuals_from_cache(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    cached: &[(ComplexField, u64)],
) -> Result<Vec<ComplexField>> {
    let alpha = bundle.alpha();
    let mut out = Vec::with_capacity(measurements.looks.len().saturating_sub(1));
    for ell in 1..measurements.looks.len() {
        let y = &measurements.looks[ell];
        if alpha == 0.0 {
            out.push(y.clone());
            continue;
        }
        let bh = bundle.apply_b(&cached[ell - 1].0)?;
        let mut r = y.values().clone();
        Zip::from(&mut r)
            .and(bh.values())
            .for_each(|rv, &bv| *rv -= bv * alpha);
        out.push(ComplexField::from_raw(r));
    }
    Ok(out)
}

/// Quadratic part of the objective,
/// `y_1^H S^{-1} y_1 + sum_l r_l^H M^{-1} r_l`, evaluated with CG only.
/// This is the merit function used by the reconstruction line search.
pub fn merit_quadratic(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
) -> Result<(f64, EvalDiagnostics)> {
    let start = Instant::now();
    let s_apps0 = bundle.s_application_count();
    let cached = cached_s_solves(bundle, measurements, solver)?;
    let mut cg_iters: u64 = cached.iter().map(|(_, it)| it).sum();
    let residuals = residuals_from_cache(bundle, measurements, &cached)?;

    let mut quad = measurements.looks[0].inner(&cached[0].0).re;
    let m_terms: Vec<(f64, u64)> = residuals
        .par_iter()
        .map(|r| {
            let (g, report) = solve_m(bundle, r, solver)?;
            Ok((r.inner(&g).re, report))
        })
        .collect::<Result<_>>()?;
    for (q, iters) in m_terms {
        quad += q;
        cg_iters += iters;
    }
    let diag = EvalDiagnostics {
        s_applications: bundle.s_application_count() - s_apps0,
        cg_iterations: cg_iters,
        wall_micros: start.elapsed().as_micros() as u64,
    };
    Ok((quad, diag))
}

/// Solves `M g = rhs`; returns the solution and total CG iterations
/// (outer only; nested iterations surface in the S-application counter).
fn solve_m(
    bundle: &OperatorBundle,
    rhs: &ComplexField,
    solver: &SolverConfig,
) -> Result<(ComplexField, u64)> {
    let (g, report) = cg_solve(
        |f| bundle.apply_m(f, solver),
        rhs,
        solver.cg_tol,
        solver.cg_iter_cap(bundle.len()),
    )?;
    if !report.converged {
        return Err(Error::solver(
            format!("CG on M did not converge in {} iterations", report.iterations),
            report.final_residual_norm,
        ));
    }
    Ok((g, report.iterations as u64))
}

/// How the log-determinant part of the objective is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogDetMode {
    /// Dense Cholesky when `n <= oracle cap`, stochastic estimate beyond.
    Auto,
    /// Dense Cholesky, erroring if the problem exceeds the oracle cap.
    Exact,
    /// Stochastic Lanczos quadrature with the given probe count and
    /// Lanczos depth; the result is flagged approximate.
    Stochastic { probes: usize, lanczos_steps: usize },
}

/// Objective value split into its exactly-computed quadratic part and the
/// log-determinant part.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// `quadratic + log_det`.
    pub value: f64,
    pub quadratic: f64,
    /// `log det S + (L - 1) log det M`.
    pub log_det: f64,
    /// False when the log-det part is a stochastic estimate.
    pub log_det_exact: bool,
}

/// Full objective `f_L`. The quadratic terms always come from CG solves;
/// the log-dets follow `mode`.
pub fn neg_log_likelihood(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
    mode: LogDetMode,
    rng: &mut impl Rng,
) -> Result<Objective> {
    let (quadratic, _) = merit_quadratic(bundle, measurements, solver)?;
    let n = bundle.len();
    let looks = measurements.looks.len();
    let dense_ok = n <= crate::oracle::DENSE_SIZE_CAP;
    let (log_det, exact) = match mode {
        LogDetMode::Exact if !dense_ok => {
            return Err(Error::Capability(format!(
                "exact log-det needs n <= {}, got {n}",
                crate::oracle::DENSE_SIZE_CAP
            )));
        }
        LogDetMode::Auto if dense_ok => (dense_log_dets(bundle, looks)?, true),
        LogDetMode::Exact => (dense_log_dets(bundle, looks)?, true),
        LogDetMode::Auto => (
            stochastic_log_dets(bundle, solver, looks, 16, 10, rng)?,
            false,
        ),
        LogDetMode::Stochastic {
            probes,
            lanczos_steps,
        } => (
            stochastic_log_dets(bundle, solver, looks, probes, lanczos_steps, rng)?,
            false,
        ),
    };
    Ok(Objective {
        value: quadratic + log_det,
        quadratic,
        log_det,
        log_det_exact: exact,
    })
}

fn dense_log_dets(bundle: &OperatorBundle, looks: usize) -> Result<f64> {
    let sys = crate::oracle::DenseSystem::from_bundle(bundle)?;
    Ok(sys.log_det_s() + (looks as f64 - 1.0) * sys.log_det_m())
}

fn stochastic_log_dets(
    bundle: &OperatorBundle,
    solver: &SolverConfig,
    looks: usize,
    probes: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let ld_s = log_det_slq(|f| bundle.apply_s(f), bundle, probes, steps, rng)?;
    if looks == 1 || bundle.alpha() == 0.0 {
        return Ok(ld_s * looks as f64);
    }
    let ld_m = log_det_slq(|f| bundle.apply_m(f, solver), bundle, probes, steps, rng)?;
    Ok(ld_s + (looks as f64 - 1.0) * ld_m)
}

/// Stochastic Lanczos quadrature estimate of `tr(log Op)` for a Hermitian
/// positive-definite operator.
fn log_det_slq<F>(
    op: F,
    bundle: &OperatorBundle,
    probes: usize,
    steps: usize,
    rng: &mut impl Rng,
) -> Result<f64>
where
    F: Fn(&ComplexField) -> Result<ComplexField>,
{
    if probes == 0 || steps == 0 {
        return Err(Error::invalid("SLQ needs probes >= 1 and steps >= 1"));
    }
    let (h, w) = (bundle.height(), bundle.width());
    let mut total = 0.0;
    for _ in 0..probes {
        let v = draw_probe(h, w, ProbeLaw::Gaussian, rng);
        let v_norm_sq = v.norm_sq();
        if v_norm_sq == 0.0 {
            continue;
        }
        let mut basis: Vec<ComplexField> = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        let mut betas = Vec::with_capacity(steps);
        let mut q = scale(&v, 1.0 / v_norm_sq.sqrt());
        loop {
            let mut t = op(&q)?;
            let alpha = q.inner(&t).re;
            alphas.push(alpha);
            basis.push(q.clone());
            if alphas.len() == steps {
                break;
            }
            // Full reorthogonalization; cheap at this Lanczos depth and
            // keeps the Ritz values clean.
            for b in &basis {
                let coeff = b.inner(&t);
                Zip::from(t.values_mut())
                    .and(b.values())
                    .for_each(|tv, &bv| *tv -= coeff * bv);
            }
            let beta = t.norm();
            if beta < 1e-12 {
                break;
            }
            betas.push(beta);
            q = scale(&t, 1.0 / beta);
        }
        let k = alphas.len();
        let mut tri = nalgebra::DMatrix::<f64>::zeros(k, k);
        for (i, &a) in alphas.iter().enumerate() {
            tri[(i, i)] = a;
        }
        for (i, &b) in betas.iter().enumerate() {
            tri[(i, i + 1)] = b;
            tri[(i + 1, i)] = b;
        }
        let eig = nalgebra::SymmetricEigen::new(tri);
        let mut quad = 0.0;
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 0.0 {
                return Err(Error::NumericalConsistency(format!(
                    "SLQ Ritz value {lambda:.3e} <= 0; operator not positive definite"
                )));
            }
            let weight = eig.eigenvectors[(0, i)];
            quad += weight * weight * lambda.ln();
        }
        total += v_norm_sq * quad;
    }
    Ok(total / probes as f64)
}

fn scale(f: &ComplexField, s: f64) -> ComplexField {
    let mut out = f.values().clone();
    out.mapv_inplace(|v| v * s);
    ComplexField::from_raw(out)
}

/// Draws a real-valued probe field of the given law.
fn draw_probe(h: usize, w: usize, law: ProbeLaw, rng: &mut impl Rng) -> ComplexField {
    let values = Array2::from_shape_fn((h, w), |_| match law {
        ProbeLaw::Gaussian => Complex64::new(rng.sample(StandardNormal), 0.0),
        ProbeLaw::Rademacher => {
            Complex64::new(if rng.gen_bool(0.5) { 1.0 } else { -1.0 }, 0.0)
        }
    });
    ComplexField::from_raw(values)
}

/// Monte Carlo estimate of `diag(D)` for an arbitrary linear map given as
/// a closure: `mean_k (D v_k) . v_k` over `K` real probes, real part
/// taken after averaging.
pub fn mc_diagonal<F>(
    sandwich: F,
    height: usize,
    width: usize,
    probes: usize,
    law: ProbeLaw,
    rng: &mut impl Rng,
) -> Result<Array2<f64>>
where
    F: Fn(&ComplexField) -> Result<ComplexField> + Sync,
{
    if probes == 0 {
        return Err(Error::invalid("mc_diagonal needs at least one probe"));
    }
    let probe_fields: Vec<ComplexField> = (0..probes)
        .map(|_| draw_probe(height, width, law, rng))
        .collect();
    let partials: Vec<Array2<Complex64>> = probe_fields
        .par_chunks(PROBE_CHUNK)
        .map(|chunk| {
            let mut acc = Array2::<Complex64>::zeros((height, width));
            for v in chunk {
                let dv = sandwich(v)?;
                Zip::from(&mut acc)
                    .and(dv.values())
                    .and(v.values())
                    .for_each(|a, &d, &p| *a += d * p);
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut sum = Array2::<Complex64>::zeros((height, width));
    for p in partials {
        sum += &p;
    }
    let k = probes as f64;
    Ok(sum.mapv(|v| v.re / k))
}

/// Fused Monte Carlo estimator for the four gradient diagonals, sharing
/// one probe set and the CG solves common to several sandwiches.
pub fn mc_gradient_diagonals(
    bundle: &OperatorBundle,
    solver: &SolverConfig,
    probes: usize,
    law: ProbeLaw,
    rng: &mut impl Rng,
) -> Result<(GradientDiagonals, u64)> {
    if probes == 0 {
        return Err(Error::invalid("gradient diagonals need at least one probe"));
    }
    let (h, w) = (bundle.height(), bundle.width());
    let probe_fields: Vec<ComplexField> =
        (0..probes).map(|_| draw_probe(h, w, law, rng)).collect();

    struct Partial {
        acc: [Array2<Complex64>; 4],
        cg_iters: u64,
    }

    let partials: Vec<Partial> = probe_fields
        .par_chunks(PROBE_CHUNK)
        .map(|chunk| {
            let mut acc = [
                Array2::<Complex64>::zeros((h, w)),
                Array2::<Complex64>::zeros((h, w)),
                Array2::<Complex64>::zeros((h, w)),
                Array2::<Complex64>::zeros((h, w)),
            ];
            let mut cg_iters = 0u64;
            for v in chunk {
                let av = bundle.apply_a(v)?;
                // S^-1 A v; shared by the first and fourth sandwich.
                let (s_av, rep) = bundle.solve_s(&av, solver.nested_cg_tol, solver)?;
                cg_iters += rep.iterations as u64;
                // M^-1 A v; shared by the second and third sandwich.
                let (m_av, iters) = solve_m(bundle, &av, solver)?;
                cg_iters += iters;

                let out1 = bundle.apply_a(&s_av)?;
                let out2 = bundle.apply_a(&m_av)?;

                let b_m_av = bundle.apply_b(&m_av)?;
                let (s_b_m_av, rep) = bundle.solve_s(&b_m_av, solver.nested_cg_tol, solver)?;
                cg_iters += rep.iterations as u64;
                let out3 = bundle.apply_a(&s_b_m_av)?;

                let b_s_av = bundle.apply_b(&s_av)?;
                let (m_b_s_av, iters) = solve_m(bundle, &b_s_av, solver)?;
                cg_iters += iters;
                let b_m_b_s_av = bundle.apply_b(&m_b_s_av)?;
                let (s_tail, rep) = bundle.solve_s(&b_m_b_s_av, solver.nested_cg_tol, solver)?;
                cg_iters += rep.iterations as u64;
                let out4 = bundle.apply_a(&s_tail)?;

                for (a, out) in acc.iter_mut().zip([&out1, &out2, &out3, &out4]) {
                    Zip::from(a)
                        .and(out.values())
                        .and(v.values())
                        .for_each(|av, &ov, &pv| *av += ov * pv);
                }
            }
            Ok(Partial { acc, cg_iters })
        })
        .collect::<Result<_>>()?;

    let mut sums = [
        Array2::<Complex64>::zeros((h, w)),
        Array2::<Complex64>::zeros((h, w)),
        Array2::<Complex64>::zeros((h, w)),
        Array2::<Complex64>::zeros((h, w)),
    ];
    let mut cg_iters = 0u64;
    for p in partials {
        for (s, a) in sums.iter_mut().zip(p.acc.iter()) {
            *s += a;
        }
        cg_iters += p.cg_iters;
    }
    let k = probes as f64;
    let real_mean =
        |arr: &Array2<Complex64>| arr.mapv(|v| Complex64::new(v.re / k, 0.0));
    let [d1, d2, d3, d4] = sums;
    Ok((
        GradientDiagonals {
            s_inv: real_mean(&d1),
            m_inv: real_mean(&d2),
            // Non-Hermitian sandwich: keep the complex average, its real
            // part is taken where the gradient formula says so.
            s_inv_b_m_inv: d3.mapv(|v| v / k),
            s_inv_b_m_inv_b_s_inv: real_mean(&d4),
        },
        cg_iters,
    ))
}

/// Gradient value plus the byproducts the outer loop needs.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub gradient: Array2<f64>,
    /// Quadratic part of the objective at the evaluation point, reused
    /// as the line-search merit.
    pub merit_quadratic: f64,
    pub diagnostics: EvalDiagnostics,
}

/// Gradient of `f_L` with caller-supplied diagonal terms (exact oracle
/// diagonals or Monte Carlo estimates).
pub fn gradient_with_diagonals(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
    diagonals: &GradientDiagonals,
) -> Result<GradientEval> {
    let start = Instant::now();
    let s_apps0 = bundle.s_application_count();
    check_compatible(bundle, measurements)?;
    let (h, w) = (bundle.height(), bundle.width());
    let alpha = bundle.alpha();
    let looks = measurements.looks.len();

    let cached = cached_s_solves(bundle, measurements, solver)?;
    let mut cg_iters: u64 = cached.iter().map(|(_, it)| it).sum();
    let residuals = residuals_from_cache(bundle, measurements, &cached)?;

    // t1 = A^H S^-1 y_1
    let t1 = bundle.apply_a(&cached[0].0)?;
    let mut merit = measurements.looks[0].inner(&cached[0].0).re;

    // Per-look vector terms for l >= 2.
    struct LookTerms {
        a: ComplexField,
        b: Option<ComplexField>,
        d: Option<ComplexField>,
        quad: f64,
        cg_iters: u64,
    }
    let terms: Vec<LookTerms> = residuals
        .par_iter()
        .enumerate()
        .map(|(idx, r)| {
            let mut iters = 0u64;
            // a_l = A^H M^-1 r_l; at alpha = 0 the S-solve cache already
            // holds M^-1 r_l = S^-1 y_l.
            let m_r = if alpha == 0.0 {
                cached[idx + 1].0.clone()
            } else {
                let (g, it) = solve_m(bundle, r, solver)?;
                iters += it;
                g
            };
            let quad = r.inner(&m_r).re;
            let a = bundle.apply_a(&m_r)?;
            if alpha == 0.0 {
                return Ok(LookTerms {
                    a,
                    b: None,
                    d: None,
                    quad,
                    cg_iters: iters,
                });
            }
            // b_l = A^H S^-1 B M^-1 r_l
            let b_m_r = bundle.apply_b(&m_r)?;
            let (s_b_m_r, rep) = bundle.solve_s(&b_m_r, solver.nested_cg_tol, solver)?;
            iters += rep.iterations as u64;
            let b = bundle.apply_a(&s_b_m_r)?;
            // d_l = A^H S^-1 y_{l-1}
            let d = bundle.apply_a(&cached[idx].0)?;
            Ok(LookTerms {
                a,
                b: Some(b),
                d: Some(d),
                quad,
                cg_iters: iters,
            })
        })
        .collect::<Result<_>>()?;
    for t in &terms {
        cg_iters += t.cg_iters;
        merit += t.quad;
    }

    // Assemble per the gradient formula; diagonal terms do not depend on
    // the look index, so they enter once with multiplicity L - 1.
    let a2 = alpha * alpha;
    let mut acc = Array2::<Complex64>::zeros((h, w));
    Zip::from(&mut acc)
        .and(&diagonals.s_inv)
        .and(t1.values())
        .for_each(|g, &d1, &t| *g = d1 - Complex64::new(t.norm_sqr(), 0.0));
    if looks > 1 {
        let l1 = (looks - 1) as f64;
        Zip::from(&mut acc)
            .and(&diagonals.m_inv)
            .and(&diagonals.s_inv_b_m_inv)
            .and(&diagonals.s_inv_b_m_inv_b_s_inv)
            .for_each(|g, &d2, &d3, &d4| {
                *g += (d2 - a2 * (2.0 * d3.re - d4)) * l1;
            });
        for t in &terms {
            Zip::from(&mut acc).and(t.a.values()).for_each(|g, &av| {
                *g -= Complex64::new(av.norm_sqr(), 0.0);
            });
            if alpha != 0.0 {
                let b = t.b.as_ref().expect("set when alpha > 0");
                let d = t.d.as_ref().expect("set when alpha > 0");
                // The residual-dependence term is
                // 2 alpha Re{ A^H S^-1 y_{l-1} . conj(A^H (S^-1 B - I) M^-1 r_l) }:
                // the trace coefficient of dB in (M^-1 r)^H dr places the
                // (B S^-1 - I) factor on the right of the dyad, so it lands
                // on the residual-side image, not the y-side one.
                Zip::from(&mut acc)
                    .and(t.a.values())
                    .and(b.values())
                    .and(d.values())
                    .for_each(|g, &av, &bv, &dv| {
                        let cross = (bv * av.conj()).re;
                        *g += Complex64::new(
                            -a2 * (-2.0 * cross + bv.norm_sqr())
                                + 2.0 * alpha * (dv * (bv - av).conj()).re,
                            0.0,
                        );
                    });
            }
        }
    }

    // The formula is real; anything beyond roundoff in the imaginary
    // part signals inconsistent diagonals or a broken operator.
    let norm_sq: f64 = acc.iter().map(|v| v.norm_sqr()).sum();
    let imag_sq: f64 = acc.iter().map(|v| v.im * v.im).sum();
    if imag_sq.sqrt() > GRADIENT_IMAG_TOL * norm_sq.sqrt() {
        return Err(Error::NumericalConsistency(format!(
            "gradient imaginary residue {:.3e} exceeds {:.0e} of norm {:.3e}",
            imag_sq.sqrt(),
            GRADIENT_IMAG_TOL,
            norm_sq.sqrt()
        )));
    }
    let grad = acc.mapv(|v| v.re);
    let diagnostics = EvalDiagnostics {
        s_applications: bundle.s_application_count() - s_apps0,
        cg_iterations: cg_iters,
        wall_micros: start.elapsed().as_micros() as u64,
    };
    Ok(GradientEval {
        gradient: grad,
        merit_quadratic: merit,
        diagnostics,
    })
}

/// Gradient of `f_L` with Monte Carlo diagonal estimation: `K` probes
/// drawn from `rng`, shared across all four diagonal terms.
pub fn gradient(
    bundle: &OperatorBundle,
    measurements: &MeasurementSet,
    solver: &SolverConfig,
    rng: &mut impl Rng,
) -> Result<GradientEval> {
    let start = Instant::now();
    let s_apps0 = bundle.s_application_count();
    let (diagonals, mc_iters) =
        mc_gradient_diagonals(bundle, solver, solver.mc_probes, solver.probe_law, rng)?;
    let mut eval = gradient_with_diagonals(bundle, measurements, solver, &diagonals)?;
    eval.diagnostics.cg_iterations += mc_iters;
    eval.diagnostics.s_applications = bundle.s_application_count() - s_apps0;
    eval.diagnostics.wall_micros = start.elapsed().as_micros() as u64;
    Ok(eval)
}
