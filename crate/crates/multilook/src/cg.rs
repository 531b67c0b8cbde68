//! Conjugate gradient for Hermitian positive-definite matrix-free systems.
//!
//! The solver sees the system only through an operator closure, so the
//! same routine serves the `S`-systems, the nested solve inside every `M`
//! application, and the outer `M`-systems themselves.

use ndarray::Zip;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::field::ComplexField;

/// Outcome of one CG solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    /// Iterations actually performed.
    pub iterations: usize,
    /// True residual norm `||op(h) - rhs||_2` at exit.
    pub final_residual_norm: f64,
    pub converged: bool,
}

/// Solves `op(h) = rhs` for Hermitian positive-definite `op` with a zero
/// initial iterate and absolute residual tolerance `tol`.
///
/// Convergence is tracked through the residual recurrence; the residual
/// is recomputed from scratch every 50 iterations and again whenever the
/// recurrence claims convergence, so the reported norm is always the
/// true residual. Returns the best iterate with `converged = false` if
/// `max_iters` is exhausted first.
pub fn cg_solve<F>(
    op: F,
    rhs: &ComplexField,
    tol: f64,
    max_iters: usize,
) -> Result<(ComplexField, CgReport)>
where
    F: Fn(&ComplexField) -> Result<ComplexField>,
{
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("cg tolerance must be > 0, got {tol}")));
    }
    let mut h = ComplexField::zeros(rhs.height(), rhs.width());
    let mut w = rhs.clone();
    let mut w_dot = w.norm_sq();
    if !w_dot.is_finite() {
        return Err(Error::solver("cg: non-finite right-hand side", f64::NAN));
    }
    if w_dot.sqrt() <= tol {
        return Ok((
            h,
            CgReport {
                iterations: 0,
                final_residual_norm: w_dot.sqrt(),
                converged: true,
            },
        ));
    }

    let mut p = w.clone();
    let mut iterations = 0usize;
    loop {
        if iterations >= max_iters {
            let residual = true_residual(&op, rhs, &h)?.norm();
            return Ok((
                h,
                CgReport {
                    iterations,
                    final_residual_norm: residual,
                    converged: residual <= tol,
                },
            ));
        }

        let sp = op(&p)?;
        let denom = p.inner(&sp).re;
        if !denom.is_finite() || denom <= 0.0 {
            return Err(Error::solver(
                format!("cg: operator is not positive definite (p^H A p = {denom:.3e})"),
                w_dot.sqrt(),
            ));
        }
        let alpha = w_dot / denom;
        axpy(&mut h, alpha, &p);
        iterations += 1;

        if iterations % 50 == 0 {
            w = true_residual(&op, rhs, &h)?;
        } else {
            axpy(&mut w, -alpha, &sp);
        }
        let mut w_dot_next = w.norm_sq();
        if !w_dot_next.is_finite() {
            return Err(Error::solver("cg: residual became non-finite", f64::NAN));
        }

        if w_dot_next.sqrt() <= tol {
            let true_w = true_residual(&op, rhs, &h)?;
            let true_norm = true_w.norm();
            if true_norm <= tol {
                return Ok((
                    h,
                    CgReport {
                        iterations,
                        final_residual_norm: true_norm,
                        converged: true,
                    },
                ));
            }
            // Recurrence drifted from the true residual: restart the
            // search direction from the recomputed residual.
            w = true_w;
            w_dot_next = w.norm_sq();
            p = w.clone();
            w_dot = w_dot_next;
            continue;
        }

        let beta = w_dot_next / w_dot;
        w_dot = w_dot_next;
        // p <- w + beta * p
        Zip::from(p.values_mut())
            .and(w.values())
            .for_each(|pv, &wv| *pv = wv + *pv * beta);
    }
}

fn true_residual<F>(op: &F, rhs: &ComplexField, h: &ComplexField) -> Result<ComplexField>
where
    F: Fn(&ComplexField) -> Result<ComplexField>,
{
    let ah = op(h)?;
    let mut w = rhs.clone();
    axpy(&mut w, -1.0, &ah);
    Ok(w)
}

/// `y <- y + a * x` with a real coefficient.
fn axpy(y: &mut ComplexField, a: f64, x: &ComplexField) {
    let a = Complex64::new(a, 0.0);
    Zip::from(y.values_mut())
        .and(x.values())
        .for_each(|yv, &xv| *yv += a * xv);
}
