//! Acquisition and solver parameter sets.

use crate::error::{Error, Result};

/// Parameters of a multi-look acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionParams {
    /// Number of looks `L >= 1`.
    pub looks: usize,
    /// Inter-look correlation coefficient, in `[0, 1]`.
    pub alpha: f64,
    /// Additive-noise standard deviation, same intensity scale as the
    /// reflectivity; strictly positive.
    pub sigma_z: f64,
    /// Master seed for all random streams of the acquisition.
    pub seed: u64,
}

impl AcquisitionParams {
    pub fn new(looks: usize, alpha: f64, sigma_z: f64, seed: u64) -> Result<Self> {
        if looks < 1 {
            return Err(Error::invalid("looks must be >= 1"));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")));
        }
        if !(sigma_z > 0.0) || !sigma_z.is_finite() {
            return Err(Error::invalid(format!("sigma_z must be > 0, got {sigma_z}")));
        }
        Ok(Self { looks, alpha, sigma_z, seed })
    }
}

/// Probe distribution for Monte Carlo diagonal estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeLaw {
    /// Standard normal entries.
    Gaussian,
    /// Independent +1 / -1 entries.
    Rademacher,
}

impl std::str::FromStr for ProbeLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ProbeLaw::Gaussian),
            "rademacher" => Ok(ProbeLaw::Rademacher),
            other => Err(Error::invalid(format!(
                "unknown probe law {other:?} (expected \"gaussian\" or \"rademacher\")"
            ))),
        }
    }
}

/// Tolerances and iteration caps for the solvers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    /// Outer projected-gradient iteration cap.
    pub max_pgd_iters: usize,
    /// Trial-step factor for the backtracking line search, as a fraction
    /// of `||x||_inf / ||grad||_inf` (scale-free; see `recon`).
    pub step_init: f64,
    /// Armijo sufficient-decrease constant, in `(0, 1)`.
    pub armijo_c: f64,
    /// Backtracking shrink factor, in `(0, 1)`.
    pub armijo_shrink: f64,
    /// Absolute residual tolerance for outer CG solves.
    pub cg_tol: f64,
    /// CG iteration cap; `None` means `n = H * W` of the problem at hand.
    pub cg_max_iters: Option<usize>,
    /// Absolute residual tolerance for the CG solve nested inside every
    /// application of the innovation-covariance operator `M`. Must not
    /// exceed `cg_tol`.
    pub nested_cg_tol: f64,
    /// Number of Monte Carlo probes `K` per diagonal estimate.
    pub mc_probes: usize,
    pub probe_law: ProbeLaw,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_pgd_iters: 100,
            step_init: 0.5,
            armijo_c: 1e-4,
            armijo_shrink: 0.5,
            cg_tol: 1e-6,
            cg_max_iters: None,
            nested_cg_tol: 1e-8,
            mc_probes: 50,
            probe_law: ProbeLaw::Gaussian,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nested_cg_tol > self.cg_tol {
            return Err(Error::invalid(format!(
                "nested_cg_tol ({}) must be <= cg_tol ({})",
                self.nested_cg_tol, self.cg_tol
            )));
        }
        if !(self.cg_tol > 0.0) || !(self.nested_cg_tol > 0.0) {
            return Err(Error::invalid("CG tolerances must be > 0"));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::invalid("step_init must be > 0"));
        }
        if !(0.0..1.0).contains(&self.armijo_c) || self.armijo_c == 0.0 {
            return Err(Error::invalid("armijo_c must be in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.armijo_shrink) || self.armijo_shrink == 0.0 {
            return Err(Error::invalid("armijo_shrink must be in (0, 1)"));
        }
        if self.mc_probes < 1 {
            return Err(Error::invalid("mc_probes must be >= 1"));
        }
        Ok(())
    }

    /// CG iteration cap for a problem of vectorized dimension `n`.
    pub fn cg_iter_cap(&self, n: usize) -> usize {
        self.cg_max_iters.unwrap_or(n)
    }
}
