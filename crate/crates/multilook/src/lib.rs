//! Matrix-free simulation and reconstruction for multi-look digital
//! holography with correlated speckle.
//!
//! A coherent imaging system records `L` looks of the same scene,
//! `y_l = A g_l + z_l`, where the speckle fields `g_l` follow a first-order
//! Markov chain with per-look correlation `alpha` and per-pixel variance
//! equal to the reflectivity `x`. This crate provides:
//!
//! - [`sim`]: synthesis of correlated multi-look measurements,
//! - [`operators`]: FFT-based application of the forward operator `A` and
//!   the derived covariance operators `B`, `S`, `M` without forming any
//!   n-by-n matrix,
//! - [`cg`]: conjugate gradient for Hermitian positive-definite systems,
//! - [`likelihood`]: the correlation-aware negative log-likelihood, its
//!   gradient, and Monte Carlo diagonal estimation,
//! - [`estimate`]: moment estimators for the speckle power and the
//!   inter-look correlation coefficient,
//! - [`recon`]: projected gradient descent with clamp / total-variation
//!   projectors,
//! - [`metrics`]: PSNR and SSIM,
//! - [`oracle`]: a dense reference implementation for small problems,
//!   used to validate every matrix-free code path,
//! - [`io`]: the `CFLD` measurement container, PGM images, and run
//!   configuration files.
//!
//! Start with the runnable programs under `examples/`; each demonstrates
//! one capability end to end.

pub mod aperture;
pub mod cg;
pub mod config;
pub mod error;
pub mod estimate;
pub mod fft;
pub mod field;
pub mod io;
pub mod likelihood;
pub mod metrics;
pub mod operators;
pub mod oracle;
pub mod recon;
pub mod rng;
pub mod sim;

pub use aperture::ApertureMask;
pub use config::{AcquisitionParams, SolverConfig};
pub use error::{Error, Result};
pub use estimate::{estimate_alpha, estimate_gamma, CorrelationEstimate};
pub use field::{ComplexField, ReflectivityImage};
pub use operators::OperatorBundle;
pub use recon::{pgd_reconstruct, AlphaSpec, Projector, ReconReport};
pub use rng::RngStreams;
pub use sim::{simulate_measurements, simulate_speckle, MeasurementSet};
