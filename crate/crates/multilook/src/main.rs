//! Command-line front end: thin argument plumbing over the library.
//!
//! Subcommands: `simulate`, `estimate-alpha`, `reconstruct`, `evaluate`,
//! `grad-check`. Every flag can also come from a `--config` key=value
//! file (CLI flags win; unknown keys are errors). Exit codes: 0 success,
//! 1 failed grad-check, 2 invalid arguments, 3 I/O or format errors,
//! 4 solver failures, 5 capability limits, 6 numerical-consistency
//! failures, 7 degenerate inputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use multilook::aperture::ApertureMask;
use multilook::config::{AcquisitionParams, SolverConfig};
use multilook::error::{Error, Result};
use multilook::estimate::estimate_alpha;
use multilook::field::ReflectivityImage;
use multilook::io::{load_gray, read_cfld, read_pgm, write_cfld, write_pgm16, RunConfig};
use multilook::likelihood::gradient_with_diagonals;
use multilook::metrics::{psnr, ssim};
use multilook::operators::OperatorBundle;
use multilook::oracle::DenseSystem;
use multilook::recon::{pgd_reconstruct, AlphaSpec, Projector, DEFAULT_CLAMP_LO};
use multilook::rng::RngStreams;
use multilook::sim::{simulate_measurements, MeasurementSet};

#[derive(Parser)]
#[command(
    name = "multilook",
    about = "Simulation and reconstruction for multi-look holography with correlated speckle",
    version
)]
struct Cli {
    /// Cap the worker pool (default: all cores, or RAYON_NUM_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize correlated multi-look measurements from a grayscale image.
    Simulate(SimulateArgs),
    /// Estimate the speckle power and inter-look correlation from a CFLD file.
    EstimateAlpha(EstimateArgs),
    /// Reconstruct the reflectivity from a CFLD file by projected gradient descent.
    Reconstruct(ReconstructArgs),
    /// PSNR/SSIM between a reconstruction and the ground truth.
    Evaluate(EvaluateArgs),
    /// Validate the analytic gradient against the dense oracle and finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Input grayscale image (PGM or PNG), mapped to 0..=255 reflectivity.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Aperture spec: full | circular:<fraction> | annular[:<outer>:<inner>].
    #[arg(long)]
    aperture: Option<String>,
    /// Inter-look correlation coefficient in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of looks.
    #[arg(long)]
    looks: Option<usize>,
    /// Sensor noise standard deviation.
    #[arg(long = "sigma-z")]
    sigma_z: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output CFLD path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CFLD path.
    #[arg(long)]
    meas: Option<PathBuf>,
    /// Append a `gamma_hat,alpha_raw,alpha_hat,looks` row to this CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    meas: Option<PathBuf>,
    #[arg(long)]
    aperture: Option<String>,
    #[arg(long = "sigma-z")]
    sigma_z: Option<f64>,
    /// "auto" or a fixed value in [0, 1].
    #[arg(long)]
    alpha: Option<String>,
    /// Projector spec: clamp | tv:<lambda>.
    #[arg(long)]
    projector: Option<String>,
    /// Outer PGD iteration cap.
    #[arg(long)]
    iters: Option<usize>,
    /// Monte Carlo probes per gradient.
    #[arg(long = "mc-probes")]
    mc_probes: Option<usize>,
    /// Absolute CG residual tolerance.
    #[arg(long = "cg-tol")]
    cg_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output 16-bit PGM path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-iteration CSV log path.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    recon: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Image side length (n = size^2 must stay within the dense cap).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    looks: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<i32> {
    let body = || -> Result<i32> {
        match cli.command {
            Command::Simulate(args) => cmd_simulate(args).map(|()| 0),
            Command::EstimateAlpha(args) => cmd_estimate_alpha(args).map(|()| 0),
            Command::Reconstruct(args) => cmd_reconstruct(args).map(|()| 0),
            Command::Evaluate(args) => cmd_evaluate(args).map(|()| 0),
            Command::GradCheck(args) => cmd_grad_check(args),
        }
    };
    match cli.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            pool.install(body)
        }
        None => body(),
    }
}

/// Loads the optional config file and validates its keys.
fn config_for(path: &Option<PathBuf>, allowed: &[&str]) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.check_keys(allowed)?;
    Ok(cfg)
}

/// Flag value, then config value, then error naming the missing key.
fn require<T: std::str::FromStr>(flag: Option<T>, cfg: &RunConfig, key: &str) -> Result<T> {
    resolve(flag, cfg, key)?
        .ok_or_else(|| Error::invalid(format!("missing required option --{key}")))
}

/// Flag value, then config value, then `None`.
fn resolve<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &RunConfig,
    key: &str,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match cfg.get(key) {
        Some(raw) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("config key {key}: bad value {raw:?}"))),
        None => Ok(None),
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let cfg = config_for(
        &args.config,
        &["image", "aperture", "alpha", "looks", "sigma-z", "seed", "out"],
    )?;
    let image: PathBuf = require(args.image, &cfg, "image")?;
    let aperture_spec: String = require(args.aperture, &cfg, "aperture")?;
    let alpha: f64 = require(args.alpha, &cfg, "alpha")?;
    let looks: usize = require(args.looks, &cfg, "looks")?;
    let sigma_z: f64 = require(args.sigma_z, &cfg, "sigma-z")?;
    let seed: u64 = resolve(args.seed, &cfg, "seed")?.unwrap_or(0);
    let out: PathBuf = require(args.out, &cfg, "out")?;

    let gray = load_gray(&image)?;
    let x = ReflectivityImage::new(gray)?;
    let aperture = ApertureMask::parse_spec(&aperture_spec, x.height(), x.width())?;
    let params = AcquisitionParams::new(looks, alpha, sigma_z, seed)?;
    let set = simulate_measurements(&x, &aperture, &params, &RngStreams::new(seed))?;
    write_cfld(&out, &set.looks, sigma_z, Some(alpha), seed)?;
    println!(
        "wrote {} ({} looks of {}x{}, alpha {}, sigma_z {}, seed {})",
        out.display(),
        looks,
        x.height(),
        x.width(),
        alpha,
        sigma_z,
        seed
    );
    Ok(())
}

fn cmd_estimate_alpha(args: EstimateArgs) -> Result<()> {
    let cfg = config_for(&args.config, &["meas", "csv"])?;
    let meas: PathBuf = require(args.meas, &cfg, "meas")?;
    let csv: Option<PathBuf> = resolve(args.csv, &cfg, "csv")?;

    let data = read_cfld(&meas)?;
    let set = measurement_set_from_cfld(&data, ApertureMask::full(data.rows(), data.cols())?)?;
    let est = estimate_alpha(&set)?;
    println!("gamma_hat   {:.6}", est.gamma_hat);
    println!("alpha_raw   {:.6}", est.alpha_raw);
    println!("alpha_hat   {:.6}", est.alpha_hat);
    println!("looks_used  {}", est.looks_used);
    if let Some(path) = csv {
        append_estimate_csv(&path, est.gamma_hat, est.alpha_raw, est.alpha_hat, est.looks_used)?;
    }
    Ok(())
}

fn append_estimate_csv(
    path: &Path,
    gamma: f64,
    alpha_raw: f64,
    alpha_hat: f64,
    looks: usize,
) -> Result<()> {
    use std::io::Write;
    let new = !path.exists();
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if new {
        writeln!(f, "gamma_hat,alpha_raw,alpha_hat,looks")?;
    }
    writeln!(f, "{gamma:.9},{alpha_raw:.9},{alpha_hat:.9},{looks}")?;
    Ok(())
}

/// The aperture is not stored in the container; the estimator does not
/// use it, and reconstruction receives it from the command line.
fn measurement_set_from_cfld(
    data: &multilook::io::CfldData,
    aperture: ApertureMask,
) -> Result<MeasurementSet> {
    let params = AcquisitionParams::new(
        data.looks.len(),
        data.alpha_true.unwrap_or(0.0),
        data.sigma_z,
        data.seed,
    )?;
    MeasurementSet::new(data.looks.clone(), params, aperture, None)
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<()> {
    let cfg = config_for(
        &args.config,
        &[
            "meas", "aperture", "sigma-z", "alpha", "projector", "iters", "mc-probes",
            "cg-tol", "seed", "out", "log",
        ],
    )?;
    let meas_path: PathBuf = require(args.meas, &cfg, "meas")?;
    let aperture_spec: String = require(args.aperture, &cfg, "aperture")?;
    let sigma_flag: Option<f64> = resolve(args.sigma_z, &cfg, "sigma-z")?;
    let alpha_spec: String = resolve(args.alpha, &cfg, "alpha")?.unwrap_or_else(|| "auto".into());
    let projector_spec: String =
        resolve(args.projector, &cfg, "projector")?.unwrap_or_else(|| "clamp".into());
    let iters: Option<usize> = resolve(args.iters, &cfg, "iters")?;
    let mc_probes: Option<usize> = resolve(args.mc_probes, &cfg, "mc-probes")?;
    let cg_tol: Option<f64> = resolve(args.cg_tol, &cfg, "cg-tol")?;
    let seed: u64 = resolve(args.seed, &cfg, "seed")?.unwrap_or(0);
    let out: PathBuf = require(args.out, &cfg, "out")?;
    let log: Option<PathBuf> = resolve(args.log, &cfg, "log")?;

    let data = read_cfld(&meas_path)?;
    let Some(sigma_z) = sigma_flag else {
        return Err(Error::invalid(format!(
            "missing required option --sigma-z (the measurement file records sigma_z = {})",
            data.sigma_z
        )));
    };
    if (sigma_z - data.sigma_z).abs() > 1e-9 * data.sigma_z.max(1.0) {
        eprintln!(
            "warning: --sigma-z {} disagrees with the measurement header ({})",
            sigma_z, data.sigma_z
        );
    }

    let alpha = match alpha_spec.as_str() {
        "auto" => AlphaSpec::Auto,
        v => {
            let a: f64 = v.parse().map_err(|_| {
                Error::invalid(format!("--alpha must be \"auto\" or a number, got {v:?}"))
            })?;
            if let Some(true_alpha) = data.alpha_true {
                if (a - true_alpha).abs() > 1e-9 {
                    eprintln!(
                        "warning: --alpha {a} disagrees with the measurement header ({true_alpha})"
                    );
                }
            }
            AlphaSpec::Fixed(a)
        }
    };

    let aperture = ApertureMask::parse_spec(&aperture_spec, data.rows(), data.cols())?;
    let projector = Projector::parse_spec(&projector_spec, DEFAULT_CLAMP_LO, 255.0)?;
    let mut solver = SolverConfig::default();
    if let Some(n) = iters {
        solver.max_pgd_iters = n;
    }
    if let Some(k) = mc_probes {
        solver.mc_probes = k;
    }
    if let Some(tol) = cg_tol {
        solver.cg_tol = tol;
        solver.nested_cg_tol = solver.nested_cg_tol.min(tol);
    }
    solver.validate()?;

    let set = measurement_set_from_cfld(&data, aperture.clone())?;
    let (image, report) = pgd_reconstruct(
        &set,
        &aperture,
        sigma_z,
        alpha,
        &projector,
        &solver,
        &RngStreams::new(seed),
    )?;
    write_pgm16(&out, image.values())?;
    if let Some(path) = log {
        report.write_csv(&path)?;
    }
    let final_merit = report.trace.last().map_or(f64::NAN, |t| t.merit);
    println!(
        "reconstructed {}x{} in {} iterations (alpha {}, stop {:?}, merit {:.6e})",
        image.height(),
        image.width(),
        report.iterations,
        report.alpha_used,
        report.stop_reason,
        final_merit
    );
    if let Some(est) = report.alpha_estimate {
        println!(
            "alpha estimate: raw {:.6}, clamped {:.6} (gamma_hat {:.4})",
            est.alpha_raw, est.alpha_hat, est.gamma_hat
        );
    }
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let cfg = config_for(&args.config, &["recon", "truth"])?;
    let recon_path: PathBuf = require(args.recon, &cfg, "recon")?;
    let truth_path: PathBuf = require(args.truth, &cfg, "truth")?;
    let recon = read_pgm(&recon_path)?;
    let truth = read_pgm(&truth_path)?;
    let p = psnr(&truth, &recon, 255.0)?;
    let s = ssim(&truth, &recon)?;
    println!("psnr_db {p:.4}");
    println!("ssim    {s:.6}");
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs) -> Result<i32> {
    let cfg = config_for(&args.config, &["size", "looks", "alpha", "seed"])?;
    let size: usize = resolve(args.size, &cfg, "size")?.unwrap_or(16);
    let looks: usize = resolve(args.looks, &cfg, "looks")?.unwrap_or(3);
    let alpha: f64 = resolve(args.alpha, &cfg, "alpha")?.unwrap_or(0.5);
    let seed: u64 = resolve(args.seed, &cfg, "seed")?.unwrap_or(0);

    let n = size * size;
    if n > multilook::oracle::DENSE_SIZE_CAP {
        return Err(Error::Capability(format!(
            "grad-check needs n = size^2 <= {}, got {n}",
            multilook::oracle::DENSE_SIZE_CAP
        )));
    }
    let sigma_z = 9.0;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let x = ReflectivityImage::new(Array2::from_shape_fn((size, size), |_| {
        rng.gen_range(5.0..255.0)
    }))?;
    let aperture = ApertureMask::circular(size, size, 0.8)?;
    let params = AcquisitionParams::new(looks, alpha, sigma_z, seed)?;
    let set = simulate_measurements(&x, &aperture, &params, &RngStreams::new(seed))?;
    let bundle = OperatorBundle::new(&x, &aperture, sigma_z, alpha)?;
    let sys = DenseSystem::from_bundle(&bundle)?;

    println!("grad-check: size {size} ({n} pixels), looks {looks}, alpha {alpha}, seed {seed}");
    let mut all_pass = true;
    let mut verdict = |name: &str, value: f64, bound: f64| -> bool {
        let pass = value < bound;
        println!(
            "{} {name}: {value:.3e} (bound {bound:.0e})",
            if pass { "PASS" } else { "FAIL" }
        );
        pass
    };

    // Two independent dense assemblies of the same derivative.
    let (wc, eq) = sys.gradient_forms(&set.looks)?;
    let rel_forms = (&wc - &eq).norm() / eq.norm();
    all_pass &= verdict("dense route agreement", rel_forms, 1e-10);

    // Dense analytic gradient vs central finite differences.
    let dense = sys.gradient(&set.looks)?;
    let coords: Vec<usize> = (0..20).map(|_| rng.gen_range(0..n)).collect();
    let fd = sys.fd_gradient(&set.looks, &coords, 1e-4)?;
    let floor = 1e-6 * dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_rel = coords
        .iter()
        .zip(fd.iter())
        .map(|(&i, &f)| (f - dense[i]).abs() / dense[i].abs().max(floor))
        .fold(0.0, f64::max);
    all_pass &= verdict("finite differences", max_rel, 1e-4);

    // Matrix-free gradient with oracle-exact diagonals.
    let solver = SolverConfig {
        cg_tol: 1e-10,
        nested_cg_tol: 1e-11,
        ..SolverConfig::default()
    };
    let eval = gradient_with_diagonals(&bundle, &set, &solver, &sys.exact_gradient_diagonals())?;
    let num: f64 = dense
        .iter()
        .zip(eval.gradient.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    all_pass &= verdict("matrix-free vs dense", num / dense.norm(), 1e-6);

    if alpha == 0.0 {
        let ind = sys.gradient_independent(&set.looks)?;
        let rel = (&dense - &(ind * looks as f64)).norm() / dense.norm();
        all_pass &= verdict("independence collapse", rel, 1e-8);
    }

    println!("{}", if all_pass { "ALL CHECKS PASSED" } else { "CHECKS FAILED" });
    Ok(if all_pass { 0 } else { 1 })
}
