//! Configuration-driven command-line surface.
//!
//! A TOML file describes the spectrum, field count, amplitude, grid, and
//! output directory; flags override individual values. Every command is
//! deterministic given (config, seed): floats are written with 17 significant
//! digits and files are created atomically (temp + rename).

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::chi2stats;
use crate::error::{Error, Result};
use crate::gaussian_bias::{wick4, BiasSpec};
use crate::harmonics::UnitVector;
use crate::kernels::{build_kernel_set_with_tol, KernelSet, RadialGrid, DEFAULT_TOL_REL};
use crate::mc_oracle::{
    mc_biased_point_stats, mc_mode_diagonality, mc_wick4, ValidationCheck,
};
use crate::rng::task_rng;
use crate::sampler::{
    assemble_phi, assemble_phi00, assemble_phi00_corrected, assemble_phi_corrected,
    build_mode_laws, draw_sample, lmax_rule, sigma_recovery, truncation_plan,
};
use crate::spectrum::PowerSpectrum;

use nalgebra::Matrix4;
use rand::Rng;

/// Exit codes: 0 success, 1 validation failure, 2 config/IO error,
/// 3 numerical failure.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum SpectrumConfig {
    Monochromatic { k0: f64, sigma0_sq: f64 },
    /// Power-law-times-exponential spectrum; defaults to the unit-variance
    /// member with `power = 0` when `amplitude` is omitted.
    Exponential { scale: f64, amplitude: Option<f64>, power: Option<f64> },
    Csv { path: PathBuf },
}

impl SpectrumConfig {
    fn build(&self) -> Result<PowerSpectrum> {
        match self {
            SpectrumConfig::Monochromatic { k0, sigma0_sq } => {
                PowerSpectrum::monochromatic(*k0, *sigma0_sq)
            }
            SpectrumConfig::Exponential { scale, amplitude, power } => match amplitude {
                Some(a) => PowerSpectrum::exponential_family(*a, power.unwrap_or(0.0), *scale),
                None => {
                    if power.is_some() {
                        return Err(Error::Config(
                            "spectrum.power requires spectrum.amplitude".into(),
                        ));
                    }
                    PowerSpectrum::exponential_unit_variance(*scale)
                }
            },
            SpectrumConfig::Csv { path } => PowerSpectrum::from_csv(path),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridConfig {
    r_max: f64,
    points: usize,
    #[serde(default = "default_spacing")]
    spacing: String,
    r_min: Option<f64>,
}

fn default_spacing() -> String {
    "uniform".into()
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum LmaxSetting {
    Fixed(usize),
    Named(String),
}

impl Default for LmaxSetting {
    fn default() -> Self {
        LmaxSetting::Named("auto".into())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    spectrum: SpectrumConfig,
    n: usize,
    nu: Option<f64>,
    nubar: Option<f64>,
    grid: GridConfig,
    #[serde(default)]
    lmax: LmaxSetting,
    seed: Option<u64>,
    tolerance: Option<f64>,
    outdir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "chi2peaks",
    about = "Analytic statistics and mode sampling of chi-squared random fields \
             conditioned on a stationary point at the origin"
)]
pub struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true, default_value = "chi2peaks.toml")]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Overrides {
    /// Number of component fields n.
    #[arg(long, global = true)]
    n: Option<usize>,
    /// Stationary amplitude nu (field units).
    #[arg(long, global = true)]
    nu: Option<f64>,
    /// Dimensionless amplitude nubar = nu / sigma_0.
    #[arg(long, global = true)]
    nubar: Option<f64>,
    /// Outermost grid radius.
    #[arg(long, global = true)]
    r_max: Option<f64>,
    /// Number of grid points.
    #[arg(long, global = true)]
    points: Option<usize>,
    /// Mode cutoff; "auto" applies the rule of thumb.
    #[arg(long, global = true)]
    lmax: Option<String>,
    /// Master seed for all stochastic commands.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    /// Relative quadrature tolerance.
    #[arg(long, global = true)]
    tolerance: Option<f64>,
    /// Reuse or create a binary kernel table cache at this path.
    #[arg(long, global = true)]
    kernel_cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the spectral moments and effective cutoff.
    Moments,
    /// Write the radial profile table and scalar geometry.
    Profile,
    /// Write the per-degree mode variance table.
    Modes {
        /// Largest degree to tabulate; defaults to the configured lmax.
        #[arg(long)]
        lbig: Option<usize>,
    },
    /// Write the variance-recovery stack over lmax choices.
    Diagnostics,
    /// Draw field samples and write coefficient and profile files.
    Sample {
        /// Number of samples to draw.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Run the Monte Carlo validation suite and write its report.
    Validate {
        /// Draws per Monte Carlo check.
        #[arg(long, default_value_t = 20_000)]
        ndraws: usize,
    },
}

/// Everything resolved from config + overrides, ready for the commands.
struct Session {
    config: RunConfig,
    spectrum: PowerSpectrum,
    grid: RadialGrid,
    kernels: KernelSet,
    bias: BiasSpec,
    l_max: usize,
    seed: Option<u64>,
    outdir: PathBuf,
}

fn resolve_lmax(setting: &LmaxSetting, spectrum: &PowerSpectrum, r_max: f64) -> Result<usize> {
    match setting {
        LmaxSetting::Fixed(l) => Ok(*l),
        LmaxSetting::Named(s) if s == "auto" => {
            let k_eff = spectrum.effective_kmax(0.95)?;
            Ok(lmax_rule(k_eff, r_max).1)
        }
        LmaxSetting::Named(s) => Err(Error::Config(format!(
            "lmax must be an integer or \"auto\", got {s:?}"
        ))),
    }
}

fn build_session(cli: &Cli) -> Result<Session> {
    let mut config = RunConfig::load(&cli.config)?;
    let o = &cli.overrides;
    if let Some(n) = o.n {
        config.n = n;
    }
    if let Some(nu) = o.nu {
        config.nu = Some(nu);
        config.nubar = None;
    }
    if let Some(nubar) = o.nubar {
        config.nubar = Some(nubar);
        config.nu = None;
    }
    if let Some(r_max) = o.r_max {
        config.grid.r_max = r_max;
    }
    if let Some(points) = o.points {
        config.grid.points = points;
    }
    if let Some(lmax) = &o.lmax {
        config.lmax = match lmax.parse::<usize>() {
            Ok(v) => LmaxSetting::Fixed(v),
            Err(_) => LmaxSetting::Named(lmax.clone()),
        };
    }
    if let Some(seed) = o.seed {
        config.seed = Some(seed);
    }
    if let Some(outdir) = &o.outdir {
        config.outdir = outdir.clone();
    }
    if let Some(tol) = o.tolerance {
        config.tolerance = Some(tol);
    }

    let spectrum = config.spectrum.build()?;
    let grid = match config.grid.spacing.as_str() {
        "uniform" => RadialGrid::uniform(config.grid.r_max, config.grid.points),
        "log" => {
            let r_min = config.grid.r_min.ok_or_else(|| {
                Error::Config("grid.r_min is required for log spacing".into())
            })?;
            RadialGrid::log_spaced(r_min, config.grid.r_max, config.grid.points)
        }
        other => Err(Error::Config(format!(
            "grid.spacing must be \"uniform\" or \"log\", got {other:?}"
        ))),
    }?;
    let l_max = resolve_lmax(&config.lmax, &spectrum, grid.r_max())?;
    let tol = config.tolerance.unwrap_or(DEFAULT_TOL_REL);

    let kernels = match &o.kernel_cache {
        Some(path) => match KernelSet::load_cache(path, &spectrum, &grid, l_max, tol)? {
            Some(k) => k,
            None => {
                let k = build_kernel_set_with_tol(&spectrum, &grid, l_max, tol)?;
                k.save_cache(path)?;
                k
            }
        },
        None => build_kernel_set_with_tol(&spectrum, &grid, l_max, tol)?,
    };

    let moments = kernels.moments();
    let bias = match (config.nu, config.nubar) {
        (Some(_), Some(_)) => {
            return Err(Error::Config("set either nu or nubar, not both".into()))
        }
        (Some(nu), None) => BiasSpec::from_nu(config.n, nu, moments)?,
        (None, Some(nubar)) => BiasSpec::from_nubar(config.n, nubar, moments)?,
        (None, None) => return Err(Error::Config("one of nu or nubar is required".into())),
    };

    let outdir = config.outdir.clone();
    std::fs::create_dir_all(&outdir)?;
    Ok(Session { seed: config.seed, config, spectrum, grid, kernels, bias, l_max, outdir })
}

/// Formats a float with 17 significant digits, enough for exact f64 round trips.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn cmd_moments(session: &Session) -> Result<()> {
    let m = session.kernels.moments();
    println!("sigma0_sq = {}", fmt(m.sigma0_sq));
    println!("sigma1_sq = {}", fmt(m.sigma1_sq));
    println!("k_eff(0.95) = {}", fmt(session.spectrum.effective_kmax(0.95)?));
    Ok(())
}

fn cmd_profile(session: &Session) -> Result<()> {
    let report = chi2stats::profile_report(&session.bias, &session.kernels)?;
    let mut csv = String::from("r,mean,var,env_lo,env_hi,rhoC,rhoD,sigma_as2,As\n");
    for row in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{},{}",
            fmt(row.r),
            fmt(row.mean),
            fmt(row.variance),
            fmt(row.envelope_lo),
            fmt(row.envelope_hi),
            fmt(row.rho_c),
            fmt(row.rho_d),
            fmt(row.sigma_as_sq),
            fmt(row.asphericity),
        );
    }
    write_atomic(&session.outdir.join("profile.csv"), csv.as_bytes())?;
    let scalars = serde_json::json!({
        "r_half": report.envelope.r_half,
        "r_half_estimate": report.envelope.r_half_estimate,
        "peak_ratio": report.envelope.peak_ratio,
        "trough_ratio": report.envelope.trough_ratio,
        "dr_half_left": report.envelope.delta_left,
        "dr_half_right": report.envelope.delta_right,
        "r_sph": report.r_sph,
        "beta": report.beta,
    });
    write_atomic(
        &session.outdir.join("profile_scalars.json"),
        serde_json::to_string_pretty(&scalars)?.as_bytes(),
    )?;
    Ok(())
}

fn cmd_modes(session: &Session, lbig: Option<usize>) -> Result<()> {
    let big_l = lbig.unwrap_or(session.l_max);
    if big_l > session.kernels.l_max() {
        return Err(Error::Config(format!(
            "--lbig {big_l} exceeds the tabulated degree {}",
            session.kernels.l_max()
        )));
    }
    let mut csv = String::from("r,l,var_l0,cumulative_fraction\n");
    for &r in session.grid.radii() {
        let total = chi2stats::biased_variance(&session.bias, &session.kernels, r)?;
        let mut partial = 0.0;
        for l in 0..=big_l {
            let v = chi2stats::mode_cov(&session.bias, &session.kernels, l, r, r)?;
            partial += (2 * l + 1) as f64 * v / (4.0 * PI);
            let frac = if total > 0.0 { partial / total } else { 1.0 };
            let _ = writeln!(csv, "{},{l},{},{}", fmt(r), fmt(v), fmt(frac));
        }
    }
    write_atomic(&session.outdir.join("modes.csv"), csv.as_bytes())?;
    Ok(())
}

fn cmd_diagnostics(session: &Session) -> Result<()> {
    let mut csv = String::from("r,lmax,sigma_recovery\n");
    let mut stacks = Vec::with_capacity(session.l_max + 1);
    for l in 0..=session.l_max {
        stacks.push(sigma_recovery(&session.kernels, l));
    }
    for (i, &r) in session.grid.radii().iter().enumerate() {
        for (l, stack) in stacks.iter().enumerate() {
            let _ = writeln!(csv, "{},{l},{}", fmt(r), fmt(stack[i]));
        }
    }
    write_atomic(&session.outdir.join("sigma_recovery.csv"), csv.as_bytes())?;
    Ok(())
}

/// Directions along which sampled profiles are exported.
fn export_directions() -> Vec<(f64, f64)> {
    vec![
        (0.0, 0.0),
        (PI / 2.0, 0.0),
        (PI / 2.0, PI / 2.0),
        (PI / 2.0, PI),
        (PI / 2.0, 3.0 * PI / 2.0),
        (PI, 0.0),
    ]
}

fn cmd_sample(session: &Session, count: usize) -> Result<()> {
    let seed = session
        .seed
        .ok_or_else(|| Error::Config("sample requires a seed (--seed or config)".into()))?;
    let laws = build_mode_laws(&session.bias, &session.kernels, session.l_max)?;
    let plan = truncation_plan(&session.kernels, session.config.n, session.l_max);
    for idx in 0..count {
        let sample_seed = seed.wrapping_add(idx as u64);
        let sample = draw_sample(&laws, &plan, sample_seed);
        write_atomic(
            &session.outdir.join(format!("sample_{sample_seed}.json")),
            serde_json::to_string(&sample)?.as_bytes(),
        )?;

        let phi00 = assemble_phi00(&sample);
        let phi00_c = assemble_phi00_corrected(&sample);
        let mut csv = String::from("r,Phi00,Phi00_corrected\n");
        for ((&r, &a), &b) in sample.radii.iter().zip(&phi00).zip(&phi00_c) {
            let _ = writeln!(csv, "{},{},{}", fmt(r), fmt(a), fmt(b));
        }
        write_atomic(
            &session.outdir.join(format!("phi00_{sample_seed}.csv")),
            csv.as_bytes(),
        )?;

        let mut csv = String::from("r,theta,phi,Phi,Phi_corrected\n");
        for (theta, az) in export_directions() {
            let dir = UnitVector::from_angles(theta, az);
            let values = assemble_phi(&sample, &dir)?;
            let corrected = assemble_phi_corrected(&sample, &dir)?;
            for ((&r, &a), &b) in sample.radii.iter().zip(&values).zip(&corrected) {
                let _ = writeln!(
                    csv,
                    "{},{},{},{},{}",
                    fmt(r),
                    fmt(theta),
                    fmt(az),
                    fmt(a),
                    fmt(b)
                );
            }
        }
        write_atomic(
            &session.outdir.join(format!("phi_{sample_seed}.csv")),
            csv.as_bytes(),
        )?;
    }
    Ok(())
}

fn cmd_validate(session: &Session, ndraws: usize) -> Result<bool> {
    if ndraws < 1000 {
        eprintln!(
            "warning: {ndraws} draws is underpowered; standard-error gates are unreliable"
        );
    }
    let seed = session.seed.unwrap_or(0);
    let bias = &session.bias;
    let kernels = &session.kernels;
    let mut checks: Vec<ValidationCheck> = Vec::new();

    // Point-statistics oracle at a small set of radii.
    let r_max = session.grid.r_max();
    let positions = [
        [0.0, 0.0, 0.1 * r_max],
        [0.0, 0.0, 0.3 * r_max],
        [0.25 * r_max, 0.0, 0.25 * r_max],
        [0.0, 0.0, 0.7 * r_max],
    ];
    let stats = mc_biased_point_stats(bias, kernels, &positions, ndraws, seed)?;
    for (i, pos) in positions.iter().enumerate() {
        let r = (pos[0] * pos[0] + pos[1] * pos[1] + pos[2] * pos[2]).sqrt();
        let mean = chi2stats::biased_mean(bias, kernels, r)?;
        checks.push(ValidationCheck::gated(
            format!("point_mean[{i}]"),
            stats.mean[i],
            mean,
            stats.mean_se[i],
            4.0,
        ));
        let var = chi2stats::biased_variance(bias, kernels, r)?;
        checks.push(ValidationCheck::gated(
            format!("point_var[{i}]"),
            stats.cov[i][i],
            var,
            stats.cov_se[i][i],
            4.0,
        ));
    }

    // Wick moment identity on random non-central Gaussians.
    let mut rng = task_rng(seed, "validate-wick", 0);
    for trial in 0..3 {
        let means = [(); 4].map(|_| rng.gen_range(-1.0..1.0));
        let a = Matrix4::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let cov = a * a.transpose();
        let expected = wick4(&means, &cov);
        let (est, se) = mc_wick4(&means, &cov, ndraws.max(100_000), seed.wrapping_add(trial))?;
        checks.push(ValidationCheck::gated(
            format!("wick4[{trial}]"),
            est,
            expected,
            se,
            4.0,
        ));
    }

    // Mode-diagonality gate on a reduced sampler run.
    let l_sample = session.l_max.min(4);
    let laws = build_mode_laws(bias, kernels, l_sample)?;
    let plan = truncation_plan(kernels, session.config.n, l_sample);
    let mid = session.grid.len() / 2;
    let diag = mc_mode_diagonality(&laws, &plan, mid, l_sample.min(2), (ndraws / 10).max(500), seed)?;
    let frac = diag.offdiag_fraction_within(4.0);
    checks.push(ValidationCheck {
        name: "mode_offdiagonal_fraction_within_4se".into(),
        statistic: frac,
        expected: 1.0,
        z: 0.0,
        pass: frac >= 0.99,
    });

    let all_pass = checks.iter().all(|c| c.pass);
    write_atomic(
        &session.outdir.join("validation.json"),
        serde_json::to_string_pretty(&checks)?.as_bytes(),
    )?;
    for check in &checks {
        println!(
            "{}: {} (statistic {}, expected {}, z {:.2})",
            check.name,
            if check.pass { "pass" } else { "FAIL" },
            fmt(check.statistic),
            fmt(check.expected),
            check.z
        );
    }
    Ok(all_pass)
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Io(_)
        | Error::InvalidGrid(_)
        | Error::InvalidSpectrum(_)
        | Error::NonIntegrableSpectrum(_)
        | Error::ZeroAmplitude => EXIT_CONFIG,
        _ => EXIT_NUMERICAL,
    }
}

/// Parses arguments, runs the requested command, and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    if let Ok(threads) = std::env::var("CHI2PEAKS_THREADS") {
        if let Ok(num) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(num).build_global();
        }
    }
    let session = match build_session(&cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    let outcome = match &cli.command {
        Command::Moments => cmd_moments(&session).map(|()| true),
        Command::Profile => cmd_profile(&session).map(|()| true),
        Command::Modes { lbig } => cmd_modes(&session, *lbig).map(|()| true),
        Command::Diagnostics => cmd_diagnostics(&session).map(|()| true),
        Command::Sample { count } => cmd_sample(&session, *count).map(|()| true),
        Command::Validate { ndraws } => cmd_validate(&session, *ndraws),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_VALIDATION,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
