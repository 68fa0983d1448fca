//! Command-line workflows for privacy-preserving crowd-sensed state
//! estimation. Thin adapters only: all numerics live in the `privsense`
//! library. Flag precedence is flags > config file > built-in defaults.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use privsense::covariance::{
    performance, steady_state_cov, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use privsense::harness::{
    self, AdversaryPolicy, ExperimentConfig, GridScale, HarnessError, SweepAxis, SweepSpec,
};
use privsense::leakage::{calibrate_noise, leakage_bound, CalibrationMode};
use privsense::model::{validate, IssueKind, Severity, ValidationReport};
use privsense::simulate::simulate_run;
use privsense::{Error, Matrix};

/// Default directory for output files when `--output` is not given.
const OUTPUT_DIR_ENV: &str = "PRIVSENSE_OUTPUT_DIR";

#[derive(Parser)]
#[command(
    name = "privsense",
    version,
    about = "Privacy-preserving state estimation with randomly sampled crowd sensors",
    after_help = "Outputs default into $PRIVSENSE_OUTPUT_DIR (falling back to the current \
                  directory). Flags override config-file values, which override defaults."
)]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Use the built-in two-room reference configuration.
    #[arg(long, global = true)]
    paper: bool,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Horizon override (steps per run).
    #[arg(long, global = true)]
    horizon: Option<usize>,

    /// Ensemble size override (runs).
    #[arg(long, global = true)]
    runs: Option<usize>,

    /// Override the (0,0) entry of the masking-noise covariance.
    #[arg(long, global = true, value_name = "VAR")]
    sigma_xi: Option<f64>,

    /// Output file (or directory for reproduce-paper).
    #[arg(long, global = true, value_name = "PATH")]
    output: Option<PathBuf>,

    /// Overwrite existing output files.
    #[arg(long, global = true)]
    force: bool,

    /// Worker-thread cap for ensembles (results do not depend on it).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and report every issue found.
    Validate,
    /// Simulate one run and write it as CSV.
    Simulate,
    /// Steady-state error covariance and performance.
    Covariance(CovarianceArgs),
    /// Identity-leakage upper bound at the configured masking noise.
    Leakage,
    /// Scale the masking noise to meet a leakage target.
    Calibrate(CalibrateArgs),
    /// Evaluate a sensor-identity detector over an ensemble.
    Adversary(AdversaryArgs),
    /// Sweep a grid axis and write one CSV row per point.
    Sweep(SweepArgs),
    /// Run the four reference sweeps into fig1.csv .. fig4.csv.
    ReproducePaper,
}

#[derive(Args)]
struct CovarianceArgs {
    /// Frobenius stopping tolerance for the fixed-point iteration.
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITER)]
    max_iter: usize,
}

#[derive(Args)]
struct CalibrateArgs {
    /// Leakage target in nats per step.
    #[arg(long)]
    epsilon: f64,
    /// "envelope" (frozen steady state) or "self-consistent".
    #[arg(long, default_value = "self-consistent")]
    mode: CalibrationMode,
}

#[derive(Args)]
struct AdversaryArgs {
    /// Fixed detector threshold.
    #[arg(long, conflicts_with_all = ["best_tau", "map"])]
    tau: Option<f64>,
    /// Search the default threshold grid for the best τ.
    #[arg(long)]
    best_tau: bool,
    /// Use the maximum-posterior detector instead of the threshold rule.
    #[arg(long, conflicts_with = "best_tau")]
    map: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_enum)]
    axis: Option<Axis>,
    #[arg(long)]
    min: Option<f64>,
    #[arg(long)]
    max: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long, value_enum)]
    scale: Option<Scale>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Tau,
    SigmaXi,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Log,
    Linear,
}

enum CliError {
    Usage(String),
    Validation(String),
    Core(Error),
    Harness(HarnessError),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        CliError::Harness(e)
    }
}

fn core_exit_code(e: &Error) -> u8 {
    match e {
        Error::NotSchur { .. }
        | Error::NoConvergence { .. }
        | Error::SingularArgument { .. }
        | Error::FactorizationFailed { .. } => 2,
        Error::RunFailed { source, .. } => core_exit_code(source),
        _ => 1,
    }
}

fn exit_code(e: &CliError) -> u8 {
    match e {
        CliError::Usage(_) => 2,
        CliError::Validation(_) => 1,
        CliError::Core(e) => core_exit_code(e),
        CliError::Harness(he) => match he {
            HarnessError::Io { .. }
            | HarnessError::Parse { .. }
            | HarnessError::AlreadyExists(_) => 3,
            HarnessError::InvalidConfig(_) => 1,
            HarnessError::Sweep { source, .. } => core_exit_code(source),
            HarnessError::Core(e) => core_exit_code(e),
        },
    }
}

fn message(e: &CliError) -> String {
    match e {
        CliError::Usage(m) | CliError::Validation(m) => m.clone(),
        CliError::Core(e) => e.to_string(),
        CliError::Harness(e) => e.to_string(),
    }
}

/// 12 significant digits, for all floating text output.
fn sig12(x: f64) -> String {
    format!("{x:.11e}")
}

fn matrix_json(m: &Matrix<f64>) -> Value {
    Value::from(
        (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )
}

fn print_matrix(name: &str, m: &Matrix<f64>) {
    println!("{name} =");
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| sig12(m[(i, j)])).collect();
        println!("  [{}]", row.join(", "));
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = if let Some(path) = &cli.config {
        harness::load_config(path)?
    } else if cli.paper {
        harness::paper_example()
    } else {
        return Err(CliError::Usage(
            "pass --config <path> or --paper to select a configuration".into(),
        ));
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(horizon) = cli.horizon {
        cfg.horizon = horizon;
    }
    if let Some(runs) = cli.runs {
        cfg.runs = runs;
    }
    if let Some(sigma) = cli.sigma_xi {
        let mut xi = cfg.observer.xi().clone();
        xi[(0, 0)] = sigma;
        cfg.observer = cfg.observer.with_xi(xi)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Resolves an output path: `--output` verbatim, else `default_name`
/// inside `$PRIVSENSE_OUTPUT_DIR` or the current directory.
fn output_path(cli: &Cli, default_name: &str) -> PathBuf {
    match &cli.output {
        Some(path) => path.clone(),
        None => output_dir().join(default_name),
    }
}

fn output_dir() -> PathBuf {
    std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn report_json(report: &ValidationReport<f64>) -> Value {
    json!({
        "ok": report.ok,
        "issues": report.issues.iter().map(|i| json!({
            "severity": i.severity.to_string(),
            "kind": i.kind.to_string(),
            "message": i.message,
        })).collect::<Vec<_>>(),
        "spectral_radii": report.spectral_radii,
    })
}

fn cmd_validate(cli: &Cli) -> Result<(), CliError> {
    let cfg = match &cli.config {
        Some(path) => harness::load_config(path)?,
        None if cli.paper => harness::paper_example(),
        None => {
            return Err(CliError::Usage(
                "pass --config <path> or --paper to select a configuration".into(),
            ))
        }
    };
    let report = validate(&cfg.model, &cfg.pool, &cfg.observer);
    match cli.format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&report_json(&report)).expect("serializable")
        ),
        Format::Text => {
            println!("ok = {}", report.ok);
            for (i, rho) in report.spectral_radii.iter().enumerate() {
                println!("spectral radius of A - L*C[{i}] = {}", sig12(*rho));
            }
            for issue in &report.issues {
                println!("{}: {}", issue.severity, issue.message);
            }
        }
    }
    if report.ok {
        Ok(())
    } else {
        Err(CliError::Validation("configuration failed validation".into()))
    }
}

/// Validation gate shared by the numeric subcommands: issues go to
/// stderr, non-stability errors abort with exit code 1. Stability errors
/// fall through so the solvers report them as numerical failures.
fn gate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let report = validate(&cfg.model, &cfg.pool, &cfg.observer);
    for issue in &report.issues {
        eprintln!("{}: {}", issue.severity, issue.message);
    }
    let fatal = report
        .issues
        .iter()
        .any(|i| i.severity == Severity::Error && i.kind != IssueKind::Stability);
    if fatal {
        Err(CliError::Validation("configuration failed validation".into()))
    } else {
        Ok(())
    }
}

fn cmd_covariance(cli: &Cli, args: &CovarianceArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    gate(&cfg)?;
    let (e_star, trace) =
        steady_state_cov(&cfg.model, &cfg.pool, &cfg.observer, args.tol, args.max_iter)?;
    let perf = performance(&e_star, cfg.observer.omega())?;
    match cli.format {
        Format::Json => {
            let out = json!({
                "e_star": matrix_json(&e_star),
                "perf_trace": perf,
                "iterations": trace.iterations,
                "residual": trace.residual,
                "converged": trace.converged,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            print_matrix("E*", &e_star);
            println!("trace(Omega E*) = {}", sig12(perf));
            println!("iterations = {}", trace.iterations);
            println!("residual = {}", sig12(trace.residual));
        }
    }
    Ok(())
}

fn cmd_leakage(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    gate(&cfg)?;
    let (e_star, _) = steady_state_cov(
        &cfg.model,
        &cfg.pool,
        &cfg.observer,
        DEFAULT_TOL,
        DEFAULT_MAX_ITER,
    )?;
    let result = leakage_bound(&cfg.model, &cfg.pool, &cfg.observer, &e_star)?;
    match cli.format {
        Format::Json => {
            let out = json!({
                "bound_nats": result.bound_nats,
                "term_mix": result.term_mix,
                "term_avg": result.term_avg,
                "delta_c_energy": matrix_json(&result.delta_c_energy),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            println!("leakage bound = {} nats/step", sig12(result.bound_nats));
            println!("term_mix = {}", sig12(result.term_mix));
            println!("term_avg = {}", sig12(result.term_avg));
        }
    }
    Ok(())
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    gate(&cfg)?;
    let result = calibrate_noise(
        &cfg.model,
        &cfg.pool,
        &cfg.observer,
        args.epsilon,
        args.mode,
        None,
    )?;
    match cli.format {
        Format::Json => {
            let out = json!({
                "feasible": result.feasible,
                "lambda": result.lambda,
                "achieved_bound": result.achieved_bound,
                "floor_nats": result.floor_nats,
                "mode": result.mode.to_string(),
                "xi": matrix_json(&result.xi),
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            println!("feasible = {}", result.feasible);
            println!("lambda = {}", sig12(result.lambda));
            println!("achieved bound = {} nats/step", sig12(result.achieved_bound));
            println!("asymptotic floor = {} nats/step", sig12(result.floor_nats));
            print_matrix("Xi", &result.xi);
        }
    }
    Ok(())
}

fn cmd_simulate(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    gate(&cfg)?;
    let traj = simulate_run(
        &cfg.model,
        &cfg.pool,
        &cfg.observer,
        cfg.horizon,
        cfg.master_seed,
    )?;
    let path = output_path(cli, "trajectory.csv");
    harness::write_trajectory_csv(&path, &traj, cli.force)?;
    match cli.format {
        Format::Json => {
            let out = json!({
                "path": path,
                "horizon": cfg.horizon,
                "seed": cfg.master_seed,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => println!("wrote {}", path.display()),
    }
    Ok(())
}

fn cmd_adversary(cli: &Cli, args: &AdversaryArgs) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    gate(&cfg)?;
    let policy = if args.map {
        AdversaryPolicy::Map
    } else if args.best_tau {
        AdversaryPolicy::BestTau
    } else if let Some(tau) = args.tau {
        AdversaryPolicy::FixedTau(tau)
    } else {
        return Err(CliError::Usage(
            "pass --tau <value>, --best-tau, or --map".into(),
        ));
    };
    let (report, se) = harness::evaluate_adversary(&cfg, policy)?;
    match cli.format {
        Format::Json => {
            let out = json!({
                "tau": report.tau,
                "accuracy": report.accuracy,
                "accuracy_se": se,
                "per_sensor_accuracy": report.per_sensor_accuracy,
                "sample_count": report.sample_count,
            });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            match report.tau {
                Some(tau) => println!("tau = {}", sig12(tau)),
                None => println!("detector = maximum-posterior"),
            }
            println!("accuracy = {}", sig12(report.accuracy));
            println!("accuracy se = {}", sig12(se));
            for (i, acc) in report.per_sensor_accuracy.iter().enumerate() {
                println!("accuracy given sensor {i} = {}", sig12(*acc));
            }
            println!("samples = {}", report.sample_count);
        }
    }
    Ok(())
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> Result<(), CliError> {
    let mut cfg = load_config(cli)?;
    if let Some(axis) = args.axis {
        cfg.sweep.axis = match axis {
            Axis::Tau => SweepAxis::Tau,
            Axis::SigmaXi => SweepAxis::SigmaXi,
        };
        // switching axes without explicit bounds picks that axis's default grid
        if args.min.is_none() && args.max.is_none() {
            let default = match axis {
                Axis::Tau => SweepSpec::default_tau(),
                Axis::SigmaXi => SweepSpec::default_sigma_xi(),
            };
            cfg.sweep.min = default.min;
            cfg.sweep.max = default.max;
            if args.points.is_none() {
                cfg.sweep.points = default.points;
            }
        }
    }
    if let Some(min) = args.min {
        cfg.sweep.min = min;
    }
    if let Some(max) = args.max {
        cfg.sweep.max = max;
    }
    if let Some(points) = args.points {
        cfg.sweep.points = points;
    }
    if let Some(scale) = args.scale {
        cfg.sweep.scale = match scale {
            Scale::Log => GridScale::Log,
            Scale::Linear => GridScale::Linear,
        };
    }
    let path = match cfg.output.clone() {
        Some(p) if cli.output.is_none() => p,
        _ => output_path(cli, "sweep.csv"),
    };
    harness::run_sweep_to_csv(&cfg, &path, cli.force)?;
    match cli.format {
        Format::Json => {
            let out = json!({ "path": path, "points": cfg.sweep.points });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => println!("wrote {}", path.display()),
    }
    Ok(())
}

fn cmd_reproduce_paper(cli: &Cli) -> Result<(), CliError> {
    let dir = match &cli.output {
        Some(path) => path.clone(),
        None => output_dir(),
    };
    std::fs::create_dir_all(&dir).map_err(|source| {
        CliError::Harness(HarnessError::Io {
            path: dir.clone(),
            source,
        })
    })?;
    let seed = cli.seed.unwrap_or(0);
    let paths = harness::reproduce_paper(&dir, seed, cli.force)?;
    match cli.format {
        Format::Json => {
            let out = json!({ "paths": paths, "seed": seed });
            println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
        }
        Format::Text => {
            for path in &paths {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Validate => cmd_validate(cli),
        Command::Simulate => cmd_simulate(cli),
        Command::Covariance(args) => cmd_covariance(cli, args),
        Command::Leakage => cmd_leakage(cli),
        Command::Calibrate(args) => cmd_calibrate(cli, args),
        Command::Adversary(args) => cmd_adversary(cli, args),
        Command::Sweep(args) => cmd_sweep(cli, args),
        Command::ReproducePaper => cmd_reproduce_paper(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.threads {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| dispatch(&cli)),
            Err(e) => Err(CliError::Usage(format!("could not build thread pool: {e}"))),
        },
        None => dispatch(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error: {}", message(&e));
            if cli.format == Format::Json {
                let out = json!({ "error": { "message": message(&e), "exit_code": code } });
                println!("{}", serde_json::to_string_pretty(&out).expect("serializable"));
            }
            ExitCode::from(code)
        }
    }
}
