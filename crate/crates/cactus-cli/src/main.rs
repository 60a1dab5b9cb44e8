//! Command-line front end for the cactus noise toolkit.
//!
//! Four subcommands cover the full workflow: `synth` solves the minimax
//! synthesis and persists the mechanism, `compare-gaussian` sweeps noise
//! scales against the Gaussian baseline, `account` composes privacy over
//! many steps with the moments accountant, and `sample` draws reproducible
//! noise from a persisted mechanism.
//!
//! Every run that writes files also writes a `<stem>.config.json` echo of
//! the fully resolved parameters, so any output can be regenerated from its
//! neighbors alone. Relative output paths land in `CACTUS_OUTPUT_DIR` when
//! that variable is set.
//!
//! Exit codes: 0 success, 1 numerical failure (including a solve that did
//! not converge), 2 usage error (bad flags, malformed inputs), 3 infeasible
//! problem (budget below the minimum any density on the grid can meet).

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cactus_core::accountant::{
    compose_epsilon, gaussian_moments, gaussian_subsampled_moments, mechanism_moments,
    subsampled_moments, CompositionQuery, MomentsCurve,
};
use cactus_core::cost::{CostFamily, CostModel};
use cactus_core::density::CactusShape;
use cactus_core::divergence::gaussian_kl;
use cactus_core::mechanism::{
    fmt_float, moments_curve_to_csv, privacy_report_to_json, solve_report_to_json, Mechanism,
};
use cactus_core::solver::{synthesize, SolverOptions, SynthesisProblem};
use cactus_core::Error;

const EXIT_NUMERICAL: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_INFEASIBLE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "cactus",
    version,
    about = "Synthesize, analyze, and sample near-optimal additive noise mechanisms",
    after_help = "Relative output paths are resolved against CACTUS_OUTPUT_DIR when set.\n\
                  Exit codes: 0 success, 1 numerical failure, 2 usage error, 3 infeasible problem."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a minimax-optimal mechanism under a cost budget
    Synth(SynthArgs),
    /// Sweep noise scales and tabulate cactus vs Gaussian worst-shift KL
    CompareGaussian(CompareGaussianArgs),
    /// Compose privacy over repeated use with the moments accountant
    Account(AccountArgs),
    /// Draw reproducible samples from a persisted mechanism
    Sample(SampleArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum CostFamilyArg {
    Quadratic,
    Power,
}

#[derive(Args)]
struct SynthArgs {
    /// Cost family
    #[arg(long = "cost", value_enum)]
    cost: CostFamilyArg,
    /// Cost budget: the synthesized noise satisfies E[c(Z)] <= C
    #[arg(long = "C")]
    budget: f64,
    /// Sensitivity (length scale the budget is stated at)
    #[arg(long = "s", default_value_t = 1.0)]
    sensitivity: f64,
    /// Grid cells per unit length
    #[arg(long)]
    n: u32,
    /// Core cells per side before the geometric tail starts
    #[arg(long = "N")]
    core: u32,
    /// Geometric tail ratio, in (0, 1)
    #[arg(long)]
    r: f64,
    /// Cost exponent (power family only)
    #[arg(long)]
    alpha: Option<f64>,
    /// Cost leading coefficient (power family only)
    #[arg(long)]
    beta: Option<f64>,
    /// Iteration budget across all smoothing stages
    #[arg(long, default_value_t = SolverOptions::default().max_iterations)]
    max_iterations: usize,
    /// Stall tolerance on the smoothed objective
    #[arg(long, default_value_t = SolverOptions::default().tolerance)]
    tolerance: f64,
    /// Mechanism JSON output path
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct CompareGaussianArgs {
    /// Comma-separated noise scales; each solve uses budget C = sigma^2
    #[arg(long, value_delimiter = ',', required = true)]
    sigmas: Vec<f64>,
    /// Grid cells per unit length
    #[arg(long)]
    n: u32,
    /// Core cells per side
    #[arg(long = "N")]
    core: u32,
    /// Geometric tail ratio, in (0, 1)
    #[arg(long)]
    r: f64,
    /// Iteration budget per solve
    #[arg(long, default_value_t = SolverOptions::default().max_iterations)]
    max_iterations: usize,
    /// Stall tolerance per solve
    #[arg(long, default_value_t = SolverOptions::default().tolerance)]
    tolerance: f64,
    /// Output CSV path
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct AccountArgs {
    /// Mechanism JSON produced by `synth`
    #[arg(long)]
    mechanism: PathBuf,
    /// Failure probability delta
    #[arg(long)]
    delta: f64,
    /// Composition counts: comma list "1,10,100" or inclusive range "1..2400"
    #[arg(long)]
    t_values: String,
    /// Poisson subsampling rate (1 = no subsampling)
    #[arg(long, default_value_t = 1.0)]
    q: f64,
    /// Largest moment order the accountant may use
    #[arg(long, default_value_t = 32)]
    lambda_max: u32,
    /// Also tabulate a Gaussian baseline with this noise scale
    #[arg(long)]
    gaussian_sigma: Option<f64>,
    /// Output CSV path (column per mechanism, row per T)
    #[arg(short, long)]
    output: PathBuf,
    /// Optional moments-curve CSV output path
    #[arg(long)]
    curve_out: Option<PathBuf>,
    /// Privacy report JSON path (defaults to <output stem>.report.json)
    #[arg(long)]
    report_out: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    /// Mechanism JSON produced by `synth`
    #[arg(long)]
    mechanism: PathBuf,
    /// Number of samples to draw
    #[arg(long)]
    count: usize,
    /// RNG seed; identical seeds reproduce identical output
    #[arg(long)]
    seed: u64,
    /// Output path (stdout when omitted)
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::CompareGaussian(args) => cmd_compare_gaussian(args),
        Command::Account(args) => cmd_account(args),
        Command::Sample(args) => cmd_sample(args),
    };
    match outcome {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::InfeasibleBudget(_) => EXIT_INFEASIBLE,
        Error::InvalidParameter(_) | Error::Schema { .. } | Error::Json(_) | Error::Io(_) => {
            EXIT_USAGE
        }
        _ => EXIT_NUMERICAL,
    }
}

/// Resolves a user-supplied output path: relative paths go under
/// CACTUS_OUTPUT_DIR when set, and parent directories are created.
fn resolve_output(path: &Path) -> Result<PathBuf, Error> {
    let resolved = if path.is_absolute() {
        path.to_path_buf()
    } else {
        match std::env::var_os("CACTUS_OUTPUT_DIR") {
            Some(dir) => PathBuf::from(dir).join(path),
            None => path.to_path_buf(),
        }
    };
    if let Some(parent) = resolved.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| io_ctx(parent, "creating", e))?;
        }
    }
    Ok(resolved)
}

fn io_ctx(path: &Path, verb: &str, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{verb} {}: {e}", path.display()),
    ))
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| io_ctx(path, "writing", e))
}

fn write_config_echo(output: &Path, config: serde_json::Value) -> Result<(), Error> {
    let path = output.with_extension("config.json");
    let mut text = serde_json::to_string_pretty(&config).expect("config serializes");
    text.push('\n');
    write_text(&path, &text)
}

fn cost_echo(cost: &CostModel) -> serde_json::Value {
    serde_json::json!({
        "family": match cost.family() {
            CostFamily::Quadratic => "quadratic",
            CostFamily::Power => "power",
        },
        "alpha": cost.alpha(),
        "beta": cost.beta(),
        "C": cost.budget(),
        "s": cost.sensitivity(),
    })
}

fn build_cost(args: &SynthArgs) -> Result<CostModel, Error> {
    match args.cost {
        CostFamilyArg::Quadratic => {
            if args.alpha.is_some() || args.beta.is_some() {
                return Err(Error::InvalidParameter(
                    "--alpha/--beta apply to the power family only; \
                     the quadratic family fixes alpha = 2, beta = 1"
                        .into(),
                ));
            }
            CostModel::quadratic(args.budget, args.sensitivity)
        }
        CostFamilyArg::Power => {
            let (Some(alpha), Some(beta)) = (args.alpha, args.beta) else {
                return Err(Error::InvalidParameter(
                    "the power family requires both --alpha and --beta".into(),
                ));
            };
            CostModel::power(alpha, beta, args.budget, args.sensitivity)
        }
    }
}

fn cmd_synth(args: SynthArgs) -> Result<ExitCode, Error> {
    let cost = build_cost(&args)?;
    let shape = CactusShape::new(args.n, args.core, args.r)?;
    let problem = SynthesisProblem::new(shape, cost.clone())?;
    let opts = SolverOptions {
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        ..SolverOptions::default()
    };
    let result = synthesize(&problem, &opts)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }

    let output = resolve_output(&args.output)?;
    let provenance = serde_json::json!({
        "tool": "cactus",
        "version": env!("CARGO_PKG_VERSION"),
        "command": "synth",
        "solver": {
            "iterations": result.iterations,
            "converged": result.converged,
            "achieved_kl": result.achieved_kl,
            "achieved_cost": result.achieved_cost,
            "kkt_residual": result.kkt_residual,
            "floor_hits": result.floor_hits,
        },
    });
    let mechanism = Mechanism::new(result.density.clone(), cost.clone(), provenance)?;
    mechanism.write_to(&output)?;
    write_text(
        &output.with_extension("solve_report.json"),
        &solve_report_to_json(&result),
    )?;
    write_config_echo(
        &output,
        serde_json::json!({
            "command": "synth",
            "cost": cost_echo(&cost),
            "n": args.n,
            "N": args.core,
            "r": args.r,
            "max_iterations": args.max_iterations,
            "tolerance": args.tolerance,
            "output": output.display().to_string(),
        }),
    )?;
    eprintln!(
        "synthesized {}: sup-KL {:.6}, expected cost {:.6}, {} iterations, converged: {}",
        output.display(),
        result.achieved_kl,
        result.achieved_cost,
        result.iterations,
        result.converged
    );
    if result.converged {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: solver did not converge; outputs were written for inspection");
        Ok(ExitCode::from(EXIT_NUMERICAL))
    }
}

fn cmd_compare_gaussian(args: CompareGaussianArgs) -> Result<ExitCode, Error> {
    for &sigma in &args.sigmas {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma values must be positive and finite, got {sigma}"
            )));
        }
    }
    let shape = CactusShape::new(args.n, args.core, args.r)?;
    let opts = SolverOptions {
        max_iterations: args.max_iterations,
        tolerance: args.tolerance,
        ..SolverOptions::default()
    };
    let solves: Vec<(f64, Result<f64, Error>)> = args
        .sigmas
        .par_iter()
        .map(|&sigma| {
            let solve = (|| {
                let cost = CostModel::quadratic(sigma * sigma, 1.0)?;
                let problem = SynthesisProblem::new(shape, cost)?;
                let result = synthesize(&problem, &opts)?;
                if !result.converged {
                    return Err(Error::InvalidParameter(
                        "solve did not converge within the iteration budget".into(),
                    ));
                }
                Ok(result.achieved_kl)
            })();
            (sigma, solve)
        })
        .collect();

    let mut csv = String::from("sigma,kl_cactus,kl_gaussian\n");
    let mut succeeded = 0usize;
    for (sigma, solve) in &solves {
        let kl_gauss = gaussian_kl(1.0, *sigma)?;
        match solve {
            Ok(kl) => {
                succeeded += 1;
                csv.push_str(&format!(
                    "{},{},{}\n",
                    fmt_float(*sigma),
                    fmt_float(*kl),
                    fmt_float(kl_gauss)
                ));
            }
            Err(e) => {
                eprintln!("warning: sigma = {sigma}: solve failed: {e}");
                csv.push_str(&format!(
                    "{},,{}\n",
                    fmt_float(*sigma),
                    fmt_float(kl_gauss)
                ));
            }
        }
    }
    let output = resolve_output(&args.output)?;
    write_text(&output, &csv)?;
    write_config_echo(
        &output,
        serde_json::json!({
            "command": "compare-gaussian",
            "sigmas": args.sigmas,
            "n": args.n,
            "N": args.core,
            "r": args.r,
            "max_iterations": args.max_iterations,
            "tolerance": args.tolerance,
            "output": output.display().to_string(),
        }),
    )?;
    eprintln!(
        "compared {} scale(s), {} solved, wrote {}",
        args.sigmas.len(),
        succeeded,
        output.display()
    );
    if succeeded == 0 {
        eprintln!("error: every solve failed");
        return Ok(ExitCode::from(EXIT_NUMERICAL));
    }
    Ok(ExitCode::SUCCESS)
}

/// Parses composition counts given as a comma list or an inclusive range.
fn parse_t_values(text: &str) -> Result<Vec<u64>, Error> {
    let bad = |detail: String| {
        Error::InvalidParameter(format!(
            "--t-values expects a comma list like \"1,10,100\" or a range like \"1..2400\"; {detail}"
        ))
    };
    let parse_one = |piece: &str| -> Result<u64, Error> {
        let t = piece
            .trim()
            .parse::<u64>()
            .map_err(|e| bad(format!("`{piece}` is not a positive integer ({e})")))?;
        if t == 0 {
            return Err(bad("composition counts start at 1".into()));
        }
        Ok(t)
    };
    if let Some((lo, hi)) = text.split_once("..") {
        let lo = parse_one(lo)?;
        let hi = parse_one(hi)?;
        if hi < lo {
            return Err(bad(format!("range {lo}..{hi} is empty")));
        }
        return Ok((lo..=hi).collect());
    }
    let values: Result<Vec<u64>, Error> = text.split(',').map(parse_one).collect();
    let values = values?;
    if values.is_empty() {
        return Err(bad("no values given".into()));
    }
    Ok(values)
}

fn cmd_account(args: AccountArgs) -> Result<ExitCode, Error> {
    let t_values = parse_t_values(&args.t_values)?;
    let mechanism = Mechanism::read_from(&args.mechanism)?;

    let curve = if args.q < 1.0 {
        subsampled_moments(&mechanism.density, args.q, args.lambda_max)?
    } else {
        mechanism_moments(&mechanism.density, args.lambda_max)?
    };
    let lambda_eff = curve.lambdas.len() as u32;
    if lambda_eff < args.lambda_max {
        eprintln!(
            "warning: moments unbounded past order {lambda_eff}; \
             accounting with lambda_max = {lambda_eff} instead of {}",
            args.lambda_max
        );
    }
    let gaussian_curve: Option<MomentsCurve> = match args.gaussian_sigma {
        Some(sigma) if args.q < 1.0 => {
            Some(gaussian_subsampled_moments(sigma, args.q, lambda_eff)?)
        }
        Some(sigma) => Some(gaussian_moments(sigma, lambda_eff)?),
        None => None,
    };

    let mut csv = String::from(if gaussian_curve.is_some() {
        "T,epsilon,epsilon_gaussian\n"
    } else {
        "T,epsilon\n"
    });
    let mut last_report = None;
    for &t in &t_values {
        let query = CompositionQuery {
            delta: args.delta,
            compositions: t,
            q: args.q,
            lambda_max: lambda_eff,
        };
        let report = compose_epsilon(&curve, &query)?;
        match &gaussian_curve {
            Some(gc) => {
                let g = compose_epsilon(gc, &query)?;
                csv.push_str(&format!(
                    "{t},{},{}\n",
                    fmt_float(report.epsilon),
                    fmt_float(g.epsilon)
                ));
            }
            None => csv.push_str(&format!("{t},{}\n", fmt_float(report.epsilon))),
        }
        last_report = Some(report);
    }

    let output = resolve_output(&args.output)?;
    write_text(&output, &csv)?;
    let report = last_report.expect("t_values is never empty");
    let report_path = match &args.report_out {
        Some(p) => resolve_output(p)?,
        None => output.with_extension("report.json"),
    };
    write_text(&report_path, &privacy_report_to_json(&report))?;
    if let Some(curve_path) = &args.curve_out {
        let curve_path = resolve_output(curve_path)?;
        write_text(&curve_path, &moments_curve_to_csv(&curve))?;
    }
    write_config_echo(
        &output,
        serde_json::json!({
            "command": "account",
            "mechanism": args.mechanism.display().to_string(),
            "delta": args.delta,
            "t_values": t_values,
            "q": args.q,
            "lambda_max": lambda_eff,
            "gaussian_sigma": args.gaussian_sigma,
            "output": output.display().to_string(),
            "report": report_path.display().to_string(),
            "curve": args.curve_out.as_ref().map(|p| p.display().to_string()),
        }),
    )?;
    eprintln!(
        "accounted {} composition count(s): epsilon({}) = {:.6} at lambda = {}, wrote {}",
        t_values.len(),
        report.query.compositions,
        report.epsilon,
        report.argmin_lambda,
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(args: SampleArgs) -> Result<ExitCode, Error> {
    let mechanism = Mechanism::read_from(&args.mechanism)?;
    let samples = mechanism.density.sample(args.count, args.seed);
    let mut text = String::with_capacity(26 * samples.len());
    for s in &samples {
        text.push_str(&fmt_float(*s));
        text.push('\n');
    }
    match &args.output {
        Some(path) => {
            let output = resolve_output(path)?;
            write_text(&output, &text)?;
            write_config_echo(
                &output,
                serde_json::json!({
                    "command": "sample",
                    "mechanism": args.mechanism.display().to_string(),
                    "count": args.count,
                    "seed": args.seed,
                    "output": output.display().to_string(),
                }),
            )?;
            eprintln!("wrote {} sample(s) to {}", samples.len(), output.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(text.as_bytes())
                .map_err(|e| io_ctx(Path::new("<stdout>"), "writing", e))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
