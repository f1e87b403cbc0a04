//! Command-line front end for `regime-lq`.
//!
//! Exit codes: 0 success (including an inconclusive simulation), 1 a domain
//! or assumption failure, 2 an input error.

pub mod config;
pub mod output;

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use regime_lq::backward::DEFAULT_STEPS;
use regime_lq::chain::RegimeGenerator;
use regime_lq::market::{mv_to_lq, validate_lq_assumptions, AssumptionCase, MvAlmData};
use regime_lq::montecarlo::{
    perturbation_optimality_check, simulate_wealth_paths, verify_frontier, CheckStatus, FeedbackLaw, FnLaw, SimConfig, VerificationReport,
};
use regime_lq::mv::{FrontierReport, MvPipeline};
use regime_lq::Error;
use serde::Serialize;

use crate::output::{write_csv, write_json, Document, RunManifest, SimSettings};

pub const FRONTIER_HEADER: [&str; 4] = ["z", "variance", "stddev", "lambdaStar"];
pub const SOLUTIONS_HEADER: [&str; 6] = ["t", "regime", "p", "h1", "h2", "psi"];

#[derive(Debug, Parser)]
#[command(name = "regime-lq", version, about = "Regime-switching LQ control and mean-variance ALM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the assumptions and feasibility of a problem.
    Validate(ValidateArgs),
    /// Compute the efficient frontier.
    Frontier(FrontierArgs),
    /// Simulate the optimal portfolio and compare with the frontier.
    Simulate(SimArgs),
    /// `simulate` plus a perturbation test of optimality.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// RK4 steps for the feasibility solve.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
}

#[derive(Debug, Args)]
pub struct FrontierArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// RK4 steps for the backward systems.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub steps: usize,
    /// Comma-separated targets; defaults to an automatic grid around the vertex.
    #[arg(long)]
    pub z_grid: Option<String>,
    /// Also write solutions.csv with P, h1, h2 and psi on the grid.
    #[arg(long)]
    pub export_solutions: bool,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    /// Euler steps per path.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Target terminal mean; defaults to the config's `z`.
    #[arg(long)]
    pub z: Option<f64>,
    #[arg(long, default_value_t = false, action = ArgAction::Set)]
    pub antithetic: bool,
    /// RK4 steps for the backward systems.
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    pub grid_steps: usize,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub sim: SimArgs,
    /// Size of the perturbations in the optimality test.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
}

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad or unreadable input: exit 2.
    Input(String),
    /// The problem or the numerics failed: exit 1.
    Domain(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Domain(_) => 1,
            Failure::Input(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) => write!(f, "input error: {m}"),
            Failure::Domain(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let message = match &e {
            Error::Ellipticity { .. } => format!("{e} (the volatility ellipticity assumption sigma sigma' >= delta I fails)"),
            Error::Infeasible { .. } => {
                format!("{e} (the terminal mean cannot be steered: the integrated excess-return metric must be positive)")
            }
            _ => e.to_string(),
        };
        match e {
            Error::TimeRange { .. }
            | Error::RegimeIndex { .. }
            | Error::Structural(_)
            | Error::NegativeRate { .. }
            | Error::Conservation { .. }
            | Error::Probability(_)
            | Error::GridMismatch(_) => Failure::Input(message),
            _ => Failure::Domain(message),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Input(format!("{}: {e}", path.display()))
}

struct Loaded {
    path: PathBuf,
    bytes: Vec<u8>,
    data: MvAlmData,
    gen: RegimeGenerator,
}

fn load(path: &Path) -> Result<Loaded, Failure> {
    let bytes = fs::read(path).map_err(|e| io_failure(path, e))?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    let (_, data, gen) = config::load(text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    Ok(Loaded { path: path.to_path_buf(), bytes, data, gen })
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_file<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    write_json(path, value).map_err(|e| io_failure(path, e))
}

fn document<'a, T: Serialize>(manifest: &'a RunManifest, body: T) -> Document<'a, T> {
    Document { generated_at: output::timestamp(), manifest, body }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct EllipticityBody {
    min_eigenvalue: f64,
    at_time: f64,
    at_regime: usize,
    delta: f64,
    holds: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct LqBody {
    case: &'static str,
    delta: f64,
    min_state_weight: f64,
    min_control_weight_eigenvalue: f64,
    min_diffusion_gram_eigenvalue: f64,
    min_terminal_weight: f64,
    holds: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct FeasibilityBody {
    metric: Option<f64>,
    unsteered_mean: Option<f64>,
    feasible: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct ValidationBody {
    valid: bool,
    ellipticity: EllipticityBody,
    lq_assumption: LqBody,
    feasibility: FeasibilityBody,
    messages: Vec<String>,
}

fn case_name(case: AssumptionCase) -> &'static str {
    match case {
        AssumptionCase::Standard => "standard",
        AssumptionCase::Singular => "singular",
        AssumptionCase::Both => "both",
        AssumptionCase::Neither => "neither",
    }
}

pub fn cmd_validate(args: &ValidateArgs) -> Result<String, Failure> {
    let input = load(&args.config)?;
    let data = &input.data;
    let mut messages = Vec::new();

    let (t, regime, min_eig) = data.ellipticity_minimum();
    let elliptic = data.validate().is_ok();
    if !elliptic {
        messages.push(format!(
            "volatility ellipticity assumption fails: smallest eigenvalue of sigma sigma' is {min_eig:e} \
             at t = {t}, regime {regime}, below delta = {}",
            data.delta
        ));
    }

    let lq = validate_lq_assumptions(&mv_to_lq(data, 0.0)?)?;
    if lq.is_fatal() {
        messages.push(format!("LQ well-posedness fails in both the standard and the singular case (delta = {})", lq.delta));
    }

    let feasibility = if elliptic {
        let p = MvPipeline::solve(data, &input.gen, args.steps)?;
        if !p.feasibility.feasible {
            messages.push(format!(
                "infeasible: the integrated excess-return metric is {:e}; no portfolio reaches a prescribed terminal mean",
                p.feasibility.metric
            ));
        }
        FeasibilityBody {
            metric: Some(p.feasibility.metric),
            unsteered_mean: Some(p.feasibility.ex0t),
            feasible: p.feasibility.feasible,
        }
    } else {
        FeasibilityBody { metric: None, unsteered_mean: None, feasible: false }
    };

    let valid = messages.is_empty();
    let body = ValidationBody {
        valid,
        ellipticity: EllipticityBody { min_eigenvalue: min_eig, at_time: t, at_regime: regime, delta: data.delta, holds: elliptic },
        lq_assumption: LqBody {
            case: case_name(lq.case),
            delta: lq.delta,
            min_state_weight: lq.min_state_weight,
            min_control_weight_eigenvalue: lq.min_control_weight_eigenvalue,
            min_diffusion_gram_eigenvalue: lq.min_diffusion_gram_eigenvalue,
            min_terminal_weight: lq.min_terminal_weight,
            holds: !lq.is_fatal(),
        },
        feasibility,
        messages: messages.clone(),
    };
    let manifest = RunManifest::new(&input.path, &input.bytes, "validate", None, args.steps);
    let text = output::to_json(&document(&manifest, body));
    if valid {
        Ok(text)
    } else {
        print!("{text}");
        Err(Failure::Domain(messages.join("; ")))
    }
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct FrontierBody {
    pub p0: f64,
    pub h10: f64,
    pub h20: f64,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub x0: f64,
    pub i0: usize,
    pub z: f64,
    pub lambda_star: f64,
    pub variance: f64,
    pub slope: f64,
    pub vertex_z: f64,
    pub base_var: f64,
    pub domain_value: f64,
    pub feasibility_metric: f64,
    pub unsteered_mean: f64,
}

impl FrontierBody {
    fn new(f: &FrontierReport, p: &MvPipeline, i0: usize) -> Self {
        Self {
            p0: f.p0,
            h10: f.h10,
            h20: f.h20,
            m1: f.m1,
            m2: f.m2,
            m3: f.m3,
            x0: f.x,
            i0,
            z: f.z,
            lambda_star: f.lambda_star,
            variance: f.variance(f.z),
            slope: f.slope,
            vertex_z: f.vertex_z,
            base_var: f.base_var,
            domain_value: f.domain_value(),
            feasibility_metric: f.feasibility_metric,
            unsteered_mean: p.feasibility.ex0t,
        }
    }
}

/// Parses `"1.0, 1.1,1.2"`.
pub fn parse_z_grid(s: &str) -> Result<Vec<f64>, Failure> {
    let zs = s
        .split(',')
        .map(|p| {
            let p = p.trim();
            p.parse::<f64>()
                .ok()
                .filter(|z| z.is_finite())
                .ok_or_else(|| Failure::Input(format!("--z-grid: `{p}` is not a finite number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(zs)
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct FrontierDocBody {
    frontier: FrontierBody,
    points: usize,
    files: Vec<&'static str>,
}

pub fn cmd_frontier(args: &FrontierArgs) -> Result<String, Failure> {
    let input = load(&args.config)?;
    let zs = args.z_grid.as_deref().map(parse_z_grid).transpose()?;
    let (data, gen) = (&input.data, &input.gen);
    let p = MvPipeline::solve(data, gen, args.steps)?;
    let f = p.frontier(data, gen)?;
    let zs = zs.unwrap_or_else(|| f.auto_grid());
    let curve = f.curve(&zs);

    prepare_out(&args.out)?;
    let csv = args.out.join("frontier.csv");
    write_csv(&csv, &FRONTIER_HEADER, curve.iter().map(|c| vec![c.z, c.variance, c.stddev, c.lambda_star]))
        .map_err(|e| io_failure(&csv, e))?;
    let mut files = vec!["frontier.csv", "report.json", "manifest.json"];
    if args.export_solutions {
        let path = args.out.join("solutions.csv");
        let nodes = p.grid().nodes();
        let rows = (0..nodes.len()).flat_map(|k| {
            let p = &p;
            (0..data.regimes).map(move |i| {
                vec![nodes[k], i as f64, p.ric.p.value(k, i), p.h1.value(k, i), p.h2.value(k, i), p.psi.value(k, i)]
            })
        });
        write_csv(&path, &SOLUTIONS_HEADER, rows).map_err(|e| io_failure(&path, e))?;
        files.push("solutions.csv");
    }
    let manifest = RunManifest::new(&input.path, &input.bytes, "frontier", Some(&args.out), args.steps);
    let body = FrontierDocBody { frontier: FrontierBody::new(&f, &p, data.i0), points: curve.len(), files };
    write_file(&args.out.join("report.json"), &document(&manifest, body))?;
    write_file(&args.out.join("manifest.json"), &document(&manifest, ()))?;
    Ok(format!(
        "lambda* = {:.10}, Var at z = {}: {:.10e}; {} frontier points written to {}\n",
        f.lambda_star,
        f.z,
        f.variance(f.z),
        curve.len(),
        args.out.display()
    ))
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct VerificationBody {
    #[serde(rename = "meanXT")]
    mean_xt: f64,
    z: f64,
    se_mean: f64,
    #[serde(rename = "varXT")]
    var_xt: f64,
    analytic_var: f64,
    se_var: f64,
    allowance: f64,
    mean_margin: f64,
    var_margin: f64,
    paths_used: usize,
    lambda_star: f64,
    #[serde(rename = "costJ")]
    cost_j: f64,
    #[serde(rename = "seCostJ")]
    se_cost_j: f64,
    status: &'static str,
    pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    optimality: Option<OptimalityBody>,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct PerturbationBody {
    direction: &'static str,
    increase: f64,
    paired_se: f64,
    nonnegative: bool,
    strictly_positive: bool,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "camelCase")]
struct OptimalityBody {
    eps: f64,
    status: &'static str,
    pass: bool,
    any_strictly_positive: bool,
    perturbations: Vec<PerturbationBody>,
}

const DIRECTIONS: [&str; 3] = ["unit", "against-sign", "sine"];

fn run_simulation(args: &SimArgs, eps: Option<f64>, command: &str) -> Result<String, Failure> {
    let input = load(&args.config)?;
    let (data, gen) = (&input.data, &input.gen);
    let z = args.z.unwrap_or(data.z);
    if !z.is_finite() {
        return Err(Failure::Input(format!("--z must be finite, got {z}")));
    }
    let cfg = SimConfig::new(args.paths, args.steps, args.seed, args.antithetic);
    cfg.check()?;
    let p = MvPipeline::solve(data, gen, args.grid_steps)?;
    let f = p.frontier(data, gen)?;
    let law = p.feedback(data, &f, z)?;

    let report: VerificationReport = verify_frontier(data, gen, &f, &law, &cfg)?;
    let mut cost = None;
    let mut pass = report.status != CheckStatus::Fail;

    let optimality = match eps {
        None => None,
        Some(eps) => {
            let m = data.assets;
            let lawr = &law;
            let unit = FnLaw::new(m, |_t, _x, _i, out: &mut [f64]| out.fill(1.0));
            let against = FnLaw::new(m, move |t, x, i, out: &mut [f64]| {
                lawr.evaluate(t, x, i, out);
                out.iter_mut().for_each(|u| *u = -u.signum());
            });
            let wave = FnLaw::new(m, |t: f64, _x, _i, out: &mut [f64]| out.fill((std::f64::consts::TAU * t).sin()));
            let directions: [&dyn FeedbackLaw; 3] = [&unit, &against, &wave];
            let r = perturbation_optimality_check(data, gen, &law, &cfg, &directions, eps)?;
            cost = Some(r.optimal_cost);
            let status = if cfg.num_paths < regime_lq::montecarlo::MIN_CONCLUSIVE_PATHS {
                CheckStatus::Inconclusive
            } else if r.pass() {
                CheckStatus::Pass
            } else {
                CheckStatus::Fail
            };
            pass &= status != CheckStatus::Fail;
            Some(OptimalityBody {
                eps,
                status: status.as_str(),
                pass: status == CheckStatus::Pass,
                any_strictly_positive: r.any_strictly_positive(),
                perturbations: r
                    .entries
                    .iter()
                    .zip(DIRECTIONS)
                    .map(|(e, d)| PerturbationBody {
                        direction: d,
                        increase: e.increase,
                        paired_se: e.paired_se,
                        nonnegative: e.nonnegative,
                        strictly_positive: e.strictly_positive,
                    })
                    .collect(),
            })
        }
    };

    // Same seed and config as the bands run, so this reproduces its paths.
    let cost = match cost {
        Some(c) => c,
        None => simulate_wealth_paths(data, &law, &cfg, gen)?.cost(law.lambda_star, z),
    };
    let body = VerificationBody {
        mean_xt: report.mean_xt,
        z,
        se_mean: report.se_mean,
        var_xt: report.var_xt,
        analytic_var: report.analytic_var,
        se_var: report.se_var,
        allowance: report.allowance,
        mean_margin: report.mean_margin,
        var_margin: report.var_margin,
        paths_used: report.paths_used,
        lambda_star: law.lambda_star,
        cost_j: cost.value,
        se_cost_j: cost.se,
        status: report.status.as_str(),
        pass: report.pass(),
        optimality,
    };
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new(&input.path, &input.bytes, command, Some(&args.out), args.grid_steps);
    manifest.sim_config =
        Some(SimSettings { paths: args.paths, steps: args.steps, seed: args.seed, antithetic: args.antithetic, z });
    write_file(&args.out.join("verification.json"), &document(&manifest, body))?;
    write_file(&args.out.join("manifest.json"), &document(&manifest, ()))?;

    let line = format!(
        "{}: mean {:.8} (z {z}, se {:.2e}), var {:.8e} (frontier {:.8e}, se {:.2e}), {} paths\n",
        report.status.as_str(),
        report.mean_xt,
        report.se_mean,
        report.var_xt,
        report.analytic_var,
        report.se_var,
        report.paths_used
    );
    if pass {
        Ok(line)
    } else {
        print!("{line}");
        Err(Failure::Domain(format!("verification failed; see {}", args.out.join("verification.json").display())))
    }
}

pub fn cmd_simulate(args: &SimArgs) -> Result<String, Failure> {
    run_simulation(args, None, "simulate")
}

pub fn cmd_verify(args: &VerifyArgs) -> Result<String, Failure> {
    if !(args.eps > 0.0 && args.eps.is_finite()) {
        return Err(Failure::Input(format!("--eps must be positive, got {}", args.eps)));
    }
    run_simulation(&args.sim, Some(args.eps), "verify")
}

pub fn execute(cli: &Cli) -> Result<String, Failure> {
    match &cli.command {
        Command::Validate(a) => cmd_validate(a),
        Command::Frontier(a) => cmd_frontier(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Verify(a) => cmd_verify(a),
    }
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(&cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("{f}");
            ExitCode::from(f.exit_code())
        }
    }
}
