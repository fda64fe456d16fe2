//! Command-line pipeline: validate -> transform -> stability -> synthesize
//! -> simulate -> verify, plus the nonhomogeneous reduction and a built-in
//! demo.
//!
//! Every run writes a manifest to the output directory before any
//! computation, mirrors everything printed into `report.txt`, and persists
//! machine-parseable results next to it. Re-running with the same manifest
//! settings reproduces solver outputs and (seeded) Monte Carlo outputs
//! byte-identically.
//!
//! Exit codes: 0 success, 1 validation failure, 2 solver failure,
//! 3 verification failure.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WlqError};
use crate::mc::{self, ControlLaw, SimConfig};
use crate::model::{self, ProblemSpec, ValidationMode};
use crate::stability;
use crate::synthesis::{self, SynthesisResult};
use crate::transform;
use crate::weight::{mu_exact, BrownianGrid, WeightParams};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(
    name = "wlq",
    version,
    about = "Weighted linear-quadratic stochastic control toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Output directory (default: ./runs/<timestamp>)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed for all Monte Carlo streams
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Suppress stdout (files are still written)
    #[arg(long)]
    quiet: bool,
    /// Permissive validation: record hypothesis failures instead of stopping
    #[arg(long)]
    permissive: bool,
}

#[derive(Args, Debug, Clone)]
struct McArgs {
    /// Number of Monte Carlo paths
    #[arg(long)]
    paths: Option<usize>,
    /// Euler-Maruyama step
    #[arg(long, default_value_t = 1e-3)]
    dt: f64,
    /// Horizon length past t0 (default: from the Lyapunov decay certificate)
    #[arg(long)]
    tmax: Option<f64>,
    /// Antithetic variates
    #[arg(long)]
    antithetic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Check the problem file against the standing hypotheses
    Validate {
        problem: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the equivalent classical system matrices
    Transform {
        problem: PathBuf,
        /// Also invert the map and report the max round-trip deviation
        #[arg(long)]
        check_roundtrip: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Weighted L2-stability test (optionally of a closed loop)
    Stability {
        problem: PathBuf,
        /// Gain file (synthesis output); tests A+B*Theta, C+D*Theta
        #[arg(long)]
        theta: Option<PathBuf>,
        /// Cross-check the Lyapunov solution by Monte Carlo
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Solve the Riccati equation and the affine terms
    Synthesize {
        problem: PathBuf,
        /// Horizon for the eta/vbar output grid
        #[arg(long)]
        eta_tmax: Option<f64>,
        /// Number of grid intervals for the eta/vbar output
        #[arg(long, default_value_t = 200)]
        eta_points: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate the state dynamics and estimate the recursive cost
    Simulate {
        problem: PathBuf,
        /// Control: "zero", "closed-loop", or "file:<csv>" (columns s,u_1..u_m)
        #[arg(long, default_value = "zero")]
        control: String,
        /// Gain file to use for closed-loop control (default: synthesize now)
        #[arg(long)]
        gain_file: Option<PathBuf>,
        /// Number of paths stored into trajectories.csv
        #[arg(long, default_value_t = 8)]
        dump_paths: usize,
        /// Also export the first Brownian grid as grid.csv (columns t,W)
        #[arg(long)]
        grid_csv: bool,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run the stationarity, optimality, and equivalence checks
    Verify {
        problem: PathBuf,
        /// Gain file to verify (default: synthesize now)
        #[arg(long)]
        gain_file: Option<PathBuf>,
        /// Number of random control perturbations for the optimality probe
        #[arg(long, default_value_t = 20)]
        perturbations: usize,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Reduce a problem with deterministic forcing b, sigma
    Reduce {
        problem: PathBuf,
        /// Number of qhat/rhat paths stored to disk
        #[arg(long, default_value_t = 8)]
        store_paths: usize,
        #[command(flatten)]
        mc: McArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Run the built-in scalar instances end to end against their oracles
    Demo {
        #[command(flatten)]
        common: Common,
    },
}

// ---------------------------------------------------------------------------
// Run context: manifest + tee reporter
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    tool: String,
    version: String,
    subcommand: String,
    problem_file: String,
    seed: u64,
    out_dir: String,
    permissive: bool,
    options: BTreeMap<String, String>,
}

struct Run {
    out_dir: PathBuf,
    quiet: bool,
    report: fs::File,
}

impl Run {
    fn new(
        subcommand: &str,
        problem: &str,
        common: &Common,
        options: BTreeMap<String, String>,
    ) -> Result<Self> {
        let out_dir = common.out.clone().unwrap_or_else(|| {
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            PathBuf::from(format!("runs/{ts}_{subcommand}"))
        });
        fs::create_dir_all(&out_dir)?;
        let manifest = RunManifest {
            tool: "wlq".into(),
            version: VERSION.into(),
            subcommand: subcommand.into(),
            problem_file: problem.into(),
            seed: common.seed,
            out_dir: out_dir.display().to_string(),
            permissive: common.permissive,
            options,
        };
        let text = toml::to_string_pretty(&manifest)
            .map_err(|e| WlqError::ProblemFile(format!("manifest serialization: {e}")))?;
        fs::write(out_dir.join("manifest.toml"), text)?;
        let report = fs::File::create(out_dir.join("report.txt"))?;
        Ok(Run {
            out_dir,
            quiet: common.quiet,
            report,
        })
    }

    fn line(&mut self, text: &str) {
        if !self.quiet {
            println!("{text}");
        }
        let _ = writeln!(self.report, "{text}");
    }

    fn write_toml<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let text = toml::to_string_pretty(value)
            .map_err(|e| WlqError::ProblemFile(format!("{name} serialization: {e}")))?;
        fs::write(self.out_dir.join(name), text)?;
        Ok(())
    }
}

/// Run a subcommand body, mirroring any error into the run's report file so
/// the output directory always records what happened.
fn log_errors<F>(run: &mut Run, body: F) -> Result<i32>
where
    F: FnOnce(&mut Run) -> Result<i32>,
{
    match body(run) {
        Ok(code) => Ok(code),
        Err(err) => {
            let line = format!("error: {err}");
            let _ = writeln!(run.report, "{line}");
            Err(err)
        }
    }
}

fn exit_code_for(err: &WlqError) -> i32 {
    use WlqError::*;
    match err {
        DimensionMismatch { .. }
        | NotSymmetric { .. }
        | NotPositiveDefinite { .. }
        | NonIntegrableSignal { .. }
        | UnsupportedSignalKind(_)
        | NonpositiveE(_)
        | ValidationFailed { .. }
        | ProblemFile(_)
        | Io(_)
        | GridMismatch(_)
        | NotHomogeneous(_) => 1,
        OptimalityViolated { .. } => 3,
        _ => 2,
    }
}

/// Parse argv and execute; returns the process exit code.
pub fn run() -> i32 {
    if let Ok(threads) = std::env::var("RLQ_THREADS") {
        if let Ok(k) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code_for(&err)
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Validate { problem, common } => cmd_validate(&problem, &common),
        Command::Transform {
            problem,
            check_roundtrip,
            common,
        } => cmd_transform(&problem, check_roundtrip, &common),
        Command::Stability {
            problem,
            theta,
            oracle,
            mc,
            common,
        } => cmd_stability(&problem, theta.as_deref(), oracle, &mc, &common),
        Command::Synthesize {
            problem,
            eta_tmax,
            eta_points,
            common,
        } => cmd_synthesize(&problem, eta_tmax, eta_points, &common),
        Command::Simulate {
            problem,
            control,
            gain_file,
            dump_paths,
            grid_csv,
            mc,
            common,
        } => cmd_simulate(
            &problem,
            &control,
            gain_file.as_deref(),
            dump_paths,
            grid_csv,
            &mc,
            &common,
        ),
        Command::Verify {
            problem,
            gain_file,
            perturbations,
            mc,
            common,
        } => cmd_verify(&problem, gain_file.as_deref(), perturbations, &mc, &common),
        Command::Reduce {
            problem,
            store_paths,
            mc,
            common,
        } => cmd_reduce(&problem, store_paths, &mc, &common),
        Command::Demo { common } => cmd_demo(&common),
    }
}

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

fn load_spec(path: &Path) -> Result<ProblemSpec> {
    model::load_problem(path)
}

fn full_validation(spec: &ProblemSpec, permissive: bool) -> model::ValidationReport {
    let mode = if permissive {
        ValidationMode::Permissive
    } else {
        ValidationMode::Strict
    };
    let mut report = model::validate(spec, mode);
    stability::augment_validation(&mut report, spec, permissive);
    report
}

fn require_valid(run: &mut Run, spec: &ProblemSpec, permissive: bool) -> Result<bool> {
    let report = full_validation(spec, permissive);
    run.line("validation:");
    for l in report.to_string().lines() {
        run.line(l);
    }
    if !report.passed() {
        let fail = report.first_failure().expect("failure recorded");
        return Err(WlqError::ValidationFailed {
            hypothesis: fail.name.clone(),
            detail: fail.detail.clone(),
        });
    }
    Ok(true)
}

fn resolve_horizon(
    spec: &ProblemSpec,
    theta: Option<&DMatrix<f64>>,
    requested: Option<f64>,
) -> Result<f64> {
    if let Some(t) = requested {
        return Ok(t);
    }
    // Horizon rule: decay certificate gives tail < 1e-4 of the running cost.
    let (a_cl, c_cl) = match theta {
        Some(th) => (&spec.a + &spec.b_mat * th, &spec.c + &spec.d * th),
        None => (spec.a.clone(), spec.c.clone()),
    };
    let t = stability::default_horizon(&a_cl, &c_cl, spec.e, spec.f, 1e-4).map_err(|_| {
        WlqError::ValidationFailed {
            hypothesis: "(horizon)".into(),
            detail: "no decay certificate for this control; pass --tmax explicitly".into(),
        }
    })?;
    Ok(t.clamp(1.0, 200.0))
}

fn sim_config(mc_args: &McArgs, common: &Common, t_max: f64, default_paths: usize) -> SimConfig {
    SimConfig {
        t_max,
        dt: mc_args.dt,
        n_paths: mc_args.paths.unwrap_or(default_paths),
        seed: common.seed,
        antithetic: mc_args.antithetic,
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn fmt_matrix(m: &DMatrix<f64>) -> String {
    (0..m.nrows())
        .map(|i| {
            (0..m.ncols())
                .map(|j| format!("{:>12.6}", m[(i, j)]))
                .collect::<Vec<_>>()
                .join(" ")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Serialize, Deserialize)]
struct GainFile {
    n: usize,
    m: usize,
    /// Row-major stabilizing Riccati solution
    p: Vec<f64>,
    /// Row-major feedback gain
    theta: Vec<f64>,
    residual: f64,
    iterations: usize,
}

fn write_gain_file(run: &Run, spec: &ProblemSpec, sol: &SynthesisResult) -> Result<()> {
    run.write_toml(
        "synthesis.toml",
        &GainFile {
            n: spec.n,
            m: spec.m,
            p: row_major(&sol.p),
            theta: row_major(&sol.theta_bar),
            residual: sol.residual,
            iterations: sol.iterations,
        },
    )
}

fn read_gain_file(path: &Path, spec: &ProblemSpec) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let text = fs::read_to_string(path)?;
    let gf: GainFile =
        toml::from_str(&text).map_err(|e| WlqError::ProblemFile(format!("gain file: {e}")))?;
    if gf.n != spec.n || gf.m != spec.m {
        return Err(WlqError::DimensionMismatch {
            context: "gain file".into(),
            expected: format!("n={}, m={}", spec.n, spec.m),
            got: format!("n={}, m={}", gf.n, gf.m),
        });
    }
    if gf.p.len() != spec.n * spec.n || gf.theta.len() != spec.m * spec.n {
        return Err(WlqError::DimensionMismatch {
            context: "gain file arrays".into(),
            expected: format!(
                "{} P entries, {} theta entries",
                spec.n * spec.n,
                spec.m * spec.n
            ),
            got: format!("{}, {}", gf.p.len(), gf.theta.len()),
        });
    }
    Ok((
        DMatrix::from_row_slice(spec.n, spec.n, &gf.p),
        DMatrix::from_row_slice(spec.m, spec.n, &gf.theta),
    ))
}

/// Rebuild the synthesis data around a (possibly externally supplied) gain.
fn synthesis_for(
    spec: &ProblemSpec,
    gain_file: Option<&Path>,
    t_max_hint: Option<f64>,
) -> Result<(SynthesisResult, f64)> {
    let (p, theta) = match gain_file {
        Some(path) => read_gain_file(path, spec)?,
        None => {
            let sol = synthesis::solve_are(spec)?;
            (sol.p, sol.theta_bar)
        }
    };
    let t_max = resolve_horizon(spec, Some(&theta), t_max_hint)?;
    let grid: Vec<f64> = (0..=256)
        .map(|k| spec.t0 + t_max * k as f64 / 256.0)
        .collect();
    let eta = synthesis::solve_eta(spec, &theta, &grid)?;
    let vbar = synthesis::assemble_vbar(spec, &p, &eta)?;
    let residual = synthesis::are_residual(spec, &p).norm();
    Ok((
        SynthesisResult {
            p,
            theta_bar: theta,
            eta,
            vbar,
            iterations: 0,
            residual,
            step_norms: Vec::new(),
        },
        t_max,
    ))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ValidationOut {
    passed: bool,
    mode: String,
    checks: Vec<CheckOut>,
}

#[derive(Serialize)]
struct CheckOut {
    name: String,
    passed: bool,
    detail: String,
}

fn cmd_validate(problem: &Path, common: &Common) -> Result<i32> {
    let mut run = Run::new(
        "validate",
        &problem.display().to_string(),
        common,
        BTreeMap::new(),
    )?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        let report = full_validation(&spec, common.permissive);
        run.line(&format!(
            "problem: n = {}, m = {}, E = {}, F = {}",
            spec.n, spec.m, spec.e, spec.f
        ));
        for l in report.to_string().lines() {
            run.line(l);
        }
        let out = ValidationOut {
            passed: report.passed(),
            mode: format!("{:?}", report.mode),
            checks: report
                .checks
                .iter()
                .map(|c| CheckOut {
                    name: c.name.clone(),
                    passed: c.passed,
                    detail: c.detail.clone(),
                })
                .collect(),
        };
        run.write_toml("validation.toml", &out)?;
        if report.passed() {
            run.line("verdict: PASS");
            Ok(0)
        } else {
            let fail = report.first_failure().expect("failure recorded");
            run.line(&format!("verdict: FAIL [{}] {}", fail.name, fail.detail));
            // Surface the typed error for the first strict failure as well.
            if !common.permissive {
                if let Err(e) = model::validate_strict(&spec) {
                    run.line(&format!("error: {e}"));
                }
            }
            Ok(1)
        }
    })
}

#[derive(Serialize)]
struct TransformOut {
    at: Vec<f64>,
    bt: Vec<f64>,
    ct: Vec<f64>,
    dt: Vec<f64>,
    roundtrip_max_dev: Option<f64>,
}

fn cmd_transform(problem: &Path, check_roundtrip: bool, common: &Common) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("check_roundtrip".into(), check_roundtrip.to_string());
    let mut run = Run::new("transform", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        let ts = transform::to_classical(&spec);
        run.line("transformed system (classical equivalent):");
        run.line(&format!("At =\n{}", fmt_matrix(&ts.at)));
        run.line(&format!("Bt =\n{}", fmt_matrix(&ts.bt)));
        run.line(&format!("Ct =\n{}", fmt_matrix(&ts.ct)));
        run.line(&format!("Dt =\n{}", fmt_matrix(&ts.dt)));
        let mut roundtrip = None;
        if check_roundtrip {
            let (a, b, c, d) = transform::from_classical(&ts, spec.e, spec.f);
            let dev = (a - &spec.a)
                .amax()
                .max((b - &spec.b_mat).amax())
                .max((c - &spec.c).amax())
                .max((d - &spec.d).amax());
            run.line(&format!("round-trip max deviation: {dev:e}"));
            roundtrip = Some(dev);
        }
        run.write_toml(
            "transform.toml",
            &TransformOut {
                at: row_major(&ts.at),
                bt: row_major(&ts.bt),
                ct: row_major(&ts.ct),
                dt: row_major(&ts.dt),
                roundtrip_max_dev: roundtrip,
            },
        )?;
        Ok(0)
    })
}

#[derive(Serialize)]
struct StabilityOut {
    stable: bool,
    sufficient_holds: bool,
    residual: f64,
    min_eig_p: f64,
    p: Option<Vec<f64>>,
    reason: Option<String>,
    oracle_max_delta: Option<f64>,
    oracle_max_se: Option<f64>,
}

fn cmd_stability(
    problem: &Path,
    theta_file: Option<&Path>,
    oracle: bool,
    mc_args: &McArgs,
    common: &Common,
) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("oracle".into(), oracle.to_string());
    opts.insert("dt".into(), mc_args.dt.to_string());
    let mut run = Run::new("stability", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        let theta = match theta_file {
            Some(path) => Some(read_gain_file(path, &spec)?.1),
            None => None,
        };
        let verdict = match &theta {
            Some(th) => {
                run.line(&format!(
                    "testing closed loop with gain\n{}",
                    fmt_matrix(th)
                ));
                stability::is_stabilizer(th, &spec)
            }
            None => stability::is_weighted_stable(&spec.a, &spec.c, spec.e, spec.f),
        };
        run.line(&format!("weighted L2-stable: {}", verdict.stable));
        run.line(&format!(
            "sufficient inequality holds (advisory): {}",
            verdict.sufficient_holds
        ));
        if let Some(p) = &verdict.p {
            run.line(&format!("P =\n{}", fmt_matrix(p)));
            run.line(&format!(
                "residual = {:e}, min eig P = {:e}",
                verdict.certificate, verdict.min_eig_p
            ));
        }
        if let Some(reason) = &verdict.reason {
            run.line(&format!("reason: {reason}"));
        }

        let mut oracle_delta = None;
        let mut oracle_se = None;
        if oracle {
            let (a_cl, c_cl) = match &theta {
                Some(th) => (&spec.a + &spec.b_mat * th, &spec.c + &spec.d * th),
                None => (spec.a.clone(), spec.c.clone()),
            };
            let prob = stability::LyapunovProblem::new_psd(
                a_cl.clone(),
                c_cl.clone(),
                spec.e,
                spec.f,
                DMatrix::identity(spec.n, spec.n),
            )?;
            let t_max = match mc_args.tmax {
                Some(t) => t,
                None => stability::default_horizon(&a_cl, &c_cl, spec.e, spec.f, 1e-6)?,
            };
            let est = stability::lyapunov_mc_oracle(
                &prob,
                mc_args.paths.unwrap_or(10_000),
                t_max,
                mc_args.dt,
                common.seed,
            )?;
            if let Some(p) = &verdict.p {
                let delta = (&est.mean - p).amax();
                let max_se = est.se.amax();
                run.line(&format!(
                    "oracle: max |P_mc - P| = {delta:e} (max SE {max_se:e}, {} paths, T = {t_max:.2})",
                    est.n_paths
                ));
                oracle_delta = Some(delta);
                oracle_se = Some(max_se);
            }
        }

        run.write_toml(
            "stability.toml",
            &StabilityOut {
                stable: verdict.stable,
                sufficient_holds: verdict.sufficient_holds,
                residual: verdict.certificate,
                min_eig_p: verdict.min_eig_p,
                p: verdict.p.as_ref().map(row_major),
                reason: verdict.reason.clone(),
                oracle_max_delta: oracle_delta,
                oracle_max_se: oracle_se,
            },
        )?;
        Ok(if verdict.stable { 0 } else { 2 })
    })
}

fn cmd_synthesize(
    problem: &Path,
    eta_tmax: Option<f64>,
    eta_points: usize,
    common: &Common,
) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("eta_points".into(), eta_points.to_string());
    let mut run = Run::new("synthesize", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        require_valid(run, &spec, common.permissive)?;
        let sol = synthesis::solve_are(&spec)?;
        run.line(&format!(
            "ARE solved in {} iterations, residual {:e}",
            sol.iterations, sol.residual
        ));
        run.line(&format!("P =\n{}", fmt_matrix(&sol.p)));
        run.line(&format!("Theta =\n{}", fmt_matrix(&sol.theta_bar)));

        let t_max = resolve_horizon(&spec, Some(&sol.theta_bar), eta_tmax)?;
        let grid: Vec<f64> = (0..=eta_points)
            .map(|k| spec.t0 + t_max * k as f64 / eta_points as f64)
            .collect();
        let eta = synthesis::solve_eta(&spec, &sol.theta_bar, &grid)?;
        let vbar = synthesis::assemble_vbar(&spec, &sol.p, &eta)?;

        let full = SynthesisResult {
            p: sol.p.clone(),
            theta_bar: sol.theta_bar.clone(),
            eta: eta.clone(),
            vbar: vbar.clone(),
            iterations: sol.iterations,
            residual: sol.residual,
            step_norms: sol.step_norms.clone(),
        };
        write_gain_file(run, &spec, &full)?;

        let mut csv = String::from("s");
        for i in 1..=spec.n {
            csv.push_str(&format!(",eta_{i}"));
        }
        for i in 1..=spec.m {
            csv.push_str(&format!(",vbar_{i}"));
        }
        csv.push('\n');
        for &s in &grid {
            csv.push_str(&format!("{s}"));
            let ev = eta.eval(s);
            for i in 0..spec.n {
                csv.push_str(&format!(",{}", ev[i]));
            }
            let vv = vbar.eval(s);
            for i in 0..spec.m {
                csv.push_str(&format!(",{}", vv[i]));
            }
            csv.push('\n');
        }
        fs::write(run.out_dir.join("eta_vbar.csv"), csv)?;
        run.line(&format!(
            "eta/vbar sampled on [{}, {}] with {} nodes -> eta_vbar.csv",
            spec.t0,
            spec.t0 + t_max,
            grid.len()
        ));
        Ok(0)
    })
}

fn parse_control_file(path: &Path, m: usize) -> Result<Vec<(f64, DVector<f64>)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.starts_with('s')) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != m + 1 {
            return Err(WlqError::ProblemFile(format!(
                "control file line {}: expected {} columns, got {}",
                ln + 1,
                m + 1,
                cols.len()
            )));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| WlqError::ProblemFile(format!("control file line {}: {e}", ln + 1)))
        };
        let s = parse(cols[0])?;
        let mut u = DVector::zeros(m);
        for i in 0..m {
            u[i] = parse(cols[i + 1])?;
        }
        rows.push((s, u));
    }
    if rows.len() < 2 {
        return Err(WlqError::ProblemFile(
            "control file needs at least two samples".into(),
        ));
    }
    Ok(rows)
}

fn interp_control(rows: &[(f64, DVector<f64>)], s: f64) -> DVector<f64> {
    if s <= rows[0].0 {
        return rows[0].1.clone();
    }
    if s >= rows[rows.len() - 1].0 {
        return rows[rows.len() - 1].1.clone();
    }
    let idx = rows.partition_point(|(t, _)| *t <= s);
    let (s0, v0) = &rows[idx - 1];
    let (s1, v1) = &rows[idx];
    let w = (s - s0) / (s1 - s0);
    v0 * (1.0 - w) + v1 * w
}

#[derive(Serialize)]
struct SimulateOut {
    cost_mean: f64,
    cost_se: f64,
    tail_bound: f64,
    stationarity_rms: Option<f64>,
    weighted_state_norm: f64,
    n_paths: usize,
    n_steps: usize,
    t_max: f64,
    dt: f64,
    max_abs_state: f64,
}

fn cmd_simulate(
    problem: &Path,
    control: &str,
    gain_file: Option<&Path>,
    dump_paths: usize,
    grid_csv: bool,
    mc_args: &McArgs,
    common: &Common,
) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("control".into(), control.to_string());
    opts.insert("dt".into(), mc_args.dt.to_string());
    opts.insert("antithetic".into(), mc_args.antithetic.to_string());
    let mut run = Run::new("simulate", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        require_valid(run, &spec, common.permissive)?;

        // Resolve the control law and, for closed loop, the synthesis data.
        let mut syn: Option<SynthesisResult> = None;
        let mut file_rows: Option<Vec<(f64, DVector<f64>)>> = None;
        let t_max;
        match control {
            "zero" => {
                t_max = resolve_horizon(&spec, None, mc_args.tmax)?;
            }
            "closed-loop" => {
                let (s, t) = synthesis_for(&spec, gain_file, mc_args.tmax)?;
                t_max = t;
                syn = Some(s);
            }
            other => {
                let path = other.strip_prefix("file:").ok_or_else(|| {
                    WlqError::ProblemFile(format!(
                        "unknown control '{other}' (use zero, closed-loop, or file:<csv>)"
                    ))
                })?;
                file_rows = Some(parse_control_file(Path::new(path), spec.m)?);
                t_max = resolve_horizon(&spec, None, mc_args.tmax)?;
            }
        }
        let cfg = sim_config(mc_args, common, t_max, 10_000);

        let offset_fn;
        let open_fn;
        let (law, decay): (ControlLaw<'_>, Option<f64>) = match (&syn, &file_rows) {
            (Some(s), _) => {
                let verdict = stability::is_stabilizer(&s.theta_bar, &spec);
                let decay = verdict.decay_rate();
                offset_fn = {
                    let vbar = s.vbar.clone();
                    move |t: f64| vbar.eval(t)
                };
                (
                    ControlLaw::Feedback {
                        theta: &s.theta_bar,
                        offset: Some(&offset_fn),
                    },
                    decay,
                )
            }
            (None, Some(rows)) => {
                open_fn = {
                    let rows = rows.clone();
                    move |t: f64| interp_control(&rows, t)
                };
                (ControlLaw::OpenLoop(&open_fn), None)
            }
            (None, None) => {
                let verdict = stability::is_weighted_stable(&spec.a, &spec.c, spec.e, spec.f);
                (ControlLaw::Zero, verdict.decay_rate())
            }
        };

        let report = mc::estimate_cost(&spec, &law, &cfg, decay)?;
        run.line(&format!(
            "cost_mean = {:.8e}  cost_se = {:.3e}  tail_bound = {:.3e}",
            report.cost_mean, report.cost_se, report.tail_bound
        ));
        run.line(&format!(
            "weighted_state_norm = {:.6e}  paths = {}  steps = {}",
            report.weighted_state_norm, report.paths_summary.n_paths, report.paths_summary.n_steps
        ));

        // Store the leading paths; identical streams make them a prefix of the run.
        let dump = dump_paths.min(cfg.n_paths).max(1);
        let dump_cfg = SimConfig {
            n_paths: if cfg.antithetic {
                dump.next_multiple_of(2)
            } else {
                dump
            },
            ..cfg
        };
        let ens = mc::simulate_state(&spec, &law, &dump_cfg)?;
        let params = WeightParams::new(spec.e, spec.f);
        let mut csv = String::from("path_id,s");
        for i in 1..=spec.n {
            csv.push_str(&format!(",X_{i}"));
        }
        for i in 1..=spec.m {
            csv.push_str(&format!(",u_{i}"));
        }
        csv.push_str(",mu_ratio,running_cost\n");
        for (pid, path) in ens.paths.iter().enumerate().take(dump) {
            for (k, &s) in ens.grid.iter().enumerate() {
                csv.push_str(&format!("{pid},{s}"));
                for i in 0..spec.n {
                    csv.push_str(&format!(",{}", path.x[k][i]));
                }
                for i in 0..spec.m {
                    csv.push_str(&format!(",{}", path.u[k][i]));
                }
                let mu = mu_exact(s, spec.t0, path.w[k], &params);
                let f = spec.running_cost(s, &path.x[k], &path.u[k]);
                csv.push_str(&format!(",{mu},{f}\n"));
            }
        }
        fs::write(run.out_dir.join("trajectories.csv"), csv)?;
        run.line(&format!("trajectories.csv: first {dump} paths"));

        if grid_csv {
            let grid = cfg.grid(spec.t0);
            let bg = BrownianGrid::sample(&grid, cfg.seed, 0, false)?;
            let mut csv = String::from("t,W\n");
            for (t, w) in bg.t_grid.iter().zip(&bg.w) {
                csv.push_str(&format!("{t},{w}\n"));
            }
            fs::write(run.out_dir.join("grid.csv"), csv)?;
        }

        run.write_toml(
            "report.toml",
            &SimulateOut {
                cost_mean: report.cost_mean,
                cost_se: report.cost_se,
                tail_bound: report.tail_bound,
                stationarity_rms: report.stationarity_rms,
                weighted_state_norm: report.weighted_state_norm,
                n_paths: report.paths_summary.n_paths,
                n_steps: report.paths_summary.n_steps,
                t_max,
                dt: cfg.dt,
                max_abs_state: report.paths_summary.max_abs_state,
            },
        )?;
        Ok(0)
    })
}

#[derive(Serialize)]
struct VerifyCheck {
    name: String,
    value: f64,
    threshold: f64,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyOut {
    passed: bool,
    checks: Vec<VerifyCheck>,
    cost_mean: f64,
    cost_se: f64,
}

fn cmd_verify(
    problem: &Path,
    gain_file: Option<&Path>,
    perturbations: usize,
    mc_args: &McArgs,
    common: &Common,
) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("perturbations".into(), perturbations.to_string());
    opts.insert("dt".into(), mc_args.dt.to_string());
    let mut run = Run::new("verify", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        require_valid(run, &spec, common.permissive)?;
        if spec.has_forcing() {
            return Err(WlqError::NotHomogeneous(
                "verify requires b = sigma = 0; run `wlq reduce` first".into(),
            ));
        }
        let (syn, t_max) = synthesis_for(&spec, gain_file, mc_args.tmax)?;
        let cfg = sim_config(mc_args, common, t_max, 2_000);
        let mut checks = Vec::new();

        // (1) stationarity residual
        let stat = mc::stationarity_residual(&spec, &syn, &cfg)?;
        let rms = stat.stationarity_rms.unwrap_or(f64::INFINITY);
        let scale = stat.stationarity_scale.unwrap_or(1.0);
        let threshold = 10.0 * cfg.dt * scale;
        checks.push(VerifyCheck {
            name: "stationarity_rms <= 10 dt scale".into(),
            value: rms,
            threshold,
            passed: rms <= threshold,
        });
        run.line(&format!(
            "stationarity rms = {rms:.6e} (scale {scale:.3e}, threshold {threshold:.3e})"
        ));

        // (2) pathwise cost identity under the transformation
        let vb = {
            let vbar = syn.vbar.clone();
            move |s: f64| vbar.eval(s)
        };
        let law = ControlLaw::Feedback {
            theta: &syn.theta_bar,
            offset: Some(&vb),
        };
        let ident_cfg = SimConfig {
            n_paths: cfg.n_paths.min(100),
            ..cfg
        };
        let ident = mc::cost_identity_max_rel_err(&spec, &law, &ident_cfg)?;
        checks.push(VerifyCheck {
            name: "cost identity max rel err < 1e-10".into(),
            value: ident,
            threshold: 1e-10,
            passed: ident < 1e-10,
        });
        run.line(&format!("cost identity max relative error = {ident:.3e}"));

        // (3) transform equivalence of the Lyapunov solves at the tested gain
        let a_cl = &spec.a + &spec.b_mat * &syn.theta_bar;
        let c_cl = &spec.c + &spec.d * &syn.theta_bar;
        let ts = transform::to_classical(&spec);
        let at_cl = &ts.at + &ts.bt * &syn.theta_bar;
        let ct_cl = &ts.ct + &ts.dt * &syn.theta_bar;
        let lam = DMatrix::<f64>::identity(spec.n, spec.n);
        let equiv = match (
            stability::solve_lyapunov(&stability::LyapunovProblem::new_psd(
                a_cl,
                c_cl,
                spec.e,
                spec.f,
                lam.clone(),
            )?),
            stability::solve_classical_lyapunov(&at_cl, &ct_cl, &lam),
        ) {
            (Ok((p1, _)), Ok((p2, _))) => (&p1 - &p2).norm() / p1.norm().max(1e-300),
            _ => f64::INFINITY,
        };
        checks.push(VerifyCheck {
            name: "transform equivalence rel err <= 1e-12".into(),
            value: equiv,
            threshold: 1e-12,
            passed: equiv <= 1e-12,
        });
        run.line(&format!(
            "transform equivalence relative error = {equiv:.3e}"
        ));

        // (4) optimality probe
        let probe_cfg = SimConfig {
            n_paths: cfg.n_paths.min(2_000),
            ..cfg
        };
        match mc::optimality_probe(&spec, &syn, &probe_cfg, perturbations, common.seed) {
            Ok(probe) => {
                checks.push(VerifyCheck {
                    name: "optimality probe R^2 > 0.9".into(),
                    value: probe.r_squared,
                    threshold: 0.9,
                    passed: probe.r_squared > 0.9,
                });
                run.line(&format!(
                    "optimality probe: {} perturbations, R^2 = {:.4}, baseline J = {:.6e}",
                    perturbations, probe.r_squared, probe.baseline_cost
                ));
            }
            Err(WlqError::OptimalityViolated {
                index,
                eps,
                delta,
                neg3se,
            }) => {
                checks.push(VerifyCheck {
                    name: format!("optimality probe (perturbation {index}, eps {eps})"),
                    value: delta,
                    threshold: neg3se,
                    passed: false,
                });
                run.line(&format!(
                    "optimality VIOLATED: perturbation {index} at eps {eps}: dJ = {delta:.3e} < {neg3se:.3e}"
                ));
            }
            Err(other) => return Err(other),
        }

        let passed = checks.iter().all(|c| c.passed);
        for c in &checks {
            run.line(&format!(
                "  [{}] {:<42} value {:.3e} threshold {:.3e}",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.value,
                c.threshold
            ));
        }
        run.write_toml(
            "verify.toml",
            &VerifyOut {
                passed,
                checks,
                cost_mean: stat.cost_mean,
                cost_se: stat.cost_se,
            },
        )?;
        run.line(&format!(
            "verdict: {}",
            if passed { "PASS" } else { "FAIL" }
        ));
        Ok(if passed { 0 } else { 3 })
    })
}

#[derive(Serialize)]
struct ReduceOut {
    phi_mean: f64,
    phi_se: f64,
    superposition_max_err: f64,
    stored_paths: usize,
}

fn cmd_reduce(
    problem: &Path,
    store_paths: usize,
    mc_args: &McArgs,
    common: &Common,
) -> Result<i32> {
    let mut opts = BTreeMap::new();
    opts.insert("store_paths".into(), store_paths.to_string());
    let mut run = Run::new("reduce", &problem.display().to_string(), common, opts)?;
    log_errors(&mut run, |run| {
        let spec = load_spec(problem)?;
        require_valid(run, &spec, common.permissive)?;
        let t_max = resolve_horizon(&spec, None, mc_args.tmax)?;
        let cfg = sim_config(mc_args, common, t_max, 10_000);
        let rep = mc::reduce_nonhomogeneous(&spec, &cfg, store_paths)?;
        run.line(&format!(
            "phi(t0) = {:.8e} +- {:.3e} (SE), superposition max err = {:.3e}",
            rep.phi_mean, rep.phi_se, rep.superposition_max_err
        ));

        let mut csv = String::from("path_id,s");
        for i in 1..=spec.n {
            csv.push_str(&format!(",qhat_{i}"));
        }
        for i in 1..=spec.m {
            csv.push_str(&format!(",rhat_{i}"));
        }
        csv.push('\n');
        for (pid, (qp, rp)) in rep.qhat_paths.iter().zip(&rep.rhat_paths).enumerate() {
            for (k, &s) in rep.grid.iter().enumerate() {
                csv.push_str(&format!("{pid},{s}"));
                for v in qp[k].iter().chain(rp[k].iter()) {
                    csv.push_str(&format!(",{v}"));
                }
                csv.push('\n');
            }
        }
        fs::write(run.out_dir.join("qhat_rhat.csv"), csv)?;
        run.line(&format!(
            "qhat_rhat.csv: {} stored paths",
            rep.qhat_paths.len()
        ));
        run.write_toml(
            "reduce.toml",
            &ReduceOut {
                phi_mean: rep.phi_mean,
                phi_se: rep.phi_se,
                superposition_max_err: rep.superposition_max_err,
                stored_paths: rep.qhat_paths.len(),
            },
        )?;
        Ok(0)
    })
}

#[derive(Serialize)]
struct DemoRow {
    instance: String,
    p: f64,
    p_exact: f64,
    theta: f64,
    theta_exact: f64,
    j_mc: f64,
    j_se: f64,
    value: f64,
    stationarity_rms: f64,
    stationarity_threshold: f64,
    passed: bool,
}

#[derive(Serialize)]
struct DemoOut {
    passed: bool,
    instances: Vec<DemoRow>,
}

fn cmd_demo(common: &Common) -> Result<i32> {
    let mut run = Run::new("demo", "<built-in>", common, BTreeMap::new())?;
    log_errors(&mut run, |run| {
        let sqrt2 = std::f64::consts::SQRT_2;
        let instances = [
            (
                "scalar F=0",
                ProblemSpec::scalar(0.0, 1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0),
                4_000,
            ),
            (
                "scalar F=2",
                ProblemSpec::scalar(0.0, 1.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0, 1.0, 1.0),
                10_000,
            ),
        ];
        let mut rows = Vec::new();
        run.line(
            "instance      P         Theta     J_mc        +-3SE      V=x'Px    stat_rms   verdict",
        );
        for (name, spec, paths) in instances {
            let sol = synthesis::solve_are(&spec)?;
            let t_max = 8.0;
            let grid: Vec<f64> = (0..=64).map(|k| t_max * k as f64 / 64.0).collect();
            let eta = synthesis::solve_eta(&spec, &sol.theta_bar, &grid)?;
            let vbar = synthesis::assemble_vbar(&spec, &sol.p, &eta)?;
            let syn = SynthesisResult {
                p: sol.p.clone(),
                theta_bar: sol.theta_bar.clone(),
                eta,
                vbar,
                iterations: sol.iterations,
                residual: sol.residual,
                step_norms: sol.step_norms.clone(),
            };
            let cfg = SimConfig {
                t_max,
                dt: 1e-3,
                n_paths: paths,
                seed: common.seed,
                antithetic: false,
            };
            let value = synthesis::value_homogeneous(&spec, &syn.p, &spec.x0)?;
            let decay = stability::is_stabilizer(&syn.theta_bar, &spec).decay_rate();
            let vb = {
                let vbar = syn.vbar.clone();
                move |s: f64| vbar.eval(s)
            };
            let law = ControlLaw::Feedback {
                theta: &syn.theta_bar,
                offset: Some(&vb),
            };
            let cost = mc::estimate_cost(&spec, &law, &cfg, decay)?;
            let stat = mc::stationarity_residual(&spec, &syn, &SimConfig { n_paths: 64, ..cfg })?;
            let rms = stat.stationarity_rms.unwrap();
            // The residual carries the Euler gap of the transformed dynamics:
            // O(dt) when their diffusion vanishes, O(sqrt(dt)) otherwise.
            let ts = transform::to_classical(&spec);
            let ct_cl = &ts.ct + &ts.dt * &syn.theta_bar;
            let order = if ct_cl.amax() <= 1e-12 {
                cfg.dt
            } else {
                cfg.dt.sqrt()
            };
            let threshold = 10.0 * order * stat.stationarity_scale.unwrap();

            // Oracle comparison: MC cost within 3 SE + tail + dt allowance of x'Px.
            let j_ok = (cost.cost_mean - value).abs()
                <= 3.0 * cost.cost_se + cost.tail_bound + cfg.dt * value.abs().max(1.0);
            let p_ok = (sol.p[(0, 0)] - (sqrt2 - 1.0)).abs() <= 1e-9;
            let t_ok = (sol.theta_bar[(0, 0)] - (1.0 - sqrt2)).abs() <= 1e-9;
            let s_ok = rms <= threshold;
            let passed = j_ok && p_ok && t_ok && s_ok;
            run.line(&format!(
                "{name:<12} {:>9.6} {:>9.6} {:>11.6} {:>9.2e} {:>9.6} {:>9.2e}  {}",
                sol.p[(0, 0)],
                sol.theta_bar[(0, 0)],
                cost.cost_mean,
                3.0 * cost.cost_se,
                value,
                rms,
                if passed { "ok" } else { "FAIL" }
            ));
            rows.push(DemoRow {
                instance: name.into(),
                p: sol.p[(0, 0)],
                p_exact: sqrt2 - 1.0,
                theta: sol.theta_bar[(0, 0)],
                theta_exact: 1.0 - sqrt2,
                j_mc: cost.cost_mean,
                j_se: cost.cost_se,
                value,
                stationarity_rms: rms,
                stationarity_threshold: threshold,
                passed,
            });
        }
        let all_ok = rows.iter().all(|r| r.passed);
        run.write_toml(
            "demo.toml",
            &DemoOut {
                passed: all_ok,
                instances: rows,
            },
        )?;
        run.line(&format!(
            "demo verdict: {}",
            if all_ok { "PASS" } else { "FAIL" }
        ));
        Ok(if all_ok { 0 } else { 3 })
    })
}
