//! Command-line interface. Exit codes: 0 success, 2 invalid input or
//! configuration, 3 simulation or solver failure, 4 an audit ran to
//! completion and failed.
//!
//! The `RGBSDE_THREADS` environment variable pins the worker pool size. All
//! Monte Carlo reductions are fixed-block, so results are identical for any
//! pool size; the variable only trades wall clock for cores.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::catalog::{self, CatalogProblem};
use crate::config::{parse_config, ConfigError, MethodChoice, RunSection, SchemeChoice};
use crate::estimates::{
    audit_apriori_bound, audit_comparison, audit_skorokhod, audit_z_control, EstimateError,
    CONSTANT_CEILING,
};
use crate::forward_sde::{simulate_reflected, ForwardBundle, ForwardError, ReflectionScheme};
use crate::models::{check_assumptions, CheckOptions, ModelError, TimeGrid};
use crate::pde::{cross_validate, solve_obstacle_pde, PdeError, PdeOptions};
use crate::solver::{
    solve, solve_pipeline, PipelineOptions, RPolicy, SolveMethod, SolverError,
};
use crate::util;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_AUDIT: i32 = 4;

const SOLVE_HEADER: &str = "problem,method,n,y0_mean,y0_se,k_t_mean,skorokhod_score,runtime_s";
const AUDIT_HEADER: &str = "check,value,threshold,pass";
const CONVERGE_HEADER: &str = "problem,rung,n,radius,y0,distance";
const PDE_HEADER: &str = "problem,mc_value,mc_se,pde_value,gap,budget,pass";

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Numeric(String),
    AuditFailed(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, w: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Numeric(m) => w.write_str(m),
            CliError::AuditFailed(m) => write!(w, "audit failed: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::AuditFailed(_) => EXIT_AUDIT,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<SolverError> for CliError {
    fn from(e: SolverError) -> Self {
        match e {
            SolverError::InvalidOption(_)
            | SolverError::TerminalBelowBarrier { .. }
            | SolverError::Model(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ForwardError> for CliError {
    fn from(e: ForwardError) -> Self {
        match e {
            ForwardError::StartOutsideDomain { .. }
            | ForwardError::UnsupportedScheme(_)
            | ForwardError::UnstablePenalty { .. }
            | ForwardError::DimensionMismatch(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<PdeError> for CliError {
    fn from(e: PdeError) -> Self {
        match e {
            PdeError::LcpNotConverged { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<EstimateError> for CliError {
    fn from(e: EstimateError) -> Self {
        CliError::Numeric(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Numeric(format!("io error: {e}"))
    }
}

#[derive(Parser)]
#[command(
    name = "rgbsde",
    version,
    about = "Simulation and verification toolkit for reflected BSDEs with boundary flux"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate reflected forward paths; optionally store them in a bundle file.
    Simulate(SimulateArgs),
    /// Solve the backward equation on fresh forward paths; emit one CSV row.
    Solve(SolveArgs),
    /// Solve, then run the estimate audits; exit 4 if any audit fails.
    Audit(AuditArgs),
    /// Run the truncation-index ladder and report inter-rung distances.
    Converge(ConvergeArgs),
    /// Cross-validate against the finite-difference route; exit 4 on a gap
    /// beyond budget.
    PdeCompare(PdeCompareArgs),
    /// List the built-in problems.
    Catalog,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// TOML run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalog problem name; overrides the config's problem section.
    #[arg(long)]
    problem: Option<String>,
    /// Master seed; component seeds are derived from it.
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo path count.
    #[arg(long)]
    paths: Option<usize>,
    /// Time steps.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy)]
enum MethodArg {
    Reflected,
    Penalized,
}

#[derive(ValueEnum, Clone, Copy)]
enum SchemeArg {
    Projection,
    Skorokhod,
    Penalization,
}

#[derive(ValueEnum, Clone, Copy)]
enum RPolicyArg {
    /// Radius from the a priori bound on the value process (default).
    Bound,
    /// Doubling ladder `r = r_min * 2^(n/8)`.
    Ladder,
    /// Fixed radius, taken from --r-value.
    Fixed,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Reflection scheme for the forward paths.
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    /// Penalization rate when --scheme penalization is chosen.
    #[arg(long)]
    kappa: Option<f64>,
    /// Output path for the binary forward bundle.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Reflection penalty rate when --method penalized is chosen.
    #[arg(long)]
    penalty: Option<f64>,
    /// Moment exponent for the audits, in (1, 2).
    #[arg(long)]
    p: Option<f64>,
    /// CSV output path; without it the row goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also store the full solution surfaces in a binary file.
    #[arg(long)]
    save_solution: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Moment exponent for the audits, in (1, 2).
    #[arg(long)]
    p: Option<f64>,
    /// CSV output path for the audit table.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    penalty: Option<f64>,
    /// First truncation level; rung k uses n_min * 2^k.
    #[arg(long)]
    n_min: Option<u32>,
    #[arg(long)]
    rungs: Option<usize>,
    /// Early-stop threshold on the inter-rung distance; 0 runs the whole
    /// ladder.
    #[arg(long)]
    tol_cauchy: Option<f64>,
    #[arg(long, value_enum)]
    r_policy: Option<RPolicyArg>,
    /// Radius parameter for --r-policy ladder (r_min) or fixed (r).
    #[arg(long)]
    r_value: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PdeCompareArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Weight of the discretization allowance in the agreement budget.
    #[arg(long)]
    c_disc: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    if let Err(e) = init_thread_pool() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Solve(args) => cmd_solve(args),
        Command::Audit(args) => cmd_audit(args),
        Command::Converge(args) => cmd_converge(args),
        Command::PdeCompare(args) => cmd_pde_compare(args),
        Command::Catalog => cmd_catalog(),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_thread_pool() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("RGBSDE_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        CliError::Validation(format!("RGBSDE_THREADS must be a positive integer, got '{raw}'"))
    })?;
    if n == 0 {
        return Err(CliError::Validation("RGBSDE_THREADS must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Numeric(format!("thread pool: {e}")))
}

struct Resolved {
    label: String,
    problem: CatalogProblem,
    run: RunSection,
}

fn resolve(common: &CommonArgs) -> Result<Resolved, CliError> {
    let mut run = RunSection::default();
    let mut picked: Option<CatalogProblem> = None;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Validation(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg = parse_config(&text)?;
        let problem = cfg.build_problem()?;
        run = cfg.run.clone();
        picked = Some(problem);
    }
    if let Some(name) = &common.problem {
        picked = Some(
            catalog::by_name(name)
                .ok_or_else(|| CliError::Validation(format!("unknown catalog problem '{name}'")))?,
        );
    }
    let mut problem = picked
        .ok_or_else(|| CliError::Validation("pass --problem NAME or --config FILE".into()))?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    if let Some(paths) = common.paths {
        run.paths = Some(paths);
    }
    if let Some(steps) = common.steps {
        run.steps = Some(steps);
    }
    if let Some(steps) = run.steps {
        problem.grid = TimeGrid::new(problem.grid.t_max, steps)?;
    }
    Ok(Resolved { label: problem.name.to_string(), problem, run })
}

fn apply_method_flags(run: &mut RunSection, method: Option<MethodArg>, penalty: Option<f64>) {
    if let Some(m) = method {
        run.method = match m {
            MethodArg::Reflected => MethodChoice::Reflected,
            MethodArg::Penalized => MethodChoice::Penalized,
        };
    }
    if let Some(k) = penalty {
        run.penalty = k;
    }
}

fn apply_p(problem: &mut CatalogProblem, p: Option<f64>) -> Result<(), CliError> {
    if let Some(p) = p {
        if !(p > 1.0 && p < 2.0) {
            return Err(CliError::Validation(format!("p must lie in (1, 2), got {p}")));
        }
        problem.driver.p = p;
    }
    Ok(())
}

fn simulate_for(r: &Resolved, scheme: ReflectionScheme) -> Result<ForwardBundle, CliError> {
    let paths = r.run.paths.unwrap_or(r.problem.default_paths);
    if paths == 0 {
        return Err(CliError::Validation("paths must be >= 1".into()));
    }
    Ok(simulate_reflected(
        &r.problem.domain,
        &r.problem.drift,
        &r.problem.diffusion,
        &r.problem.x0,
        &r.problem.grid,
        paths,
        util::subseed(r.run.seed, "forward"),
        scheme,
    )?)
}

/// Full-precision float field: shortest representation that round-trips,
/// so identical values produce identical bytes.
fn fmt_field(v: f64) -> String {
    format!("{v:e}")
}

/// Writes a CSV file atomically: a temp file in the target directory is
/// fully written, then renamed over the destination.
fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| CliError::Numeric(format!("cannot create temp file in {}: {e}", dir.display())))?;
    writeln!(tmp, "{header}")?;
    for row in rows {
        writeln!(tmp, "{row}")?;
    }
    tmp.persist(path)
        .map_err(|e| CliError::Numeric(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn scheme_name(scheme: ReflectionScheme) -> &'static str {
    match scheme {
        ReflectionScheme::Projection => "projection",
        ReflectionScheme::SkorokhodExplicit => "skorokhod",
        ReflectionScheme::Penalization { .. } => "penalization",
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), CliError> {
    let mut r = resolve(&args.common)?;
    if let Some(s) = args.scheme {
        r.run.scheme = match s {
            SchemeArg::Projection => SchemeChoice::Projection,
            SchemeArg::Skorokhod => SchemeChoice::Skorokhod,
            SchemeArg::Penalization => SchemeChoice::Penalization,
        };
    }
    if let Some(k) = args.kappa {
        r.run.kappa = k;
    }
    let scheme = r.run.scheme()?;
    let start = Instant::now();
    let bundle = simulate_for(&r, scheme)?;
    let last = bundle.grid.steps;
    let mean_final: f64 =
        (0..bundle.paths).map(|p| bundle.state(p, last)[0]).sum::<f64>() / bundle.paths as f64;
    println!(
        "{}: {} paths x {} steps, scheme {}, mean X_T[0] = {:.6}, mean G_T = {:.6} ({:.3}s)",
        r.label,
        bundle.paths,
        bundle.grid.steps,
        scheme_name(scheme),
        mean_final,
        bundle.expected_local_time(),
        start.elapsed().as_secs_f64()
    );
    if let Some(out) = &args.out {
        bundle.write_to(out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_solve(args: SolveArgs) -> Result<(), CliError> {
    let mut r = resolve(&args.common)?;
    apply_method_flags(&mut r.run, args.method, args.penalty);
    apply_p(&mut r.problem, args.p)?;
    let method = r.run.method()?;
    let opts = r.run.solve_options()?;
    let scheme = r.run.scheme()?;

    let start = Instant::now();
    let forward = simulate_for(&r, scheme)?;
    let solution = solve(&forward, &r.problem.driver, &r.problem.obstacle, method, &opts)?;
    let runtime = start.elapsed().as_secs_f64();
    let score = audit_skorokhod(&solution).score;

    let row = format!(
        "{},{},{},{},{},{},{},{:.3}",
        r.label,
        method.label(),
        forward.grid.steps,
        fmt_field(solution.y0_mean),
        fmt_field(solution.y0_se),
        fmt_field(solution.k_t_mean()),
        fmt_field(score),
        runtime
    );
    if let Some(out) = &args.out {
        write_csv(out, SOLVE_HEADER, &[row])?;
        println!(
            "{}: Y0 = {:.6} +- {:.2e}, K_T mean = {:.6} ({:.3}s), wrote {}",
            r.label,
            solution.y0_mean,
            solution.y0_se,
            solution.k_t_mean(),
            runtime,
            out.display()
        );
    } else {
        println!("{SOLVE_HEADER}");
        println!("{row}");
    }
    if let Some(path) = &args.save_solution {
        solution.write_to(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_audit(args: AuditArgs) -> Result<(), CliError> {
    let mut r = resolve(&args.common)?;
    apply_p(&mut r.problem, args.p)?;
    let opts = r.run.solve_options()?;
    let scheme = r.run.scheme()?;
    let driver = &r.problem.driver;

    let assumptions =
        check_assumptions(driver, 2000, util::subseed(r.run.seed, "assumptions"), &CheckOptions::default())?;
    for c in &assumptions.clauses {
        if c.pass {
            println!("clause {:<12} pass", c.clause.to_string());
        } else {
            println!(
                "clause {:<12} warn (worst sampled excess {:.3e})",
                c.clause.to_string(),
                c.worst_violation
            );
        }
    }

    let forward = simulate_for(&r, scheme)?;
    let reflected = solve(&forward, driver, &r.problem.obstacle, SolveMethod::Reflected, &opts)?;

    let mut rows: Vec<String> = Vec::new();
    let mut failed: Vec<&'static str> = Vec::new();
    let mut push = |name: &'static str, value: f64, threshold: f64, pass: bool| {
        println!(
            "audit {:<32} value {:<13.6e} threshold {:<9.1e} {}",
            name,
            value,
            threshold,
            if pass { "pass" } else { "FAIL" }
        );
        rows.push(format!("{name},{},{},{}", fmt_field(value), fmt_field(threshold), pass));
        if !pass {
            failed.push(name);
        }
    };

    let apriori = audit_apriori_bound(&reflected, &forward, driver);
    push("apriori_constant", apriori.constant, CONSTANT_CEILING, apriori.pass);
    let zctl = audit_z_control(&reflected, &forward, driver);
    push("z_control_constant", zctl.constant, CONSTANT_CEILING, zctl.pass);
    let sk = audit_skorokhod(&reflected);
    push("skorokhod_score", sk.score, 1e-8, sk.score.abs() <= 1e-8);
    if r.problem.obstacle.has_barrier() {
        let penalized = solve(
            &forward,
            driver,
            &r.problem.obstacle,
            SolveMethod::Penalized { strength: r.run.penalty },
            &opts,
        )?;
        let cmp = audit_comparison(&penalized, &reflected, 2.0, 1e-3)?;
        push("comparison_violation_fraction", cmp.violation_fraction, 1e-3, cmp.pass);
    }

    if let Some(out) = &args.out {
        write_csv(out, AUDIT_HEADER, &rows)?;
        println!("wrote {}", out.display());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::AuditFailed(failed.join(", ")))
    }
}

fn cmd_converge(args: ConvergeArgs) -> Result<(), CliError> {
    let mut r = resolve(&args.common)?;
    apply_method_flags(&mut r.run, args.method, args.penalty);
    let mut popts = PipelineOptions::default();
    popts.method = r.run.method()?;
    popts.solve = r.run.solve_options()?;
    if let Some(n) = args.n_min {
        popts.n_min = n;
    }
    if let Some(k) = args.rungs {
        popts.rungs = k;
    }
    if let Some(t) = args.tol_cauchy {
        popts.tol_cauchy = t;
    }
    popts.r_policy = match (args.r_policy, args.r_value) {
        (None, None) => popts.r_policy,
        (None, Some(_)) => {
            return Err(CliError::Validation("--r-value needs --r-policy ladder or fixed".into()))
        }
        (Some(RPolicyArg::Bound), None) => RPolicy::RadiusBound,
        (Some(RPolicyArg::Bound), Some(_)) => {
            return Err(CliError::Validation("--r-policy bound takes no --r-value".into()))
        }
        (Some(RPolicyArg::Ladder), v) => RPolicy::DoublingLadder { r_min: v.unwrap_or(1.0) },
        (Some(RPolicyArg::Fixed), Some(v)) => RPolicy::Fixed(v),
        (Some(RPolicyArg::Fixed), None) => {
            return Err(CliError::Validation("--r-policy fixed needs --r-value".into()))
        }
    };

    let forward = simulate_for(&r, r.run.scheme()?)?;
    let result = solve_pipeline(&forward, &r.problem.driver, &r.problem.obstacle, &popts)?;
    let trace = &result.trace;

    let mut rows = Vec::new();
    for k in 0..trace.ns.len() {
        let distance = if k == 0 { String::new() } else { fmt_field(trace.distances[k - 1]) };
        println!(
            "rung {k}: n = {:<6} radius = {:<12.4e} y0 = {:<14.8e} distance = {}",
            trace.ns[k],
            trace.radii[k],
            trace.y0[k],
            if k == 0 { "-".to_string() } else { format!("{:.4e}", trace.distances[k - 1]) }
        );
        rows.push(format!(
            "{},{k},{},{},{},{distance}",
            r.label,
            trace.ns[k],
            fmt_field(trace.radii[k]),
            fmt_field(trace.y0[k])
        ));
    }
    println!(
        "{} after {} rungs: y0 = {:.8e}, converged = {}",
        r.label,
        trace.ns.len(),
        result.solution.y0_mean,
        trace.converged
    );
    if let Some(out) = &args.out {
        write_csv(out, CONVERGE_HEADER, &rows)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn cmd_pde_compare(args: PdeCompareArgs) -> Result<(), CliError> {
    let r = resolve(&args.common)?;
    let pde_problem = r.problem.pde_problem().ok_or_else(|| {
        CliError::Validation(format!("problem '{}' has no finite-difference setup", r.label))
    })?;
    let opts = r.run.solve_options()?;
    let forward = simulate_for(&r, r.run.scheme()?)?;
    let solution =
        solve(&forward, &r.problem.driver, &r.problem.obstacle, SolveMethod::Reflected, &opts)?;
    let pde_solution = solve_obstacle_pde(&pde_problem, &PdeOptions::default())?;
    let c_disc = args.c_disc.unwrap_or(1.0);
    let cv = cross_validate(
        solution.y0_mean,
        solution.y0_se,
        forward.grid.dt(),
        &pde_solution,
        r.problem.x0[0],
        c_disc,
    );
    println!(
        "{}: mc = {:.6e} +- {:.2e}, pde = {:.6e}, gap = {:.3e}, budget = {:.3e}, {}",
        r.label,
        cv.mc_value,
        cv.mc_se,
        cv.pde_value,
        cv.gap,
        cv.budget,
        if cv.pass { "pass" } else { "FAIL" }
    );
    if let Some(out) = &args.out {
        let row = format!(
            "{},{},{},{},{},{},{}",
            r.label,
            fmt_field(cv.mc_value),
            fmt_field(cv.mc_se),
            fmt_field(cv.pde_value),
            fmt_field(cv.gap),
            fmt_field(cv.budget),
            cv.pass
        );
        write_csv(out, PDE_HEADER, &[row])?;
        println!("wrote {}", out.display());
    }
    if cv.pass {
        Ok(())
    } else {
        Err(CliError::AuditFailed(format!(
            "finite-difference gap {:.3e} exceeds budget {:.3e}",
            cv.gap, cv.budget
        )))
    }
}

fn cmd_catalog() -> Result<(), CliError> {
    let mut entries = catalog::all();
    entries.push(catalog::cubic_driver_deterministic());
    for p in entries {
        let pde = if p.pde.is_some() { "  [pde]" } else { "" };
        println!("{:<28} {}{}", p.name, p.summary, pde);
    }
    Ok(())
}
