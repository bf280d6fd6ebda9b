//! Experiment plumbing: configuration, problem and method dispatch, step-size
//! grid search, benchmark tables and trace output.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{doptimal_reference, run_frank_wolfe, run_preconditioned_gd, FwConfig, GdConfig};
use crate::error::{Error, Result};
use crate::precond::Identity;
use crate::problems::{self, DoptimalData, ProblemInstance, ProblemKind};
use crate::stepper::{run_aepg, AepgConfig, RunStatus, RunTrace, StopMode};

/// Current configuration schema version.
pub const CONFIG_VERSION: u32 = 1;

/// Column header of trace CSV files.
pub const TRACE_HEADER: &str = "k,L,r,v_norm,grad_norm,dtheta_norm,eta_eff,t_us";

/// Column header of summary CSV files.
pub const SUMMARY_HEADER: &str = "problem,method,alpha_cond,target,status,iterations,wall_ms,gap,eta,theta";

/// Duality gap certifying the D-optimal reference value.
pub const REFERENCE_GAP: f64 = 1e-10;

/// Environment variable capping the bench worker pool.
pub const THREADS_ENV: &str = "ENERGIA_THREADS";

/// `count` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..count)
        .map(|i| {
            let e = a + (b - a) * i as f64 / (count - 1) as f64;
            // snap to the decade values the grid is meant to contain
            let snapped = (e * 1e9).round() / 1e9;
            10f64.powf(snapped)
        })
        .collect()
}

/// Default step-size grid: 13 log-spaced values from `1e-3` to `10`.
pub fn default_eta_grid() -> Vec<f64> {
    log_grid(1e-3, 10.0, 13)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemId {
    Quad,
    Rosen,
    Doptimal,
    Mixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodId {
    Aepg,
    Aegd,
    Gd,
    Hrgd,
    Wngd,
    Fw,
    FwAway,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchTable {
    Quad,
    Rosen,
    Doptimal,
    Mixture,
}

macro_rules! string_enum {
    ($ty:ty, $($name:literal => $variant:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} '{s}' (expected one of: {})",
                        stringify!($ty),
                        [$($name),+].join(", ")
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let s = match self {
                    $(x if *x == $variant => $name,)+
                    _ => unreachable!(),
                };
                f.write_str(s)
            }
        }
    };
}

string_enum!(ProblemId, "quad" => ProblemId::Quad, "rosen" => ProblemId::Rosen, "doptimal" => ProblemId::Doptimal, "mixture" => ProblemId::Mixture);
string_enum!(
    MethodId,
    "aepg" => MethodId::Aepg,
    "aegd" => MethodId::Aegd,
    "gd" => MethodId::Gd,
    "hrgd" => MethodId::Hrgd,
    "wngd" => MethodId::Wngd,
    "fw" => MethodId::Fw,
    "fw_away" => MethodId::FwAway,
);
string_enum!(ReportFormat, "csv" => ReportFormat::Csv, "json" => ReportFormat::Json);
string_enum!(BenchTable, "quad" => BenchTable::Quad, "rosen" => BenchTable::Rosen, "doptimal" => BenchTable::Doptimal, "mixture" => BenchTable::Mixture);

// declared after the macro so the suites can name their enum with it
pub mod verify;

impl MethodId {
    pub fn supports(self, problem: ProblemId) -> bool {
        use MethodId::*;
        match self {
            Aepg => true,
            Aegd | Gd => problem != ProblemId::Doptimal,
            Hrgd => problem != ProblemId::Mixture,
            Wngd => problem == ProblemId::Mixture,
            Fw | FwAway => problem == ProblemId::Doptimal,
        }
    }

    /// Methods without a step size to tune.
    pub fn step_free(self) -> bool {
        matches!(self, MethodId::Fw | MethodId::FwAway)
    }
}

/// Accuracy target used in the tables for condition parameter `alpha`:
/// `1e-7` at `alpha = 1`, one decade looser per decade of `alpha`.
pub fn table_target(alpha: f64) -> f64 {
    10f64.powf(-7.0 + alpha.log10().round())
}

fn default_max_iter() -> usize {
    10_000
}

/// A single experiment, as read from a JSON file or assembled from flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub problem: ProblemId,
    pub method: MethodId,
    /// Condition parameter of the quadratic and Rosenbrock problems.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Design dimension.
    #[serde(default)]
    pub m: Option<usize>,
    /// Number of design points.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Design data CSV; overrides generation from `m`, `n`, `seed`.
    #[serde(default)]
    pub data: Option<PathBuf>,
    #[serde(default)]
    pub grid_n: Option<usize>,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub eta_grid: Option<Vec<f64>>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub tol: Option<f64>,
    #[serde(default)]
    pub stop_mode: Option<StopMode>,
    #[serde(default)]
    pub eps_feas: f64,
    #[serde(default)]
    pub eta_star: Option<f64>,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub format: ReportFormat,
    /// Record wall-clock time in traces; off by default so traces are reproducible.
    #[serde(default)]
    pub timing: bool,
}

impl ExperimentConfig {
    pub fn new(problem: ProblemId, method: MethodId) -> Self {
        Self {
            version: CONFIG_VERSION,
            problem,
            method,
            alpha: None,
            m: None,
            n: None,
            seed: None,
            data: None,
            grid_n: None,
            eta: None,
            eta_grid: None,
            c: None,
            r0: None,
            max_iter: default_max_iter(),
            tol: None,
            stop_mode: None,
            eps_feas: 0.0,
            eta_star: None,
            out: None,
            format: ReportFormat::Csv,
            timing: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(1.0)
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n.unwrap_or(64)
    }

    /// Accuracy target: the configured tolerance or the problem's default.
    pub fn tol(&self) -> f64 {
        self.tol.unwrap_or(match self.problem {
            ProblemId::Quad | ProblemId::Rosen => table_target(self.alpha()),
            ProblemId::Doptimal => 1e-7,
            ProblemId::Mixture => 1e-12,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        if !self.method.supports(self.problem) {
            return Err(Error::Config(format!("method '{}' does not apply to problem '{}'", self.method, self.problem)));
        }
        let positive = |name: &str, x: Option<f64>| match x {
            Some(v) if !(v > 0.0 && v.is_finite()) => Err(Error::Config(format!("{name} must be positive, got {v}"))),
            _ => Ok(()),
        };
        positive("alpha", self.alpha)?;
        positive("eta", self.eta)?;
        positive("r0", self.r0)?;
        positive("tol", self.tol)?;
        positive("eta_star", self.eta_star)?;
        if let Some(g) = &self.eta_grid {
            if g.is_empty() {
                return Err(Error::Config("eta_grid is empty".into()));
            }
            for &v in g {
                positive("eta_grid entry", Some(v))?;
            }
        }
        if let Some(c) = self.c {
            if !c.is_finite() {
                return Err(Error::Config(format!("c must be finite, got {c}")));
            }
        }
        if !(0.0..=0.5).contains(&self.eps_feas) {
            return Err(Error::Config(format!("eps_feas must lie in [0, 1/2], got {}", self.eps_feas)));
        }
        if let (Some(m), Some(n)) = (self.m, self.n) {
            if m == 0 || m >= n {
                return Err(Error::Config(format!("design needs 0 < m < n, got m = {m}, n = {n}")));
            }
        }
        if self.grid_n.is_some_and(|n| n < 4) {
            return Err(Error::Config("grid_n must be at least 4".into()));
        }
        Ok(())
    }

    pub fn run_params(&self, eta: f64) -> RunParams {
        RunParams {
            eta,
            r0: self.r0,
            max_iter: self.max_iter,
            tol: self.tol(),
            stop_mode: self.stop_mode,
            eps_feas: self.eps_feas,
            eta_star: self.eta_star,
            record_iterates: false,
            record_timing: self.timing,
        }
    }
}

/// Build the problem an experiment refers to. D-optimal instances get their
/// reference value from a Frank-Wolfe run to a certified duality gap.
pub fn build_problem(cfg: &ExperimentConfig) -> Result<ProblemInstance> {
    let mut p = match cfg.problem {
        ProblemId::Quad => problems::quadratic_problem(cfg.alpha())?,
        ProblemId::Rosen => problems::rosenbrock_problem(cfg.alpha())?,
        ProblemId::Doptimal => {
            let data = match &cfg.data {
                Some(path) => DoptimalData::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))?,
                None => DoptimalData::generate(cfg.m.unwrap_or(10), cfg.n.unwrap_or(100), cfg.seed.unwrap_or(42))?,
            };
            with_doptimal_reference(problems::doptimal_from_data(data)?)?
        }
        ProblemId::Mixture => problems::mixture_problem(cfg.grid_n())?,
    };
    if let Some(c) = cfg.c {
        p.objective.c = c;
    }
    Ok(p)
}

/// Attach the certified reference value `L_ref` to a D-optimal instance.
pub fn with_doptimal_reference(p: ProblemInstance) -> Result<ProblemInstance> {
    let design = p.design.clone().ok_or_else(|| Error::Unsupported("not a design problem".into()))?;
    let (l_ref, _gap) = doptimal_reference(&design, &p.theta0, REFERENCE_GAP, 10_000_000)?;
    Ok(p.with_reference(l_ref))
}

/// Per-run settings shared by all methods.
#[derive(Debug, Clone, Copy)]
pub struct RunParams {
    pub eta: f64,
    pub r0: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    pub stop_mode: Option<StopMode>,
    pub eps_feas: f64,
    pub eta_star: Option<f64>,
    pub record_iterates: bool,
    pub record_timing: bool,
}

impl RunParams {
    pub fn new(eta: f64, max_iter: usize, tol: f64) -> Self {
        Self {
            eta,
            r0: None,
            max_iter,
            tol,
            stop_mode: None,
            eps_feas: 0.0,
            eta_star: None,
            record_iterates: false,
            record_timing: false,
        }
    }

    fn aepg(&self) -> AepgConfig {
        AepgConfig {
            eta: self.eta,
            r0: self.r0,
            max_iter: self.max_iter,
            tol: self.tol,
            stop_mode: self.stop_mode,
            eps_feas: self.eps_feas,
            eta_star: self.eta_star,
            record_iterates: self.record_iterates,
            record_timing: self.record_timing,
            ..AepgConfig::default()
        }
    }

    fn gd(&self) -> GdConfig {
        GdConfig {
            eta: self.eta,
            max_iter: self.max_iter,
            tol: self.tol,
            stop_mode: self.stop_mode,
            record_iterates: self.record_iterates,
            record_timing: self.record_timing,
        }
    }
}

fn problem_id(p: &ProblemInstance) -> ProblemId {
    match p.kind {
        ProblemKind::Quadratic | ProblemKind::StronglyConvex => ProblemId::Quad,
        ProblemKind::Rosenbrock => ProblemId::Rosen,
        ProblemKind::Doptimal => ProblemId::Doptimal,
        ProblemKind::Mixture => ProblemId::Mixture,
    }
}

/// Run one method on a problem.
///
/// * `aepg`: energy method with the problem's natural preconditioner
/// * `aegd`: energy method with the identity
/// * `gd`, `hrgd`, `wngd`: fixed-step descent with the identity, the
///   Hessian-Riemannian (simplex) metric and the Wasserstein metric
/// * `fw`, `fw_away`: Frank-Wolfe on design problems
pub fn run_method(problem: &ProblemInstance, method: MethodId, params: &RunParams) -> Result<RunTrace> {
    let id = problem_id(problem);
    if problem.kind != ProblemKind::StronglyConvex && !method.supports(id) {
        return Err(Error::Unsupported(format!("method '{method}' on problem '{id}'")));
    }
    let feas = problem.feasibility();
    let n = problem.dim();
    match method {
        MethodId::Aepg => {
            let pre = problem.natural_preconditioner()?;
            run_aepg(&problem.objective, pre.as_ref(), &problem.theta0, &params.aepg(), Some(&feas))
        }
        MethodId::Aegd => run_aepg(&problem.objective, &Identity::new(n), &problem.theta0, &params.aepg(), Some(&feas)),
        MethodId::Gd => run_preconditioned_gd(&problem.objective, &Identity::new(n), &problem.theta0, &params.gd(), Some(&feas)),
        MethodId::Hrgd | MethodId::Wngd => {
            let pre = problem.natural_preconditioner()?;
            run_preconditioned_gd(&problem.objective, pre.as_ref(), &problem.theta0, &params.gd(), Some(&feas))
        }
        MethodId::Fw | MethodId::FwAway => {
            let design = problem.design.as_ref().ok_or_else(|| Error::Unsupported("Frank-Wolfe needs a design problem".into()))?;
            let cfg = FwConfig {
                max_iter: params.max_iter,
                tol: params.tol,
                stop_mode: params.stop_mode,
                away_steps: method == MethodId::FwAway,
                record_iterates: params.record_iterates,
                record_timing: params.record_timing,
                ..FwConfig::default()
            };
            run_frank_wolfe(design, &problem.objective, &problem.theta0, &cfg)
        }
    }
}

/// Worker pool sized by `ENERGIA_THREADS` (all cores when unset or invalid).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = std::env::var(THREADS_ENV).ok().and_then(|s| s.trim().parse::<usize>().ok()).filter(|&t| t > 0);
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(t) = threads {
        b = b.num_threads(t);
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Outcome of one run in a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPoint {
    pub eta: f64,
    pub status: RunStatus,
    pub iterations: usize,
    pub final_loss: f64,
    pub wall_ms: f64,
}

impl SweepPoint {
    /// Ranking score: iterations when converged, `budget + 1` otherwise.
    pub fn score(&self, budget: usize) -> usize {
        if self.status == RunStatus::Converged {
            self.iterations
        } else {
            budget + 1
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSearch {
    pub points: Vec<SweepPoint>,
    /// Index of the best point (first among equal scores).
    pub best: usize,
    pub budget: usize,
}

impl GridSearch {
    pub fn best_point(&self) -> &SweepPoint {
        &self.points[self.best]
    }
}

fn timed_run(problem: &ProblemInstance, method: MethodId, params: &RunParams) -> (Result<RunTrace>, f64) {
    let start = Instant::now();
    let out = run_method(problem, method, params);
    (out, start.elapsed().as_secs_f64() * 1e3)
}

fn sweep_point(problem: &ProblemInstance, method: MethodId, params: &RunParams) -> SweepPoint {
    let (out, wall_ms) = timed_run(problem, method, params);
    match out {
        Ok(t) => SweepPoint { eta: params.eta, status: t.status, iterations: t.iterations(), final_loss: t.final_loss, wall_ms },
        Err(e) => {
            log::warn!("{method} at eta = {} failed: {e}", params.eta);
            SweepPoint { eta: params.eta, status: RunStatus::NumericalFailure, iterations: 0, final_loss: f64::NAN, wall_ms }
        }
    }
}

/// Run `method` for every step size in `grid` on the worker pool and pick the
/// one reaching the target in the fewest iterations.
pub fn grid_search(
    pool: &rayon::ThreadPool,
    problem: &ProblemInstance,
    method: MethodId,
    grid: &[f64],
    base: &RunParams,
) -> Result<GridSearch> {
    if grid.is_empty() {
        return Err(Error::Config("empty step-size grid".into()));
    }
    let points: Vec<SweepPoint> = pool.install(|| {
        grid.par_iter().map(|&eta| sweep_point(problem, method, &RunParams { eta, ..*base })).collect()
    });
    let budget = base.max_iter;
    let best = (0..points.len()).min_by_key(|&i| (points[i].score(budget), i)).unwrap();
    Ok(GridSearch { points, best, budget })
}

/// One line of a benchmark or run report.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub problem: String,
    pub method: MethodId,
    pub alpha_cond: Option<f64>,
    pub target: f64,
    pub status: RunStatus,
    pub iterations: usize,
    pub wall_ms: f64,
    /// `|L - L*|` at termination (`NaN` when `L*` is unknown).
    pub gap: f64,
    pub eta: Option<f64>,
    pub theta: Vec<f64>,
}

impl SummaryRow {
    pub fn from_trace(problem: &ProblemInstance, method: MethodId, target: f64, eta: Option<f64>, trace: &RunTrace, wall_ms: f64) -> Self {
        let gap = problem.objective.min_value().map_or(f64::NAN, |l| (trace.final_loss - l).abs());
        Self {
            problem: problem.name.clone(),
            method,
            alpha_cond: problem.alpha_cond,
            target,
            status: trace.status,
            iterations: trace.iterations(),
            wall_ms,
            gap,
            eta,
            theta: if problem.dim() <= 4 { trace.final_theta.clone() } else { vec![] },
        }
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    pub fn csv_line(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let theta = self.theta.iter().map(|t| format!("{t:.6}")).collect::<Vec<_>>().join(" ");
        format!(
            "\"{}\",{},{},{},{},{},{:.3},{:e},{},{}",
            self.problem,
            self.method,
            opt(self.alpha_cond),
            self.target,
            status_name(self.status),
            self.iterations,
            self.wall_ms,
            self.gap,
            opt(self.eta),
            theta
        )
    }
}

pub fn status_name(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Converged => "converged",
        RunStatus::BudgetExhausted => "budget_exhausted",
        RunStatus::InfeasibleStep => "infeasible_step",
        RunStatus::NumericalFailure => "numerical_failure",
    }
}

pub fn write_summary_csv<W: Write>(mut w: W, rows: &[SummaryRow]) -> Result<()> {
    writeln!(w, "{SUMMARY_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_line())?;
    }
    Ok(())
}

/// Trace CSV with [`TRACE_HEADER`]. Numbers use the shortest round-trip
/// representation, so equal traces give identical bytes.
pub fn write_trace_csv<W: Write>(mut w: W, trace: &RunTrace) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in &trace.records {
        writeln!(w, "{},{},{},{},{},{},{},{}", r.k, r.loss, r.r, r.v_norm, r.grad_norm, r.dtheta_norm, r.eta_eff, r.t_us)?;
    }
    Ok(())
}

pub fn write_trace_json<W: Write>(w: W, trace: &RunTrace) -> Result<()> {
    serde_json::to_writer_pretty(w, trace)?;
    Ok(())
}

/// Result of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct Experiment {
    pub trace: RunTrace,
    pub summary: SummaryRow,
    pub search: Option<GridSearch>,
}

/// Run an experiment: tune the step on `eta_grid` when given, then run once
/// with the chosen (or configured) step.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let problem = build_problem(cfg)?;
    run_experiment_on(cfg, &problem)
}

pub fn run_experiment_on(cfg: &ExperimentConfig, problem: &ProblemInstance) -> Result<Experiment> {
    let mut search = None;
    let eta = if cfg.method.step_free() {
        None
    } else if let Some(grid) = &cfg.eta_grid {
        let pool = worker_pool()?;
        let gs = grid_search(&pool, problem, cfg.method, grid, &cfg.run_params(1.0))?;
        let eta = gs.best_point().eta;
        search = Some(gs);
        Some(eta)
    } else {
        Some(cfg.eta.unwrap_or(0.1))
    };
    let params = cfg.run_params(eta.unwrap_or(1.0));
    let (trace, wall_ms) = timed_run(problem, cfg.method, &params);
    let trace = trace?;
    let summary = SummaryRow::from_trace(problem, cfg.method, params.tol, eta, &trace, wall_ms);
    Ok(Experiment { trace, summary, search })
}

/// Options shared by the benchmark tables.
#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub eta_grid: Vec<f64>,
    /// Step grid for the quadratic and Rosenbrock tables. It reaches below
    /// 1e-3 because fixed-step HRGD leaves the feasible set there at large α.
    pub curve_eta_grid: Vec<f64>,
    pub max_iter: usize,
    /// Line-search feasibility fraction for the quadratic and Rosenbrock tables.
    pub eps_feas: f64,
    /// Energy shift for every table; `None` keeps each problem's default.
    pub c: Option<f64>,
    /// Energy shift for the Rosenbrock table when `c` is unset.
    pub rosen_c: f64,
    /// Condition parameters for the quadratic and Rosenbrock tables.
    pub alphas: Vec<f64>,
    /// `(m, n)` design sizes for the D-optimal table.
    pub designs: Vec<(usize, usize)>,
    pub seed: u64,
    pub grid_n: usize,
    /// Fixed steps for the mixture table (gradient methods, Wasserstein methods).
    pub mixture_eta: (f64, f64),
    pub mixture_max_iter: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            eta_grid: default_eta_grid(),
            curve_eta_grid: log_grid(1e-4, 10.0, 21),
            max_iter: 100_000,
            eps_feas: 0.25,
            c: None,
            rosen_c: 1e6,
            alphas: vec![1.0, 10.0, 100.0, 1000.0, 10000.0],
            designs: vec![(10, 100), (30, 300)],
            seed: 42,
            grid_n: 64,
            mixture_eta: (10.0, 0.5),
            mixture_max_iter: 5000,
        }
    }
}

/// Head-to-head iteration counts of a baseline and the energy method.
#[derive(Debug, Clone, Serialize)]
pub struct Comparison {
    pub problem: String,
    pub target: f64,
    pub baseline: MethodId,
    /// `budget + 1` when the baseline did not reach the target.
    pub baseline_iterations: usize,
    pub aepg_iterations: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub table: BenchTable,
    pub rows: Vec<SummaryRow>,
    pub comparisons: Vec<Comparison>,
}

impl BenchReport {
    pub fn write_comparisons_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "problem,target,baseline,baseline_iterations,aepg_iterations,ratio")?;
        for c in &self.comparisons {
            writeln!(
                w,
                "\"{}\",{},{},{},{},{:.2}",
                c.problem, c.target, c.baseline, c.baseline_iterations, c.aepg_iterations, c.ratio
            )?;
        }
        Ok(())
    }
}

/// Tune `method` on the grid, rerun at the best step and summarize. Failures
/// are recorded in the row instead of aborting the table.
fn tuned_row(
    pool: &rayon::ThreadPool,
    problem: &ProblemInstance,
    method: MethodId,
    base: &RunParams,
    grid: &[f64],
) -> (SummaryRow, usize) {
    let eta = if method.step_free() {
        None
    } else {
        match grid_search(pool, problem, method, grid, base) {
            Ok(gs) => Some(gs.best_point().eta),
            Err(e) => return (failed_row(problem, method, base.tol, e), base.max_iter + 1),
        }
    };
    let params = RunParams { eta: eta.unwrap_or(1.0), ..*base };
    let (trace, wall_ms) = timed_run(problem, method, &params);
    match trace {
        Ok(t) => {
            let row = SummaryRow::from_trace(problem, method, base.tol, eta, &t, wall_ms);
            let score = if row.converged() { row.iterations } else { base.max_iter + 1 };
            (row, score)
        }
        Err(e) => (failed_row(problem, method, base.tol, e), base.max_iter + 1),
    }
}

fn failed_row(problem: &ProblemInstance, method: MethodId, target: f64, e: Error) -> SummaryRow {
    log::warn!("{} / {method}: {e}", problem.name);
    SummaryRow {
        problem: problem.name.clone(),
        method,
        alpha_cond: problem.alpha_cond,
        target,
        status: RunStatus::NumericalFailure,
        iterations: 0,
        wall_ms: 0.0,
        gap: f64::NAN,
        eta: None,
        theta: vec![],
    }
}

fn compare(problem: &ProblemInstance, target: f64, baseline: MethodId, b: usize, a: usize) -> Comparison {
    Comparison {
        problem: problem.name.clone(),
        target,
        baseline,
        baseline_iterations: b,
        aepg_iterations: a,
        ratio: b as f64 / a.max(1) as f64,
    }
}

/// Run one of the benchmark tables.
pub fn bench(table: BenchTable, opts: &BenchOptions) -> Result<BenchReport> {
    let pool = worker_pool()?;
    let mut rows = Vec::new();
    let mut comparisons = Vec::new();
    match table {
        BenchTable::Quad | BenchTable::Rosen => {
            for &alpha in &opts.alphas {
                let mut problem = if table == BenchTable::Quad {
                    problems::quadratic_problem(alpha)?
                } else {
                    let mut p = problems::rosenbrock_problem(alpha)?;
                    p.objective.c = opts.rosen_c;
                    p
                };
                if let Some(c) = opts.c {
                    problem.objective.c = c;
                }
                let mut base = RunParams::new(1.0, opts.max_iter, table_target(alpha));
                base.eps_feas = opts.eps_feas;
                let grid = &opts.curve_eta_grid;
                let (hr, hs) = tuned_row(&pool, &problem, MethodId::Hrgd, &base, grid);
                let (ae, as_) = tuned_row(&pool, &problem, MethodId::Aepg, &base, grid);
                comparisons.push(compare(&problem, base.tol, MethodId::Hrgd, hs, as_));
                rows.push(hr);
                rows.push(ae);
            }
        }
        BenchTable::Doptimal => {
            for &(m, n) in &opts.designs {
                let mut problem = with_doptimal_reference(problems::doptimal_problem(m, n, opts.seed)?)?;
                if let Some(c) = opts.c {
                    problem.objective.c = c;
                }
                let base = RunParams::new(1.0, opts.max_iter, 1e-7);
                let (ae, as_) = tuned_row(&pool, &problem, MethodId::Aepg, &base, &opts.eta_grid);
                for method in [MethodId::Hrgd, MethodId::Fw, MethodId::FwAway] {
                    let (row, score) = tuned_row(&pool, &problem, method, &base, &opts.eta_grid);
                    comparisons.push(compare(&problem, base.tol, method, score, as_));
                    rows.push(row);
                }
                rows.push(ae);
            }
        }
        BenchTable::Mixture => {
            let problem = problems::mixture_problem(opts.grid_n)?;
            let (eta_plain, eta_w) = opts.mixture_eta;
            let runs = [
                (MethodId::Gd, eta_plain),
                (MethodId::Aegd, eta_plain),
                (MethodId::Wngd, eta_w),
                (MethodId::Aepg, eta_w),
            ];
            let out: Vec<SummaryRow> = pool.install(|| {
                runs.par_iter()
                    .map(|&(method, eta)| {
                        let params = RunParams::new(eta, opts.mixture_max_iter, 1e-12);
                        let (t, ms) = timed_run(&problem, method, &params);
                        match t {
                            Ok(t) => SummaryRow::from_trace(&problem, method, params.tol, Some(eta), &t, ms),
                            Err(e) => failed_row(&problem, method, params.tol, e),
                        }
                    })
                    .collect()
            });
            rows.extend(out);
        }
    }
    Ok(BenchReport { table, rows, comparisons })
}

/// Euclidean distance of a row's terminal point from `target`.
pub fn distance_to(row: &SummaryRow, target: &[f64]) -> f64 {
    DVector::from_column_slice(&row.theta).metric_distance(&DVector::from_column_slice(target))
}
