use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use energia::bench::verify::{self, SuiteList};
use energia::bench::{
    self, BenchOptions, BenchTable, ExperimentConfig, MethodId, ProblemId, ReportFormat, SUMMARY_HEADER,
};
use energia::problems::DoptimalData;
use energia::{Error, RunStatus, StopMode};

const EXIT_OK: u8 = 0;
const EXIT_CONFIG: u8 = 1;
const EXIT_BUDGET: u8 = 2;
const EXIT_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(name = "energia", version, about = "Energy-adaptive preconditioned gradient descent experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one method on one problem and write its trace.
    Run(RunArgs),
    /// Reproduce one of the benchmark tables.
    Bench(BenchArgs),
    /// Check the theoretical invariants.
    Verify(VerifyArgs),
    /// Write D-optimal design data as CSV.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON experiment config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    problem: Option<ProblemId>,
    #[arg(long)]
    method: Option<MethodId>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Design data CSV (from `gen-data`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    eta: Option<f64>,
    /// Comma-separated steps; the best one is used for the final run.
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<f64>,
    #[arg(long)]
    r0: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    /// objective_gap, gradient_norm, projected_gradient_norm or iteration_budget.
    #[arg(long, value_parser = parse_stop_mode)]
    stop_mode: Option<StopMode>,
    #[arg(long)]
    eps_feas: Option<f64>,
    #[arg(long)]
    eta_star: Option<f64>,
    /// Trace file (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    format: Option<ReportFormat>,
    /// Append the summary row to this CSV file.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Record wall-clock time per step in the trace.
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct BenchArgs {
    /// quad, rosen, doptimal or mixture.
    table: BenchTable,
    /// Step grid for every table (replaces both default grids).
    #[arg(long, value_delimiter = ',')]
    eta_grid: Option<Vec<f64>>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, allow_hyphen_values = true)]
    c: Option<f64>,
    #[arg(long)]
    eps_feas: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    grid_n: Option<usize>,
    /// Comma-separated condition parameters for the quad and rosen tables.
    #[arg(long, value_delimiter = ',')]
    alpha: Option<Vec<f64>>,
    /// Design dimension for the doptimal table (with `--n`).
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    /// Summary rows (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct VerifyArgs {
    /// Comma-separated suites or `all`.
    #[arg(long, default_value = "all")]
    suite: SuiteList,
    /// Report file (CSV or JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv")]
    format: ReportFormat,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    m: usize,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_stop_mode(s: &str) -> std::result::Result<StopMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|_| format!("unknown stop mode '{s}'"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    let outcome = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Verify(a) => cmd_verify(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error_code(&e))
        }
    }
}

/// Configuration and input problems exit with 1, numerical ones with 3.
fn error_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(
            Error::NotSpd { .. }
            | Error::Boundary { .. }
            | Error::OffSimplex { .. }
            | Error::SingularSchur { .. }
            | Error::IllPosedLift { .. }
            | Error::SingularDesign { .. }
            | Error::NonFinite(_),
        ) => EXIT_FAILURE,
        _ => EXIT_CONFIG,
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn experiment_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            let cfg: ExperimentConfig = serde_json::from_str(&text).map_err(Error::from)?;
            cfg
        }
        None => {
            let problem = a.problem.ok_or_else(|| Error::Config("--problem is required without --config".into()))?;
            ExperimentConfig::new(problem, a.method.unwrap_or(MethodId::Aepg))
        }
    };
    if let Some(p) = a.problem {
        cfg.problem = p;
    }
    if let Some(m) = a.method {
        cfg.method = m;
    }
    macro_rules! set {
        ($($field:ident),+) => { $(if a.$field.is_some() { cfg.$field = a.$field.clone(); })+ };
    }
    set!(alpha, m, n, seed, data, grid_n, eta, eta_grid, c, r0, tol, stop_mode, eta_star, out);
    if let Some(k) = a.max_iter {
        cfg.max_iter = k;
    }
    if let Some(e) = a.eps_feas {
        cfg.eps_feas = e;
    }
    if let Some(f) = a.format {
        cfg.format = f;
    }
    cfg.timing |= a.timing;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(a: RunArgs) -> Result<u8> {
    let cfg = experiment_config(&a)?;
    let exp = bench::run_experiment(&cfg)?;
    let mut w = output(cfg.out.as_deref())?;
    match cfg.format {
        ReportFormat::Csv => bench::write_trace_csv(&mut w, &exp.trace)?,
        ReportFormat::Json => {
            bench::write_trace_json(&mut w, &exp.trace)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    drop(w);

    if let Some(path) = &a.report {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{SUMMARY_HEADER}")?;
        }
        writeln!(f, "{}", exp.summary.csv_line())?;
    }
    if let Some(msg) = &exp.trace.message {
        eprintln!("{}: {msg}", bench::status_name(exp.trace.status));
    }
    eprintln!(
        "{} / {}: {} after {} iterations, L = {:e}",
        exp.summary.problem,
        cfg.method,
        bench::status_name(exp.trace.status),
        exp.summary.iterations,
        exp.trace.final_loss
    );
    Ok(match exp.trace.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::BudgetExhausted => EXIT_BUDGET,
        RunStatus::InfeasibleStep | RunStatus::NumericalFailure => EXIT_FAILURE,
    })
}

fn cmd_bench(a: BenchArgs) -> Result<u8> {
    let mut opts = BenchOptions::default();
    if let Some(g) = a.eta_grid {
        if g.is_empty() || g.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Config("eta grid values must be positive".into()).into());
        }
        opts.curve_eta_grid = g.clone();
        opts.eta_grid = g;
    }
    if let Some(k) = a.max_iter {
        opts.max_iter = k;
    }
    opts.c = a.c;
    if let Some(e) = a.eps_feas {
        if !(0.0..=0.5).contains(&e) {
            return Err(Error::Config(format!("eps_feas must lie in [0, 1/2], got {e}")).into());
        }
        opts.eps_feas = e;
    }
    if let Some(s) = a.seed {
        opts.seed = s;
    }
    if let Some(n) = a.grid_n {
        opts.grid_n = n;
    }
    if let Some(al) = a.alpha {
        opts.alphas = al;
    }
    match (a.m, a.n) {
        (Some(m), Some(n)) => opts.designs = vec![(m, n)],
        (None, None) => {}
        _ => return Err(Error::Config("--m and --n go together".into()).into()),
    }
    let report = bench::bench(a.table, &opts)?;
    let mut w = output(a.out.as_deref())?;
    match a.format {
        ReportFormat::Csv => bench::write_summary_csv(&mut w, &report.rows)?,
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, &report)?;
            writeln!(w)?;
        }
    }
    w.flush()?;
    drop(w);
    if !report.comparisons.is_empty() && (a.out.is_some() || a.format == ReportFormat::Csv) {
        let mut buf = Vec::new();
        report.write_comparisons_csv(&mut buf)?;
        eprint!("{}", String::from_utf8_lossy(&buf));
    }
    Ok(EXIT_OK)
}

fn cmd_verify(a: VerifyArgs) -> Result<u8> {
    let mut reports = Vec::new();
    for &suite in &a.suite.0 {
        let report = verify::run_suite(suite)?;
        for c in &report.checks {
            println!("{c}");
        }
        reports.push(report);
    }
    if let Some(path) = &a.out {
        let mut w = output(Some(path))?;
        match a.format {
            ReportFormat::Csv => verify::write_report_csv(&mut w, &reports)?,
            ReportFormat::Json => {
                serde_json::to_writer_pretty(&mut w, &reports)?;
                writeln!(w)?;
            }
        }
        w.flush()?;
    }
    let failed: usize = reports.iter().map(|r| r.failures().count()).sum();
    if failed > 0 {
        eprintln!("{failed} check(s) failed");
        Ok(EXIT_CONFIG)
    } else {
        Ok(EXIT_OK)
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<u8> {
    let data = DoptimalData::generate(a.m, a.n, a.seed)?;
    if data.seed != Some(a.seed) {
        eprintln!("seed {} gave singular data; used seed {:?}", a.seed, data.seed);
    }
    let mut w = output(a.out.as_deref())?;
    data.write_csv(&mut w)?;
    w.flush()?;
    Ok(EXIT_OK)
}
