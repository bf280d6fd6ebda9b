//! Verification suites: each invariant is checked against a tolerance and
//! reported with the extreme value observed.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use super::{run_method, MethodId, RunParams};
use crate::barrier::{ConstraintSet, Kernel, LegendreBarrier};
use crate::bounds::{check_energy_identity, check_rate_bounds, compute_step_bounds, RateRegime, SmoothnessProfile};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::FnObjective;
use crate::precond::{ngd_equivalence_check, projection_matrix, AffineConstraint};
use crate::problems::{self, ProblemInstance};
use crate::stepper::{RunTrace, StopMode};
use crate::wngd::WassersteinWorkspace;

/// Column header of verification reports.
pub const VERIFY_HEADER: &str = "suite,check,tolerance,observed,pass";

/// Step sizes swept by the energy suite.
pub const ENERGY_ETAS: [f64; 6] = [1e-3, 1e-2, 0.1, 1.0, 10.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Energy,
    Bounds,
    Projections,
    Wngd,
    PlExample,
    NgdEquiv,
}

string_enum!(
    Suite,
    "energy" => Suite::Energy,
    "bounds" => Suite::Bounds,
    "projections" => Suite::Projections,
    "wngd" => Suite::Wngd,
    "pl_example" => Suite::PlExample,
    "ngd_equiv" => Suite::NgdEquiv,
);

impl Suite {
    pub const ALL: [Suite; 6] =
        [Suite::Energy, Suite::Bounds, Suite::Projections, Suite::Wngd, Suite::PlExample, Suite::NgdEquiv];
}

/// One invariant: passes when `observed <= tolerance`, or `>=` for
/// [`Check::at_least`] (NaN never passes).
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub tolerance: f64,
    pub observed: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(suite: Suite, name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        Self { suite, name: name.into(), tolerance, observed, pass: observed <= tolerance }
    }

    pub fn at_least(suite: Suite, name: impl Into<String>, tolerance: f64, observed: f64) -> Self {
        Self { suite, name: name.into(), tolerance, observed, pass: observed >= tolerance }
    }

    pub fn csv_line(&self) -> String {
        format!("{},{},{:e},{:e},{}", self.suite, self.name, self.tolerance, self.observed, self.pass)
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.pass { "ok  " } else { "FAIL" };
        write!(f, "{tag} {}/{}: observed {:.3e} (tolerance {:.1e})", self.suite, self.name, self.observed, self.tolerance)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

pub fn write_report_csv<W: Write>(mut w: W, reports: &[SuiteReport]) -> Result<()> {
    writeln!(w, "{VERIFY_HEADER}")?;
    for c in reports.iter().flat_map(|r| &r.checks) {
        writeln!(w, "{}", c.csv_line())?;
    }
    Ok(())
}

pub fn run_suite(suite: Suite) -> Result<SuiteReport> {
    let checks = match suite {
        Suite::Energy => energy_suite()?,
        Suite::Bounds => bounds_suite()?,
        Suite::Projections => projections_suite()?,
        Suite::Wngd => wngd_suite(32, 20)?,
        Suite::PlExample => pl_example_suite(100)?,
        Suite::NgdEquiv => ngd_equiv_suite()?,
    };
    Ok(SuiteReport { suite, checks })
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Problems swept by the energy suite, with AEPG iteration budgets.
pub fn energy_problems() -> Result<Vec<(ProblemInstance, usize)>> {
    Ok(vec![
        (problems::quadratic_problem(1.0)?, 400),
        (problems::quadratic_problem(1000.0)?, 400),
        (problems::rosenbrock_problem(10.0)?, 400),
        (problems::rosenbrock_problem(10000.0)?, 400),
        (problems::strongly_convex_problem(&[1.0, 4.0, 25.0], &[1.0, -2.0, 0.5])?, 400),
        (problems::doptimal_problem(5, 20, 42)?, 400),
        (problems::mixture_problem(16)?, 40),
    ])
}

/// AEPG traces for every energy-suite problem and step size.
pub fn energy_traces() -> Result<Vec<(String, f64, RunTrace)>> {
    let problems = energy_problems()?;
    let jobs: Vec<(usize, f64)> =
        (0..problems.len()).flat_map(|i| ENERGY_ETAS.iter().map(move |&eta| (i, eta))).collect();
    jobs.par_iter()
        .map(|&(i, eta)| {
            let (p, budget) = &problems[i];
            let mut params = RunParams::new(eta, *budget, 0.0);
            params.stop_mode = Some(StopMode::IterationBudget);
            Ok((p.name.clone(), eta, run_method(p, MethodId::Aepg, &params)?))
        })
        .collect()
}

fn energy_suite() -> Result<Vec<Check>> {
    let s = Suite::Energy;
    let traces = energy_traces()?;
    let mut names: Vec<String> = traces.iter().map(|t| t.0.clone()).collect();
    names.dedup();
    let mut out = Vec::new();
    for name in names {
        let mut residual: f64 = 0.0;
        let mut nonmonotone = 0usize;
        let mut path_ratio: f64 = 0.0;
        let mut steps = 0usize;
        for (_, _, trace) in traces.iter().filter(|t| t.0 == name) {
            let rep = check_energy_identity(trace)?;
            residual = residual.max(rep.max_residual);
            nonmonotone += usize::from(!rep.monotone);
            if rep.path_bound > 0.0 {
                path_ratio = path_ratio.max(rep.path_length / rep.path_bound);
            }
            steps += rep.steps;
        }
        if steps == 0 {
            return Err(Error::Config(format!("energy suite took no steps on {name}")));
        }
        out.push(Check::at_most(s, format!("identity_residual[{name}]"), 1e-12, residual));
        out.push(Check::at_most(s, format!("nonmonotone_runs[{name}]"), 0.0, nonmonotone as f64));
        out.push(Check::at_most(s, format!("path_length_ratio[{name}]"), 1.0, path_ratio));
    }
    Ok(out)
}

/// Metric eigenvalue range along the recorded iterates (`(1, 1)` for the identity).
pub fn metric_range(problem: &ProblemInstance, trace: &RunTrace) -> Result<(f64, f64)> {
    let pre = problem.natural_preconditioner()?;
    let iterates = trace.iterates.as_ref().ok_or(Error::MissingMetadata { regime: "bounds", missing: "recorded iterates" })?;
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for th in iterates {
        let (a, b) = pre.metric_bounds(&DVector::from_column_slice(th))?.unwrap_or((1.0, 1.0));
        lo = lo.min(a);
        hi = hi.max(b);
    }
    Ok((lo, hi))
}

/// Smoothness profile of a problem along a trace, with `l* = sqrt(L* + c)`.
pub fn trace_profile(problem: &ProblemInstance, trace: &RunTrace) -> Result<SmoothnessProfile> {
    let alpha = problem.objective.alpha.ok_or(Error::MissingMetadata { regime: "bounds", missing: "alpha" })?;
    let l_min = problem.objective.min_value().ok_or(Error::MissingMetadata { regime: "bounds", missing: "L*" })?;
    let (lambda1, lambdan) = metric_range(problem, trace)?;
    Ok(SmoothnessProfile { alpha, lambda1, lambdan, l_star: problem.objective.energy_root(l_min)? })
}

/// The runs checked by the bounds suite: (label, problem, regimes, eta, budget).
fn bounds_cases() -> Result<Vec<(String, ProblemInstance, Vec<RateRegime>, f64, usize)>> {
    let convex = vec![RateRegime::General, RateRegime::Convex];
    let mut cases = Vec::new();
    for alpha in [1.0, 10.0] {
        for eta in [0.01, 0.05] {
            cases.push((format!("quad(alpha={alpha}),eta={eta}"), problems::quadratic_problem(alpha)?, convex.clone(), eta, 3000));
        }
    }
    let sc = problems::strongly_convex_problem(&[1.0, 4.0, 25.0], &[1.0, -2.0, 0.5])?;
    for eta in [0.001, 0.01, 0.1, 1.0] {
        let regimes = vec![RateRegime::General, RateRegime::Convex, RateRegime::Pl];
        cases.push((format!("strongly_convex,eta={eta}"), sc.clone(), regimes, eta, 3000));
    }
    Ok(cases)
}

fn bounds_suite() -> Result<Vec<Check>> {
    let s = Suite::Bounds;
    let cases = bounds_cases()?;
    let results: Vec<Vec<Check>> = cases
        .par_iter()
        .map(|(label, p, regimes, eta, budget)| {
            let mut params = RunParams::new(*eta, *budget, 1e-13);
            params.record_iterates = true;
            let trace = run_method(p, MethodId::Aepg, &params)?;
            let profile = trace_profile(p, &trace)?;
            let first = &trace.records[0];
            let limit = compute_step_bounds(&profile, p.objective.energy_root(first.loss)?, first.r)?.safe;
            let mut out = Vec::new();
            for &regime in regimes {
                // the exponential rate is only claimed below the step threshold
                if regime == RateRegime::Pl && *eta >= limit {
                    continue;
                }
                let rep = check_rate_bounds(&trace, &p.objective, &profile, regime)?;
                let name = format!("{}_violations[{label}]", regime_label(regime));
                out.push(Check::at_most(s, name, 0.0, rep.checks.iter().filter(|c| !c.pass).count() as f64));
                if regime == RateRegime::General {
                    let env = rep.envelope.iter().filter(|c| !c.pass).count();
                    out.push(Check::at_most(s, format!("envelope_violations[{label}]"), 0.0, env as f64));
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let mut checks: Vec<Check> = results.into_iter().flatten().collect();
    let pl_runs = checks.iter().filter(|c| c.name.starts_with("pl_violations")).count();
    checks.push(Check::at_least(s, "pl_runs_below_step_threshold", 1.0, pl_runs as f64));
    Ok(checks)
}

fn regime_label(r: RateRegime) -> &'static str {
    match r {
        RateRegime::General => "general",
        RateRegime::Convex => "convex",
        RateRegime::Pl => "pl",
        RateRegime::ProjectedPl => "projected_pl",
    }
}

/// Random metric `A A^T / n + I / 2` and full-row-rank constraint rows.
fn random_projection_case(rng: &mut ChaCha8Rng, n: usize) -> Result<(DMatrix<f64>, AffineConstraint)> {
    let a = random_matrix(rng, n, n);
    let g = &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * 0.5;
    let m = rng.random_range(1..n);
    let b = random_matrix(rng, m, n);
    let c = AffineConstraint::new(b, DVector::zeros(m))?;
    Ok((g, c))
}

/// Extreme relative residuals of `P^2 = P`, `B P = 0` and `G P = P^T G`.
pub fn projection_residuals(g: &DMatrix<f64>, c: &AffineConstraint) -> Result<[f64; 3]> {
    let p = projection_matrix(g, c)?;
    let b = c.matrix();
    let idem = (&p * &p - &p).amax() / p.amax().max(1.0);
    let annih = (b * &p).amax() / (b.amax() * p.amax().max(1.0));
    let gp = g * &p;
    let sym = (&gp - p.transpose() * g).amax() / (g.amax() * p.amax().max(1.0));
    Ok([idem, annih, sym])
}

fn projections_suite() -> Result<Vec<Check>> {
    let s = Suite::Projections;
    let mut out = Vec::new();
    for n in [2usize, 5, 20] {
        let mut r = rng(1000 + n as u64);
        let mut worst = [0.0f64; 3];
        for _ in 0..100 {
            let (g, c) = random_projection_case(&mut r, n)?;
            let res = projection_residuals(&g, &c)?;
            for i in 0..3 {
                worst[i] = worst[i].max(res[i]);
            }
        }
        out.push(Check::at_most(s, format!("idempotent[n={n}]"), 1e-10, worst[0]));
        out.push(Check::at_most(s, format!("annihilates_b[n={n}]"), 1e-10, worst[1]));
        out.push(Check::at_most(s, format!("self_adjoint[n={n}]"), 1e-10, worst[2]));
    }
    Ok(out)
}

/// Relative gap between the least-squares natural direction and
/// `-G^{-1} grad L` along the mass-compatible tangents at one parameter.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct WngdSample {
    pub direction_gap: f64,
    pub lift_residual: f64,
    pub asymmetry: f64,
    /// `min(eig G) / |G|`.
    pub min_eig_ratio: f64,
}

pub fn wngd_sample(problem: &ProblemInstance, theta: &[f64]) -> Result<WngdSample> {
    let fit = problem.density.as_ref().ok_or_else(|| Error::Unsupported("wngd checks need a density problem".into()))?;
    let ws = WassersteinWorkspace::assemble(&fit.grid, fit.model.as_ref(), theta)?;
    let area = fit.grid.cell_area();
    let res = fit.residual(theta);

    // least squares min |dF + V p| over face fields, solved by SVD
    let df = ws.operator.apply_transpose(&res);
    let faces = df.len();
    let n = ws.lifts.len();
    let v = DMatrix::from_fn(faces, n, |f, i| ws.lifts[i].field[f]);
    let rhs = -DVector::from_column_slice(&df);
    let p_ls = v
        .svd(true, true)
        .solve(&rhs, 0.0)
        .map_err(|e| Error::Config(format!("least-squares solve failed: {e}")))?;

    // explicit route: G from the lifts, gradient from the projected tangents
    let grad = DVector::from_iterator(n, ws.tangents.iter().map(|t| area * t.iter().zip(&res).map(|(a, b)| a * b).sum::<f64>()));
    let g = &ws.info;
    let p_ex = -g.clone().cholesky().ok_or_else(|| Error::NotSpd { context: "information matrix".into() })?.solve(&grad);

    let scale = p_ex.norm().max(f64::MIN_POSITIVE);
    let (lo, _) = linalg::sym_eigen_bounds(g);
    Ok(WngdSample {
        direction_gap: (p_ls - &p_ex).norm() / scale,
        lift_residual: ws.max_lift_residual(),
        asymmetry: linalg::asymmetry(g),
        min_eig_ratio: lo / g.norm(),
    })
}

fn wngd_suite(grid_n: usize, samples: usize) -> Result<Vec<Check>> {
    let s = Suite::Wngd;
    let p = problems::mixture_problem(grid_n)?;
    let mut r = rng(7);
    let thetas: Vec<[f64; 2]> = (0..samples).map(|_| [r.random_range(0.5..4.5), r.random_range(0.5..4.5)]).collect();
    let got: Vec<WngdSample> = thetas.par_iter().map(|t| wngd_sample(&p, t)).collect::<Result<_>>()?;
    let worst = |f: fn(&WngdSample) -> f64| got.iter().map(f).fold(0.0, f64::max);
    let min_eig = got.iter().map(|x| x.min_eig_ratio).fold(f64::INFINITY, f64::min);
    Ok(vec![
        Check::at_most(s, format!("direction_gap[N={grid_n}]"), 1e-8, worst(|x| x.direction_gap)),
        Check::at_most(s, format!("lift_residual[N={grid_n}]"), 1e-8, worst(|x| x.lift_residual)),
        Check::at_most(s, format!("info_asymmetry[N={grid_n}]"), 1e-14, worst(|x| x.asymmetry)),
        Check::at_most(s, format!("info_negative_eig[N={grid_n}]"), 1e-10, (-min_eig).max(0.0)),
    ])
}

/// Largest `|(|P^T grad L|^2 / gap) - 2 mu| / (2 mu)` over random instances.
pub fn pl_example_deviation(samples: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let mut taken = 0;
    while taken < samples {
        let sign = |r: &mut ChaCha8Rng| if r.random_bool(0.5) { 1.0 } else { -1.0 };
        let a = sign(&mut r) * r.random_range(0.2..3.0);
        let b = sign(&mut r) * r.random_range(0.2..3.0);
        let beta = r.random_range(0.1..5.0);
        let alpha = beta * r.random_range(1.0..10.0);
        let den = a * a * alpha + b * b * beta;
        let t1_star = a * alpha / den;
        let t1: f64 = r.random_range(-3.0..3.0);
        if (t1 - t1_star).abs() < 0.1 {
            continue;
        }
        let theta = [t1, (1.0 - a * t1) / b];
        let sides = problems::projected_pl_example(a, b, alpha, beta, &theta)?;
        let dev = (sides.projected_grad_sq / sides.gap - 2.0 * sides.mu).abs() / (2.0 * sides.mu);
        worst = worst.max(dev);
        taken += 1;
    }
    Ok(worst)
}

fn pl_example_suite(samples: usize) -> Result<Vec<Check>> {
    Ok(vec![Check::at_most(Suite::PlExample, format!("ratio_deviation[{samples} samples]"), 1e-10, pl_example_deviation(samples, 11)?)])
}

/// Largest HR-vs-NGD discrepancy over random simplex-like affine sets in
/// dimension `n`: entropy barrier on the orthant, `m < n` random rows
/// through a random interior point, random convex quadratic objective.
pub fn ngd_discrepancy(n: usize, draws: usize, seed: u64) -> Result<f64> {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..draws {
        let theta = DVector::from_fn(n, |_, _| r.random_range(0.1..2.0));
        let affine = if n > 1 {
            let m = r.random_range(1..n);
            let b = random_matrix(&mut r, m, n);
            let rhs = &b * &theta;
            Some(AffineConstraint::new(b, rhs)?)
        } else {
            None
        };
        let q = {
            let a = random_matrix(&mut r, n, n);
            &a * a.transpose() + DMatrix::identity(n, n)
        };
        let shift = DVector::from_fn(n, |_, _| normal(&mut r));
        let (q1, q2, s1, s2) = (q.clone(), q, shift.clone(), shift);
        let obj = FnObjective::new(
            n,
            move |t: &DVector<f64>| 0.5 * (t - &s1).dot(&(&q1 * (t - &s1))),
            move |t: &DVector<f64>| &q2 * (t - &s2),
        );
        let barrier = LegendreBarrier::with_correction(Kernel::Entropy, ConstraintSet::nonnegative_orthant(n), vec![])?;
        worst = worst.max(ngd_equivalence_check(&barrier, affine.as_ref(), &obj, &theta)?);
    }
    Ok(worst)
}

fn ngd_equiv_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for n in [2usize, 5, 20] {
        let d = ngd_discrepancy(n, 100, 300 + n as u64)?;
        out.push(Check::at_most(Suite::NgdEquiv, format!("discrepancy[n={n}]"), 1e-9, d));
    }
    Ok(out)
}

impl FromStr for SuiteList {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(SuiteList(Suite::ALL.to_vec()));
        }
        s.split(',').map(|x| x.trim().parse()).collect::<Result<_>>().map(SuiteList)
    }
}

/// Comma-separated suite names, or `all`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuiteList(pub Vec<Suite>);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("pl_example".parse::<Suite>().unwrap(), Suite::PlExample);
        assert_eq!("all".parse::<SuiteList>().unwrap().0.len(), 6);
        assert_eq!("energy, wngd".parse::<SuiteList>().unwrap().0, vec![Suite::Energy, Suite::Wngd]);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn nan_observation_fails() {
        assert!(!Check::at_most(Suite::Bounds, "x", 1.0, f64::NAN).pass);
        assert!(Check::at_most(Suite::Bounds, "x", 0.0, 0.0).pass);
    }
}
