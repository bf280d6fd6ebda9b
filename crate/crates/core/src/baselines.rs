//! Reference optimizers: fixed-step (preconditioned) gradient descent and
//! Frank-Wolfe with and without away steps for D-optimal designs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;
use crate::precond::Preconditioner;
use crate::problems::DoptimalObjective;
use crate::stepper::{stop_reached, Feasibility, RunStatus, RunTrace, StopMode, TraceBuilder, TraceRecord};

/// One fixed-step update `theta - eta T(theta) grad L(theta)`.
pub fn preconditioned_gd_step(
    objective: &ObjectiveSpec,
    precond: &dyn Preconditioner,
    theta: &DVector<f64>,
    eta: f64,
) -> Result<DVector<f64>> {
    let g = objective.objective.gradient(theta);
    Ok(theta - precond.apply(theta, &g)? * eta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GdConfig {
    pub eta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub stop_mode: Option<StopMode>,
    pub record_iterates: bool,
    pub record_timing: bool,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { eta: 0.1, max_iter: 10_000, tol: 1e-8, stop_mode: None, record_iterates: false, record_timing: false }
    }
}

/// Fixed-step preconditioned gradient descent (plain GD with the identity).
/// A step leaving the feasible set ends the run with `InfeasibleStep`.
pub fn run_preconditioned_gd(
    objective: &ObjectiveSpec,
    precond: &dyn Preconditioner,
    theta0: &DVector<f64>,
    config: &GdConfig,
    feasibility: Option<&Feasibility>,
) -> Result<RunTrace> {
    if !(config.eta > 0.0) || !config.eta.is_finite() {
        return Err(Error::Config(format!("eta must be positive and finite, got {}", config.eta)));
    }
    let n = objective.dim();
    if theta0.len() != n {
        return Err(Error::Dimension { expected: n, got: theta0.len() });
    }
    if let Some(f) = feasibility {
        f.check_start(theta0)?;
    }
    let mode = crate::stepper::AepgConfig { stop_mode: config.stop_mode, ..Default::default() }.resolve_stop_mode(objective)?;
    let l_star = objective.min_value();
    let constraints = feasibility.and_then(|f| f.constraints.as_ref());

    let (mut loss, mut grad) = objective.objective.value_and_gradient(theta0);
    if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("loss or gradient at the initial point".into()));
    }
    let mut theta = theta0.clone();
    let mut tb = TraceBuilder::new(theta0, config.record_iterates, config.record_timing);
    let terminal = |k, loss, v_norm, grad_norm, pgrad_norm, t_us| TraceRecord {
        k,
        loss,
        r: f64::NAN,
        v_norm,
        grad_norm,
        pgrad_norm,
        dtheta_norm: 0.0,
        eta: 0.0,
        eta_eff: 0.0,
        t_us,
    };
    for k in 0..config.max_iter {
        let grad_norm = grad.norm();
        let dir = precond.apply(&theta, &grad).and_then(|v| Ok((v, precond.project_gradient(&theta, &grad)?)));
        let (v, pg) = match dir {
            Ok(x) => x,
            Err(e) => {
                let status = match e {
                    Error::Boundary { .. } | Error::OffSimplex { .. } => RunStatus::InfeasibleStep,
                    _ => RunStatus::NumericalFailure,
                };
                tb.push(terminal(k, loss, f64::NAN, grad_norm, f64::NAN, tb.elapsed_us()));
                return Ok(tb.finish(status, &theta, f64::NAN, loss, Some(e.to_string())));
            }
        };
        let (v_norm, pgrad_norm) = (v.norm(), pg.norm());
        if stop_reached(mode, config.tol, loss, l_star, v_norm, pgrad_norm) {
            tb.push(terminal(k, loss, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
            return Ok(tb.finish(RunStatus::Converged, &theta, f64::NAN, loss, None));
        }
        let next = &theta - &v * config.eta;
        let fail = if constraints.is_some_and(|c| !c.is_strictly_feasible(&next)) {
            Some((RunStatus::InfeasibleStep, "step leaves the feasible set".to_string()))
        } else {
            None
        };
        let (new_loss, new_grad) = match fail {
            Some(_) => (f64::NAN, grad.clone()),
            None => objective.objective.value_and_gradient(&next),
        };
        let fail = fail.or_else(|| {
            (!new_loss.is_finite() || new_grad.iter().any(|x| !x.is_finite()))
                .then(|| (RunStatus::NumericalFailure, "non-finite loss or gradient at the next iterate".to_string()))
        });
        if let Some((status, msg)) = fail {
            tb.push(terminal(k, loss, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
            return Ok(tb.finish(status, &theta, f64::NAN, loss, Some(msg)));
        }
        tb.push(TraceRecord {
            k,
            loss,
            r: f64::NAN,
            v_norm,
            grad_norm,
            pgrad_norm,
            dtheta_norm: (&next - &theta).norm(),
            eta: config.eta,
            eta_eff: config.eta,
            t_us: tb.elapsed_us(),
        });
        tb.push_iterate(&next);
        theta = next;
        loss = new_loss;
        grad = new_grad;
    }
    Ok(tb.finish(RunStatus::BudgetExhausted, &theta, f64::NAN, loss, None))
}

/// Exact line search for a Frank-Wolfe move toward (or away from) a design
/// point with leverage `d` in dimension `m`: minimizes
/// `-(m - 1) ln(1 - t) - ln(1 + t (d - 1))` over `[lo, hi]` by Newton's method.
/// Falls back to `fallback` if Newton produces a non-finite iterate.
pub fn fw_line_search(m: usize, d: f64, lo: f64, hi: f64, fallback: f64) -> f64 {
    let mm = m as f64 - 1.0;
    let dd = d - 1.0;
    let mut t: f64 = 0.0_f64.clamp(lo, hi);
    for _ in 0..20 {
        let a = 1.0 - t;
        let b = 1.0 + t * dd;
        let g = mm / a - dd / b;
        let h = mm / (a * a) + dd * dd / (b * b);
        let next = (t - g / h).clamp(lo, hi);
        if !next.is_finite() {
            return fallback.clamp(lo, hi);
        }
        if (next - t).abs() <= 1e-16 * t.abs().max(1e-300) {
            t = next;
            break;
        }
        t = next;
    }
    t
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FwConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Objective gap when a reference value is known, duality gap otherwise.
    pub stop_mode: Option<StopMode>,
    pub away_steps: bool,
    /// Refactor the information matrix every this many steps.
    pub refresh_every: usize,
    pub record_iterates: bool,
    pub record_timing: bool,
}

impl Default for FwConfig {
    fn default() -> Self {
        Self {
            max_iter: 10_000,
            tol: 1e-8,
            stop_mode: None,
            away_steps: true,
            refresh_every: 50,
            record_iterates: false,
            record_timing: false,
        }
    }
}

/// Frank-Wolfe iterate with cached inverse information matrix and leverages.
#[derive(Debug, Clone)]
pub struct FwState {
    pub theta: DVector<f64>,
    s_inv: DMatrix<f64>,
    /// Leverage scores `u_i^T S^{-1} u_i`, the negative gradient.
    pub leverage: DVector<f64>,
    logdet: f64,
    pub k: usize,
}

impl FwState {
    pub fn new(design: &DoptimalObjective, theta: DVector<f64>) -> Result<Self> {
        let mut s = Self { theta, s_inv: DMatrix::zeros(0, 0), leverage: DVector::zeros(0), logdet: 0.0, k: 0 };
        s.refresh(design)?;
        Ok(s)
    }

    fn refresh(&mut self, design: &DoptimalObjective) -> Result<()> {
        let info = design.information(&self.theta);
        let support = || (0..self.theta.len()).filter(|&i| self.theta[i] > 0.0).collect();
        let chol = info.cholesky().ok_or_else(|| Error::SingularDesign { support: support() })?;
        let l = chol.l();
        self.logdet = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        self.s_inv = chol.inverse();
        let u = &design.data.u;
        let us = u * &self.s_inv;
        self.leverage = DVector::from_fn(u.nrows(), |i, _| us.row(i).dot(&u.row(i)));
        Ok(())
    }

    pub fn loss(&self) -> f64 {
        -self.logdet
    }

    /// Frank-Wolfe duality gap `<grad L, theta - e_j>` at the best vertex.
    pub fn duality_gap(&self) -> f64 {
        self.leverage.max() - self.theta.dot(&self.leverage)
    }

    fn toward_vertex(&self) -> usize {
        self.leverage.argmax().0
    }

    fn away_vertex(&self) -> Option<usize> {
        (0..self.theta.len())
            .filter(|&i| self.theta[i] > 0.0)
            .min_by(|&a, &b| self.leverage[a].total_cmp(&self.leverage[b]))
    }
}

/// One Frank-Wolfe step (toward the best vertex, or away from the worst
/// support vertex when that gap is larger and `away` is set). Returns the
/// signed step `t` and the vertex moved along.
pub fn frank_wolfe_step(design: &DoptimalObjective, state: &mut FwState, away: bool, refresh_every: usize) -> Result<(f64, usize)> {
    let m = design.data.m();
    let mean = state.theta.dot(&state.leverage);
    let j = state.toward_vertex();
    let gap_fw = state.leverage[j] - mean;
    let fallback = 2.0 / (state.k as f64 + 2.0);
    let (t, v) = match away.then(|| state.away_vertex()).flatten() {
        Some(a) if mean - state.leverage[a] > gap_fw && state.theta[a] < 1.0 => {
            let lo = -state.theta[a] / (1.0 - state.theta[a]);
            (fw_line_search(m, state.leverage[a], lo, 0.0, -fallback), a)
        }
        _ => (fw_line_search(m, state.leverage[j], 0.0, 1.0 - 1e-12, fallback), j),
    };
    let drop = t < 0.0 && t <= -state.theta[v] / (1.0 - state.theta[v]);

    let u = &design.data.u;
    let uv = u.row(v).transpose();
    let w = &state.s_inv * &uv;
    let s = t / (1.0 - t);
    let denom = 1.0 + s * state.leverage[v];
    let a = u * &w;
    state.s_inv = (&state.s_inv - &w * w.transpose() * (s / denom)) / (1.0 - t);
    for i in 0..state.leverage.len() {
        state.leverage[i] = (state.leverage[i] - s * a[i] * a[i] / denom) / (1.0 - t);
    }
    state.logdet += m as f64 * (1.0 - t).ln() + denom.ln();
    state.theta *= 1.0 - t;
    state.theta[v] += t;
    if drop {
        state.theta[v] = 0.0;
    }
    state.k += 1;
    if refresh_every > 0 && state.k.is_multiple_of(refresh_every) {
        state.refresh(design)?;
    }
    Ok((t, v))
}

/// Frank-Wolfe (optionally with away steps) on a D-optimal design.
pub fn run_frank_wolfe(
    design: &DoptimalObjective,
    objective: &ObjectiveSpec,
    theta0: &DVector<f64>,
    config: &FwConfig,
) -> Result<RunTrace> {
    let n = design.data.n();
    if theta0.len() != n {
        return Err(Error::Dimension { expected: n, got: theta0.len() });
    }
    if (theta0.sum() - 1.0).abs() > 1e-9 || theta0.min() < 0.0 {
        return Err(Error::InfeasibleStart("Frank-Wolfe needs a point on the simplex".into()));
    }
    let mode = match config.stop_mode {
        Some(StopMode::ObjectiveGap) if objective.optimum.is_none() => {
            return Err(Error::Config("objective_gap stopping needs a known minimum".into()))
        }
        Some(m) => m,
        None if objective.optimum.is_some() => StopMode::ObjectiveGap,
        None => StopMode::GradientNorm,
    };
    let l_star = objective.min_value();
    let mut state = FwState::new(design, theta0.clone())?;
    let mut tb = TraceBuilder::new(theta0, config.record_iterates, config.record_timing);
    for k in 0..config.max_iter {
        let loss = state.loss();
        let gap = state.duality_gap();
        let grad_norm = state.leverage.norm();
        let mean = state.theta.dot(&state.leverage);
        let pgrad_norm = state.leverage.map(|d| d - mean).norm();
        let mut rec = TraceRecord {
            k,
            loss,
            r: f64::NAN,
            v_norm: gap,
            grad_norm,
            pgrad_norm,
            dtheta_norm: 0.0,
            eta: 0.0,
            eta_eff: 0.0,
            t_us: tb.elapsed_us(),
        };
        if !loss.is_finite() {
            tb.push(rec);
            return Ok(tb.finish(RunStatus::NumericalFailure, &state.theta, f64::NAN, loss, Some("non-finite log-determinant".into())));
        }
        if stop_reached(mode, config.tol, loss, l_star, gap, gap) {
            tb.push(rec);
            return Ok(tb.finish(RunStatus::Converged, &state.theta, f64::NAN, loss, None));
        }
        let before = state.theta.clone();
        let t = match frank_wolfe_step(design, &mut state, config.away_steps, config.refresh_every) {
            Ok((t, _)) => t,
            Err(e) => {
                tb.push(rec);
                return Ok(tb.finish(RunStatus::NumericalFailure, &before, f64::NAN, loss, Some(e.to_string())));
            }
        };
        rec.dtheta_norm = (&state.theta - &before).norm();
        rec.eta = t.abs().max(f64::MIN_POSITIVE);
        rec.eta_eff = rec.eta;
        rec.t_us = tb.elapsed_us();
        tb.push(rec);
        tb.push_iterate(&state.theta);
    }
    let loss = state.loss();
    Ok(tb.finish(RunStatus::BudgetExhausted, &state.theta, f64::NAN, loss, None))
}

/// Reference minimum of a D-optimal design: run Frank-Wolfe with away steps
/// until the duality gap (an upper bound on suboptimality) is below `gap_tol`.
pub fn doptimal_reference(design: &DoptimalObjective, theta0: &DVector<f64>, gap_tol: f64, max_iter: usize) -> Result<(f64, f64)> {
    let mut state = FwState::new(design, theta0.clone())?;
    for _ in 0..max_iter {
        if state.duality_gap() < gap_tol {
            break;
        }
        frank_wolfe_step(design, &mut state, true, 50)?;
    }
    state.refresh(design)?;
    let gap = state.duality_gap();
    if !(gap < gap_tol) {
        return Err(Error::Config(format!("reference solve stopped with duality gap {gap:e}")));
    }
    Ok((state.loss(), gap))
}
