//! The energy-adaptive preconditioned gradient update and its driver loop.

use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::barrier::{feasible_line_search, ConstraintSet};
use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;
use crate::precond::{AffineConstraint, Preconditioner};

/// Iterate and energy variable.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyState {
    pub theta: DVector<f64>,
    pub r: f64,
    pub k: usize,
}

/// One energy update with direction `v = T grad l` and base step `eta`:
/// `r' = r / (1 + 2 eta |v|^2)`, `theta' = theta - 2 eta r' v`.
pub fn aepg_step(state: &EnergyState, v: &DVector<f64>, eta: f64) -> Result<EnergyState> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Config(format!("step size must be positive and finite, got {eta}")));
    }
    if v.len() != state.theta.len() {
        return Err(Error::Dimension { expected: state.theta.len(), got: v.len() });
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("update direction".into()));
    }
    let r = state.r / (1.0 + 2.0 * eta * v.norm_squared());
    let theta = &state.theta - v * (2.0 * eta * r);
    Ok(EnergyState { theta, r, k: state.k + 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMode {
    /// `|L - L*| < tol`
    ObjectiveGap,
    /// `|T grad L| < tol`
    GradientNorm,
    /// `|P^T grad L| < tol`
    ProjectedGradientNorm,
    /// Run the full budget.
    IterationBudget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    BudgetExhausted,
    InfeasibleStep,
    NumericalFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AepgConfig {
    /// Base step size.
    pub eta: f64,
    /// Initial energy; defaults to `l(theta0)`.
    pub r0: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
    /// Defaults to the objective gap when `L*` is known and the gradient norm otherwise.
    pub stop_mode: Option<StopMode>,
    /// Fraction of each constraint value a step must retain.
    pub eps_feas: f64,
    /// Trial step for the feasibility line search; defaults to `eta`.
    pub eta_star: Option<f64>,
    /// Smallest base step the line search will try.
    pub eta_min: f64,
    pub record_iterates: bool,
    pub record_timing: bool,
}

impl Default for AepgConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            r0: None,
            max_iter: 10_000,
            tol: 1e-8,
            stop_mode: None,
            eps_feas: 0.0,
            eta_star: None,
            eta_min: 1e-12,
            record_iterates: false,
            record_timing: false,
        }
    }
}

impl AepgConfig {
    pub fn with_eta(eta: f64) -> Self {
        Self { eta, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("eta must be positive and finite, got {}", self.eta)));
        }
        if let Some(r0) = self.r0 {
            if !(r0 > 0.0) || !r0.is_finite() {
                return Err(Error::Config(format!("r0 must be positive and finite, got {r0}")));
            }
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tol must be nonnegative, got {}", self.tol)));
        }
        if !(0.0..1.0).contains(&self.eps_feas) {
            return Err(Error::Config(format!("eps_feas must lie in [0, 1), got {}", self.eps_feas)));
        }
        if let Some(s) = self.eta_star {
            if !(s >= self.eta) || !s.is_finite() {
                return Err(Error::Config(format!("eta_star ({s}) must be finite and at least eta ({})", self.eta)));
            }
        }
        Ok(())
    }

    pub fn resolve_stop_mode(&self, objective: &ObjectiveSpec) -> Result<StopMode> {
        match self.stop_mode {
            Some(StopMode::ObjectiveGap) if objective.optimum.is_none() => {
                Err(Error::Config("objective_gap stopping needs a known minimum".into()))
            }
            Some(m) => Ok(m),
            None if objective.optimum.is_some() => Ok(StopMode::ObjectiveGap),
            None => Ok(StopMode::GradientNorm),
        }
    }
}

/// Constraints an iteration must respect.
#[derive(Debug, Clone, Default)]
pub struct Feasibility {
    /// Inequalities kept strictly positive by the line search.
    pub constraints: Option<ConstraintSet>,
    /// Equalities checked at the start point.
    pub affine: Option<AffineConstraint>,
}

impl Feasibility {
    pub fn check_start(&self, theta0: &DVector<f64>) -> Result<()> {
        if let Some(cs) = &self.constraints {
            let m = cs.min_value(theta0);
            if !(m > 0.0) {
                return Err(Error::InfeasibleStart(format!("min constraint value {m:e}")));
            }
        }
        if let Some(a) = &self.affine {
            let res = a.residual(theta0);
            if res > 1e-9 {
                return Err(Error::InfeasibleStart(format!("affine residual {res:e}")));
            }
        }
        Ok(())
    }
}

/// Per-iteration record. Quantities refer to `theta_k`; step fields describe
/// the move to `theta_{k+1}` and are zero on the terminal record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceRecord {
    pub k: usize,
    #[serde(rename = "L")]
    pub loss: f64,
    /// Energy `r_k` (NaN for methods without an energy variable).
    pub r: f64,
    /// `|T grad l|`, or the analogous step direction norm.
    pub v_norm: f64,
    /// `|grad L|`.
    pub grad_norm: f64,
    /// `|P^T grad L|`.
    pub pgrad_norm: f64,
    pub dtheta_norm: f64,
    /// Base step actually used.
    pub eta: f64,
    /// Effective step `eta r_{k+1} / l(theta_k)`.
    pub eta_eff: f64,
    /// Microseconds since start (zero unless timing is recorded).
    pub t_us: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub status: RunStatus,
    pub final_theta: Vec<f64>,
    /// Energy after the last accepted step.
    pub final_r: f64,
    pub final_loss: f64,
    /// `theta_0, ..., theta_last` when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterates: Option<Vec<Vec<f64>>>,
    /// Description of the failure behind a non-converged status.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl RunTrace {
    /// Number of steps taken.
    pub fn iterations(&self) -> usize {
        self.records.iter().filter(|r| r.eta > 0.0).count()
    }

    pub fn converged(&self) -> bool {
        self.status == RunStatus::Converged
    }

    /// `r_0, ..., r_K` including the energy after the last step.
    pub fn energy_sequence(&self) -> Vec<f64> {
        let mut r: Vec<f64> = self.records.iter().map(|x| x.r).collect();
        if self.records.last().is_some_and(|x| x.eta > 0.0) {
            r.push(self.final_r);
        }
        r
    }

    pub fn base_steps(&self) -> Vec<f64> {
        self.records.iter().filter(|x| x.eta > 0.0).map(|x| x.eta).collect()
    }
}

pub(crate) struct TraceBuilder {
    pub records: Vec<TraceRecord>,
    iterates: Option<Vec<Vec<f64>>>,
    start: Instant,
    timing: bool,
}

impl TraceBuilder {
    pub fn new(theta0: &DVector<f64>, record_iterates: bool, timing: bool) -> Self {
        Self {
            records: Vec::new(),
            iterates: record_iterates.then(|| vec![theta0.as_slice().to_vec()]),
            start: Instant::now(),
            timing,
        }
    }

    pub fn elapsed_us(&self) -> u64 {
        if self.timing {
            self.start.elapsed().as_micros() as u64
        } else {
            0
        }
    }

    pub fn push(&mut self, rec: TraceRecord) {
        self.records.push(rec);
    }

    pub fn push_iterate(&mut self, theta: &DVector<f64>) {
        if let Some(it) = self.iterates.as_mut() {
            it.push(theta.as_slice().to_vec());
        }
    }

    pub fn finish(self, status: RunStatus, theta: &DVector<f64>, r: f64, loss: f64, message: Option<String>) -> RunTrace {
        RunTrace {
            records: self.records,
            status,
            final_theta: theta.as_slice().to_vec(),
            final_r: r,
            final_loss: loss,
            iterates: self.iterates,
            message,
        }
    }
}

pub(crate) fn stop_reached(
    mode: StopMode,
    tol: f64,
    loss: f64,
    optimum: Option<f64>,
    tgrad_norm: f64,
    pgrad_norm: f64,
) -> bool {
    match mode {
        StopMode::ObjectiveGap => optimum.is_some_and(|l| (loss - l).abs() < tol),
        StopMode::GradientNorm => tgrad_norm < tol,
        StopMode::ProjectedGradientNorm => pgrad_norm < tol,
        StopMode::IterationBudget => false,
    }
}

fn finite(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Run the energy-adaptive preconditioned gradient method from `theta0`.
///
/// Errors are returned only for invalid input (configuration, dimensions,
/// infeasible start, non-real `l(theta0)`); failures during the run end the
/// trace with the corresponding [`RunStatus`].
pub fn run_aepg(
    objective: &ObjectiveSpec,
    precond: &dyn Preconditioner,
    theta0: &DVector<f64>,
    config: &AepgConfig,
    feasibility: Option<&Feasibility>,
) -> Result<RunTrace> {
    config.validate()?;
    let n = objective.dim();
    if theta0.len() != n {
        return Err(Error::Dimension { expected: n, got: theta0.len() });
    }
    if precond.dim() != n {
        return Err(Error::Dimension { expected: n, got: precond.dim() });
    }
    if let Some(f) = feasibility {
        f.check_start(theta0)?;
    }
    let mode = config.resolve_stop_mode(objective)?;
    let l_star = objective.min_value();
    let constraints = feasibility.and_then(|f| f.constraints.as_ref()).filter(|c| !c.is_empty());
    let eta_star = config.eta_star.unwrap_or(config.eta);

    let (mut loss, mut grad) = objective.objective.value_and_gradient(theta0);
    if !loss.is_finite() || !finite(&grad) {
        return Err(Error::NonFinite("loss or gradient at the initial point".into()));
    }
    objective.energy_root(loss)?;
    let mut theta = theta0.clone();
    let mut r = config.r0.unwrap_or_else(|| (loss + objective.c).sqrt());
    let mut tb = TraceBuilder::new(theta0, config.record_iterates, config.record_timing);

    let terminal = |k, loss, r, v_norm, grad_norm, pgrad_norm, t_us| TraceRecord {
        k,
        loss,
        r,
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
        let l = match objective.energy_root(loss) {
            Ok(l) => l,
            Err(e) => {
                tb.push(terminal(k, loss, r, f64::NAN, grad_norm, f64::NAN, tb.elapsed_us()));
                return Ok(tb.finish(RunStatus::NumericalFailure, &theta, r, loss, Some(e.to_string())));
            }
        };
        let grad_l = &grad / (2.0 * l);
        let (v, pgrad) = match precond
            .apply(&theta, &grad_l)
            .and_then(|v| Ok((v, precond.project_gradient(&theta, &grad)?)))
        {
            Ok(x) => x,
            Err(e) => {
                let status = match e {
                    Error::Boundary { .. } | Error::OffSimplex { .. } => RunStatus::InfeasibleStep,
                    _ => RunStatus::NumericalFailure,
                };
                tb.push(terminal(k, loss, r, f64::NAN, grad_norm, f64::NAN, tb.elapsed_us()));
                return Ok(tb.finish(status, &theta, r, loss, Some(e.to_string())));
            }
        };
        let v_norm = v.norm();
        let pgrad_norm = pgrad.norm();
        if !v_norm.is_finite() {
            tb.push(terminal(k, loss, r, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
            return Ok(tb.finish(RunStatus::NumericalFailure, &theta, r, loss, Some("non-finite direction".into())));
        }
        if stop_reached(mode, config.tol, loss, l_star, 2.0 * l * v_norm, pgrad_norm) {
            tb.push(terminal(k, loss, r, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
            return Ok(tb.finish(RunStatus::Converged, &theta, r, loss, None));
        }

        let eta = match constraints {
            Some(cs) if v_norm > 0.0 => {
                match feasible_line_search(&theta, &v, r, cs, config.eps_feas, eta_star, config.eta_min) {
                    Ok(eta) => eta,
                    Err(fail) => {
                        tb.push(terminal(k, loss, r, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
                        let msg = format!("no admissible step above {:e}", fail.smallest_tried);
                        return Ok(tb.finish(RunStatus::InfeasibleStep, &theta, r, loss, Some(msg)));
                    }
                }
            }
            _ => config.eta,
        };
        let state = EnergyState { theta: theta.clone(), r, k };
        let next = aepg_step(&state, &v, eta)?;
        let (new_loss, new_grad) = objective.objective.value_and_gradient(&next.theta);
        if !new_loss.is_finite() || !finite(&new_grad) {
            tb.push(terminal(k, loss, r, v_norm, grad_norm, pgrad_norm, tb.elapsed_us()));
            return Ok(tb.finish(
                RunStatus::NumericalFailure,
                &theta,
                r,
                loss,
                Some("non-finite loss or gradient at the next iterate".into()),
            ));
        }
        tb.push(TraceRecord {
            k,
            loss,
            r,
            v_norm,
            grad_norm,
            pgrad_norm,
            dtheta_norm: (&next.theta - &theta).norm(),
            eta,
            eta_eff: eta * next.r / l,
            t_us: tb.elapsed_us(),
        });
        tb.push_iterate(&next.theta);
        theta = next.theta;
        r = next.r;
        loss = new_loss;
        grad = new_grad;
    }
    Ok(tb.finish(RunStatus::BudgetExhausted, &theta, r, loss, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::FnObjective;
    use crate::precond::Identity;
    use std::sync::Arc;

    fn quad1d() -> ObjectiveSpec {
        let obj = Arc::new(FnObjective::new(1, |x: &DVector<f64>| 0.5 * x[0] * x[0], |x: &DVector<f64>| x.clone()));
        ObjectiveSpec::with_known_minimum(obj, Some(DVector::zeros(1)), 0.0)
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // L = x^2/2, c = 1, x = 2: l = sqrt(3), grad l = 2 / (2 sqrt 3), eta = 0.5, r = sqrt 3.
        let l = 3f64.sqrt();
        let v = DVector::from_element(1, 1.0 / l);
        let st = EnergyState { theta: DVector::from_element(1, 2.0), r: l, k: 0 };
        let next = aepg_step(&st, &v, 0.5).unwrap();
        let r1 = l / (1.0 + 1.0 / 3.0);
        assert!((next.r - r1).abs() < 1e-15);
        assert!((next.theta[0] - (2.0 - r1 / l)).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_gives_empty_trace() {
        let cfg = AepgConfig { max_iter: 0, ..AepgConfig::with_eta(0.1) };
        let t = run_aepg(&quad1d(), &Identity::new(1), &DVector::from_element(1, 1.0), &cfg, None).unwrap();
        assert!(t.records.is_empty());
        assert_eq!(t.status, RunStatus::BudgetExhausted);
    }

    #[test]
    fn stationary_start_converges_immediately() {
        let cfg = AepgConfig::with_eta(0.1);
        let t = run_aepg(&quad1d(), &Identity::new(1), &DVector::zeros(1), &cfg, None).unwrap();
        assert_eq!(t.records.len(), 1);
        assert_eq!(t.status, RunStatus::Converged);
        assert_eq!(t.iterations(), 0);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = AepgConfig::with_eta(-1.0);
        assert!(run_aepg(&quad1d(), &Identity::new(1), &DVector::zeros(1), &cfg, None).is_err());
        let cfg = AepgConfig { eta_star: Some(0.01), ..AepgConfig::with_eta(0.1) };
        assert!(cfg.validate().is_err());
    }
}
