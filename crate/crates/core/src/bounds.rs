//! Step-size thresholds, the discrete energy identity and a-posteriori checks
//! of the convergence-rate bounds against a recorded trace.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::ObjectiveSpec;
use crate::stepper::RunTrace;

/// Absolute slack allowed on every rate-bound comparison.
pub const BOUND_SLACK: f64 = 1e-9;

/// Constants of the objective and metric entering the step-size and rate bounds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SmoothnessProfile {
    /// Smoothness constant of `L`.
    pub alpha: f64,
    /// Lower eigenvalue bound of the metric along the trajectory.
    pub lambda1: f64,
    /// Upper eigenvalue bound of the metric along the trajectory.
    pub lambdan: f64,
    /// Lower bound of `l` over the region of interest.
    pub l_star: f64,
}

impl SmoothnessProfile {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha >= 0.0
            && self.lambda1 > 0.0
            && self.lambdan >= self.lambda1
            && self.l_star > 0.0
            && [self.alpha, self.lambda1, self.lambdan, self.l_star].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid smoothness profile {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepBounds {
    /// Threshold below which the energy stays bounded away from zero.
    pub eta_s: f64,
    /// Simplified threshold for `r0 = l(theta0)`.
    pub eta_0: f64,
    /// `min(eta_s, eta_0)`.
    pub safe: f64,
}

/// Step thresholds for initial energy `r0` and `l0 = l(theta0)`. With
/// `alpha = 0` both are infinite; `eta_s <= 0` means no step is guaranteed.
pub fn compute_step_bounds(profile: &SmoothnessProfile, l0: f64, r0: f64) -> Result<StepBounds> {
    profile.validate()?;
    if !(r0 > 0.0) || !(l0 > 0.0) {
        return Err(Error::Config(format!("r0 = {r0} and l(theta0) = {l0} must be positive")));
    }
    let SmoothnessProfile { alpha, lambda1, l_star, .. } = *profile;
    if alpha == 0.0 {
        return Ok(StepBounds { eta_s: f64::INFINITY, eta_0: f64::INFINITY, safe: f64::INFINITY });
    }
    let eta_s = 4.0 * l_star * lambda1 / (alpha * r0 * r0) * (r0 - (l0 - l_star) / lambda1);
    let eta_0 = lambda1 * l_star / (alpha * r0);
    Ok(StepBounds { eta_s, eta_0, safe: eta_s.min(eta_0) })
}

/// Guaranteed lower bound on the energy when `eta < eta_s`.
pub fn energy_floor(profile: &SmoothnessProfile, r0: f64, eta_s: f64, eta: f64) -> f64 {
    profile.alpha * r0 * r0 / (4.0 * profile.l_star * profile.lambda1) * (eta_s - eta)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnergyReport {
    /// Largest `|r_{k+1}^2 - r_k^2 + (r_{k+1} - r_k)^2 + |dtheta|^2 / eta_k| / max(r_k^2, 1)`.
    pub max_residual: f64,
    pub monotone: bool,
    /// `sum_k |theta_{k+1} - theta_k|^2`.
    pub path_length: f64,
    /// `max_k eta_k * r0^2`.
    pub path_bound: f64,
    pub steps: usize,
}

impl EnergyReport {
    pub fn path_ok(&self) -> bool {
        self.path_length <= self.path_bound * (1.0 + 1e-12)
    }
}

/// Check the discrete energy identity and its consequences on a trace.
pub fn check_energy_identity(trace: &RunTrace) -> Result<EnergyReport> {
    let r = trace.energy_sequence();
    let steps: Vec<_> = trace.records.iter().filter(|x| x.eta > 0.0).collect();
    if r.iter().any(|x| !x.is_finite()) {
        return Err(Error::Unsupported("trace has no energy variable".into()));
    }
    let mut max_residual: f64 = 0.0;
    let mut monotone = true;
    let mut path_length = 0.0;
    let mut eta_max: f64 = 0.0;
    for (i, rec) in steps.iter().enumerate() {
        let (rk, rn) = (r[i], r[i + 1]);
        let d2 = rec.dtheta_norm * rec.dtheta_norm;
        let res = (rn * rn - rk * rk + (rn - rk) * (rn - rk) + d2 / rec.eta).abs() / (rk * rk).max(1.0);
        max_residual = max_residual.max(res);
        monotone &= rn <= rk;
        path_length += d2;
        eta_max = eta_max.max(rec.eta);
    }
    let r0 = r.first().copied().unwrap_or(0.0);
    Ok(EnergyReport { max_residual, monotone, path_length, path_bound: eta_max * r0 * r0, steps: steps.len() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateRegime {
    /// Smooth nonconvex: bound on the smallest (projected) gradient norm.
    General,
    /// Polyak-Lojasiewicz: linear decay of the objective gap.
    Pl,
    /// Convex with known minimizer: `O(1 / (k r_k))` decay.
    Convex,
    /// PL inequality in terms of the projected gradient.
    ProjectedPl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundCheck {
    pub k: usize,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport {
    pub regime: RateRegime,
    pub checks: Vec<BoundCheck>,
    /// `L_k <= L_0 + alpha eta r0^2 / 2` checks, present when `alpha > 0`.
    pub envelope: Vec<BoundCheck>,
    /// Smallest `rhs - lhs` over all checks.
    pub tightest_margin: f64,
}

impl BoundReport {
    pub fn violations(&self) -> usize {
        self.checks.iter().chain(&self.envelope).filter(|c| !c.pass).count()
    }

    pub fn all_pass(&self) -> bool {
        self.violations() == 0
    }
}

fn check(k: usize, lhs: f64, rhs: f64) -> BoundCheck {
    BoundCheck { k, lhs, rhs, pass: lhs <= rhs + BOUND_SLACK }
}

/// Verify the rate bound of `regime` at every iteration of an energy trace.
///
/// Variable base steps (line search) are handled by using the smallest base
/// step taken so far, which keeps every bound valid.
pub fn check_rate_bounds(
    trace: &RunTrace,
    objective: &ObjectiveSpec,
    profile: &SmoothnessProfile,
    regime: RateRegime,
) -> Result<BoundReport> {
    profile.validate()?;
    let recs = &trace.records;
    let Some(first) = recs.first() else {
        return Ok(BoundReport { regime, checks: vec![], envelope: vec![], tightest_margin: f64::INFINITY });
    };
    if !first.r.is_finite() {
        return Err(Error::Unsupported("trace has no energy variable".into()));
    }
    let c = objective.c;
    let r0 = first.r;
    let l0 = objective.energy_root(first.loss)?;
    let lam_n = profile.lambdan;
    let l_min = || objective.min_value().ok_or(Error::MissingMetadata { regime: regime_name(regime), missing: "L*" });

    let mut checks = Vec::new();
    let mut eta_min = f64::INFINITY;
    let mut eta_max: f64 = 0.0;
    let mut min_g2 = f64::INFINITY;
    let mut max_loss = f64::NEG_INFINITY;
    let mut envelope = Vec::new();

    let pl_setup = match regime {
        RateRegime::Pl | RateRegime::ProjectedPl => {
            let mu = objective.mu.ok_or(Error::MissingMetadata { regime: regime_name(regime), missing: "mu" })?;
            Some((mu, l_min()?))
        }
        _ => None,
    };
    let convex_setup = match regime {
        RateRegime::Convex => {
            let theta_star = objective
                .optimum
                .as_ref()
                .and_then(|o| o.theta.clone())
                .ok_or(Error::MissingMetadata { regime: "convex", missing: "theta*" })?;
            let theta0 = trace
                .iterates
                .as_ref()
                .and_then(|it| it.first())
                .ok_or(Error::MissingMetadata { regime: "convex", missing: "recorded iterates" })?;
            let dist2: f64 = theta0.iter().zip(theta_star.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            Some((dist2, l_min()?))
        }
        _ => None,
    };

    for (k, rec) in recs.iter().enumerate() {
        let rk = rec.r;
        let kf = k as f64;
        match regime {
            RateRegime::General if k >= 1 => {
                let rhs = 2.0 * r0 * lam_n * lam_n / (eta_min * rk * kf) * (max_loss + c);
                checks.push(check(k, min_g2, rhs));
            }
            RateRegime::Pl | RateRegime::ProjectedPl => {
                let (mu, ls) = pl_setup.unwrap();
                let c0 = if k == 0 { 0.0 } else { mu * eta_min / l0 };
                let rhs = (-c0 * kf * rk / lam_n).exp() * (first.loss - ls);
                checks.push(check(k, rec.loss - ls, rhs));
            }
            RateRegime::Convex if k >= 1 => {
                let (dist2, ls) = convex_setup.unwrap();
                let c1 = 2.0 * l0 / eta_min;
                let rhs = c1 * lam_n * dist2 / (kf * rk);
                checks.push(check(k, rec.loss - ls, rhs));
            }
            _ => {}
        }
        if profile.alpha > 0.0 && k >= 1 {
            let rhs = first.loss + profile.alpha * eta_max * r0 * r0 / 2.0;
            envelope.push(check(k, rec.loss, rhs));
        }
        if rec.eta > 0.0 {
            eta_min = eta_min.min(rec.eta);
            eta_max = eta_max.max(rec.eta);
        }
        min_g2 = min_g2.min(rec.pgrad_norm * rec.pgrad_norm);
        max_loss = max_loss.max(rec.loss);
    }
    let tightest_margin = checks
        .iter()
        .chain(&envelope)
        .map(|c| c.rhs - c.lhs)
        .fold(f64::INFINITY, f64::min);
    Ok(BoundReport { regime, checks, envelope, tightest_margin })
}

fn regime_name(r: RateRegime) -> &'static str {
    match r {
        RateRegime::General => "general",
        RateRegime::Pl => "pl",
        RateRegime::Convex => "convex",
        RateRegime::ProjectedPl => "projected_pl",
    }
}
