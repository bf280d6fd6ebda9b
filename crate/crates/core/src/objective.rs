use std::fmt;
use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// A differentiable loss `L : R^n -> R`.
///
/// Implementations may return non-finite values outside their domain; the
/// optimizers treat that as a numerical failure rather than panicking.
pub trait Objective: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, theta: &DVector<f64>) -> f64;

    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;

    fn value_and_gradient(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        (self.value(theta), self.gradient(theta))
    }
}

/// Objective built from a pair of closures.
pub struct FnObjective<F, G> {
    dim: usize,
    f: F,
    g: G,
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&DVector<f64>) -> f64 + Send + Sync,
    G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    pub fn new(dim: usize, f: F, g: G) -> Self {
        Self { dim, f, g }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&DVector<f64>) -> f64 + Send + Sync,
    G: Fn(&DVector<f64>) -> DVector<f64> + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        (self.f)(theta)
    }
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        (self.g)(theta)
    }
}

/// Known (or reference) minimum of an objective.
#[derive(Debug, Clone)]
pub struct Optimum {
    /// Minimizer, if known.
    pub theta: Option<DVector<f64>>,
    /// Minimum value `L*` (or a certified reference value).
    pub value: f64,
}

/// An objective together with the energy shift `c` and optional metadata used
/// by stopping rules and rate-bound checks.
#[derive(Clone)]
pub struct ObjectiveSpec {
    pub objective: Arc<dyn Objective>,
    /// Shift making `L + c > 0` on the region of interest.
    pub c: f64,
    pub optimum: Option<Optimum>,
    /// Smoothness constant of `L` (bound on the Hessian norm).
    pub alpha: Option<f64>,
    /// (Projected) Polyak-Lojasiewicz constant.
    pub mu: Option<f64>,
}

impl fmt::Debug for ObjectiveSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectiveSpec")
            .field("dim", &self.objective.dim())
            .field("c", &self.c)
            .field("optimum", &self.optimum)
            .field("alpha", &self.alpha)
            .field("mu", &self.mu)
            .finish()
    }
}

impl ObjectiveSpec {
    pub fn new(objective: Arc<dyn Objective>, c: f64) -> Self {
        Self { objective, c, optimum: None, alpha: None, mu: None }
    }

    /// Attach a known minimum and pick the default shift `c = 1 - L*`.
    pub fn with_known_minimum(objective: Arc<dyn Objective>, theta: Option<DVector<f64>>, value: f64) -> Self {
        Self { objective, c: 1.0 - value, optimum: Some(Optimum { theta, value }), alpha: None, mu: None }
    }

    pub fn with_c(mut self, c: f64) -> Self {
        self.c = c;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = Some(mu);
        self
    }

    pub fn dim(&self) -> usize {
        self.objective.dim()
    }

    pub fn min_value(&self) -> Option<f64> {
        self.optimum.as_ref().map(|o| o.value)
    }

    /// `l = sqrt(L + c)` for a loss value, or an error when it is not real.
    pub fn energy_root(&self, loss: f64) -> Result<f64> {
        let s = loss + self.c;
        if s > 0.0 && s.is_finite() {
            Ok(s.sqrt())
        } else {
            Err(Error::NonPositiveShift { value: s })
        }
    }
}

/// Central finite-difference gradient with per-coordinate step `rel * max(|x_i|, 1)`.
pub fn finite_difference_gradient(obj: &dyn Objective, theta: &DVector<f64>, rel: f64) -> DVector<f64> {
    let mut g = DVector::zeros(theta.len());
    let mut x = theta.clone();
    for i in 0..theta.len() {
        let h = rel * theta[i].abs().max(1.0);
        let xi = theta[i];
        x[i] = xi + h;
        let fp = obj.value(&x);
        x[i] = xi - h;
        let fm = obj.value(&x);
        x[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}
