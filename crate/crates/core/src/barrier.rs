//! Legendre barrier functions built from a kernel and a set of concave
//! constraint functions, plus the feasibility line search used on constrained
//! problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Scalar kernel `K` applied to each constraint value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    /// `K(s) = s ln s - s`
    Entropy,
    /// `K(s) = -ln s`
    Log,
}

impl Kernel {
    pub fn value(self, s: f64) -> f64 {
        match self {
            Kernel::Entropy => s * s.ln() - s,
            Kernel::Log => -s.ln(),
        }
    }

    pub fn d1(self, s: f64) -> f64 {
        match self {
            Kernel::Entropy => s.ln(),
            Kernel::Log => -1.0 / s,
        }
    }

    pub fn d2(self, s: f64) -> f64 {
        match self {
            Kernel::Entropy => 1.0 / s,
            Kernel::Log => 1.0 / (s * s),
        }
    }
}

/// A concave constraint function `U`; the feasible set is `U > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Constraint {
    /// `U = a . theta - b`
    Affine { normal: Vec<f64>, offset: f64 },
    /// `U = theta_i - lower`
    Bound { index: usize, lower: f64 },
    /// `U = theta_i` (positive) or `U = -theta_i` (negative)
    Sign { index: usize, positive: bool },
    /// `U = 1 - (theta - c)^T S (theta - c)` with `S` symmetric positive definite (row-major)
    Ball { center: Vec<f64>, shape: Vec<f64> },
}

impl Constraint {
    pub fn ball_identity(center: &[f64]) -> Self {
        let n = center.len();
        let shape = DMatrix::<f64>::identity(n, n);
        Constraint::Ball { center: center.to_vec(), shape: shape.as_slice().to_vec() }
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        let bad = |got| Err(Error::Dimension { expected: n, got });
        match self {
            Constraint::Affine { normal, .. } if normal.len() != n => bad(normal.len()),
            Constraint::Bound { index, .. } | Constraint::Sign { index, .. } if *index >= n => bad(*index + 1),
            Constraint::Ball { center, shape } => {
                if center.len() != n {
                    return bad(center.len());
                }
                if shape.len() != n * n {
                    return bad(shape.len());
                }
                let s = DMatrix::from_row_slice(n, n, shape);
                if linalg::asymmetry(&s) > 1e-12 || s.cholesky().is_none() {
                    return Err(Error::NotSpd { context: "ball shape matrix".into() });
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Constraint::Affine { normal, offset } => {
                normal.iter().zip(theta.iter()).map(|(a, t)| a * t).sum::<f64>() - offset
            }
            Constraint::Bound { index, lower } => theta[*index] - lower,
            Constraint::Sign { index, positive } => {
                if *positive {
                    theta[*index]
                } else {
                    -theta[*index]
                }
            }
            Constraint::Ball { center, shape } => {
                let n = center.len();
                let d = DVector::from_fn(n, |i, _| theta[i] - center[i]);
                let s = DMatrix::from_row_slice(n, n, shape);
                1.0 - d.dot(&(s * &d))
            }
        }
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        let n = theta.len();
        match self {
            Constraint::Affine { normal, .. } => DVector::from_column_slice(normal),
            Constraint::Bound { index, .. } => {
                let mut g = DVector::zeros(n);
                g[*index] = 1.0;
                g
            }
            Constraint::Sign { index, positive } => {
                let mut g = DVector::zeros(n);
                g[*index] = if *positive { 1.0 } else { -1.0 };
                g
            }
            Constraint::Ball { center, shape } => {
                let d = DVector::from_fn(n, |i, _| theta[i] - center[i]);
                let s = DMatrix::from_row_slice(n, n, shape);
                s * d * -2.0
            }
        }
    }

    /// Hessian of `U`; `None` when `U` is affine.
    pub fn hessian(&self, n: usize) -> Option<DMatrix<f64>> {
        match self {
            Constraint::Ball { shape, .. } => Some(DMatrix::from_row_slice(n, n, shape) * -2.0),
            _ => None,
        }
    }

    /// For coordinate constraints, the coordinate they act on.
    fn coordinate(&self) -> Option<usize> {
        match self {
            Constraint::Bound { index, .. } | Constraint::Sign { index, .. } => Some(*index),
            _ => None,
        }
    }

    /// Coordinates on which `U` depends.
    fn support(&self, n: usize) -> Vec<usize> {
        match self {
            Constraint::Affine { normal, .. } => (0..n).filter(|&i| normal[i] != 0.0).collect(),
            Constraint::Bound { index, .. } | Constraint::Sign { index, .. } => vec![*index],
            Constraint::Ball { .. } => (0..n).collect(),
        }
    }
}

/// A finite family of constraints defining an open feasible set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    dim: usize,
    constraints: Vec<Constraint>,
}

impl ConstraintSet {
    /// Validates dimensions, concavity data and strict feasibility of `witness`.
    pub fn new(dim: usize, constraints: Vec<Constraint>, witness: &DVector<f64>) -> Result<Self> {
        if witness.len() != dim {
            return Err(Error::Dimension { expected: dim, got: witness.len() });
        }
        for c in &constraints {
            c.check_dim(dim)?;
        }
        let set = Self { dim, constraints };
        let m = set.min_value(witness);
        if !(m > 0.0) {
            return Err(Error::InfeasibleStart(format!("witness has min constraint value {m:e}")));
        }
        Ok(set)
    }

    /// Nonnegativity constraints on every coordinate.
    pub fn nonnegative_orthant(dim: usize) -> Self {
        let constraints = (0..dim).map(|index| Constraint::Sign { index, positive: true }).collect();
        Self { dim, constraints }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn values(&self, theta: &DVector<f64>) -> Vec<f64> {
        self.constraints.iter().map(|c| c.value(theta)).collect()
    }

    /// Minimum constraint value (`+inf` for an empty set).
    pub fn min_value(&self, theta: &DVector<f64>) -> f64 {
        self.constraints.iter().map(|c| c.value(theta)).fold(f64::INFINITY, f64::min)
    }

    pub fn is_strictly_feasible(&self, theta: &DVector<f64>) -> bool {
        self.constraints.iter().all(|c| c.value(theta) > 0.0)
    }

    fn all_coordinate(&self) -> bool {
        self.constraints.iter().all(|c| c.coordinate().is_some())
    }
}

/// Legendre function `h = sum_i K(U_i) + 1/2 sum_{j in J} theta_j^2`.
///
/// The quadratic correction over `J` is added only when the kernel part alone
/// has a singular Hessian at the witness point.
#[derive(Debug, Clone)]
pub struct LegendreBarrier {
    kernel: Kernel,
    constraints: ConstraintSet,
    correction: Vec<usize>,
}

impl LegendreBarrier {
    /// Build a barrier, adding the quadratic correction if needed so that the
    /// Hessian is positive definite at `witness`.
    pub fn new(kernel: Kernel, constraints: ConstraintSet, witness: &DVector<f64>) -> Result<Self> {
        if !constraints.is_strictly_feasible(witness) {
            return Err(Error::InfeasibleStart(format!(
                "witness has min constraint value {:e}",
                constraints.min_value(witness)
            )));
        }
        let n = constraints.dim();
        let mut barrier = Self { kernel, constraints, correction: Vec::new() };
        if barrier.hessian_is_pd(witness)? {
            return Ok(barrier);
        }
        let mut covered = vec![false; n];
        for c in barrier.constraints.constraints() {
            for j in c.support(n) {
                covered[j] = true;
            }
        }
        let uncovered: Vec<usize> = (0..n).filter(|&j| !covered[j]).collect();
        if !uncovered.is_empty() {
            barrier.correction = uncovered;
            if barrier.hessian_is_pd(witness)? {
                return Ok(barrier);
            }
        }
        barrier.correction = (0..n).collect();
        Ok(barrier)
    }

    /// Build a barrier with an explicit correction set (possibly empty).
    pub fn with_correction(kernel: Kernel, constraints: ConstraintSet, correction: Vec<usize>) -> Result<Self> {
        if let Some(&j) = correction.iter().find(|&&j| j >= constraints.dim()) {
            return Err(Error::Dimension { expected: constraints.dim(), got: j + 1 });
        }
        Ok(Self { kernel, constraints, correction })
    }

    fn hessian_is_pd(&self, witness: &DVector<f64>) -> Result<bool> {
        let h = self.hessian(witness)?;
        let (lo, hi) = linalg::sym_eigen_bounds(&h);
        Ok(lo > 1e-12 * hi.abs().max(1.0))
    }

    pub fn dim(&self) -> usize {
        self.constraints.dim()
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    /// Coordinates carrying the quadratic correction.
    pub fn correction(&self) -> &[usize] {
        &self.correction
    }

    fn feasible_values(&self, theta: &DVector<f64>) -> Result<Vec<f64>> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: theta.len() });
        }
        let u = self.constraints.values(theta);
        let min_value = u.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(min_value > 0.0) {
            return Err(Error::Boundary { min_value });
        }
        Ok(u)
    }

    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        let u = self.feasible_values(theta)?;
        let k: f64 = u.iter().map(|&s| self.kernel.value(s)).sum();
        let q: f64 = self.correction.iter().map(|&j| 0.5 * theta[j] * theta[j]).sum();
        Ok(k + q)
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.feasible_values(theta)?;
        let mut g = DVector::zeros(self.dim());
        for (c, &s) in self.constraints.constraints().iter().zip(&u) {
            g.axpy(self.kernel.d1(s), &c.gradient(theta), 1.0);
        }
        for &j in &self.correction {
            g[j] += theta[j];
        }
        Ok(g)
    }

    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        let u = self.feasible_values(theta)?;
        let mut h = DMatrix::zeros(n, n);
        for (c, &s) in self.constraints.constraints().iter().zip(&u) {
            let du = c.gradient(theta);
            h.ger(self.kernel.d2(s), &du, &du, 1.0);
            if let Some(d2u) = c.hessian(n) {
                h += d2u * self.kernel.d1(s);
            }
        }
        for &j in &self.correction {
            h[(j, j)] += 1.0;
        }
        Ok(h)
    }

    /// Diagonal of the Hessian when every constraint is a coordinate constraint.
    pub fn diagonal_hessian(&self, theta: &DVector<f64>) -> Result<Option<DVector<f64>>> {
        if !self.constraints.all_coordinate() {
            return Ok(None);
        }
        let u = self.feasible_values(theta)?;
        let mut d = DVector::zeros(self.dim());
        for (c, &s) in self.constraints.constraints().iter().zip(&u) {
            d[c.coordinate().unwrap()] += self.kernel.d2(s);
        }
        for &j in &self.correction {
            d[j] += 1.0;
        }
        Ok(Some(d))
    }

    /// `H(theta)^{-1} g`, using the closed-form diagonal inverse when available.
    pub fn hess_inv_apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        if let Some(d) = self.diagonal_hessian(theta)? {
            if let Some(j) = d.iter().position(|&x| !(x > 0.0)) {
                return Err(Error::NotSpd { context: format!("barrier Hessian has zero diagonal at coordinate {j}") });
            }
            return Ok(g.component_div(&d));
        }
        let h = self.hessian(theta)?;
        linalg::spd_solve(&h, g, 0.0, "barrier Hessian")
    }

    /// Bregman divergence `h(x) - h(y) - <grad h(y), x - y>`.
    pub fn bregman_divergence(&self, x: &DVector<f64>, y: &DVector<f64>) -> Result<f64> {
        Ok(self.value(x)? - self.value(y)? - self.gradient(y)?.dot(&(x - y)))
    }
}

/// Step candidate of the energy update along `-v` with base step `eta`.
pub fn energy_candidate(theta: &DVector<f64>, v: &DVector<f64>, r: f64, eta: f64) -> DVector<f64> {
    let scale = 2.0 * eta * r / (1.0 + 2.0 * eta * v.norm_squared());
    theta - v * scale
}

/// Outcome of [`feasible_line_search`] when no step is admissible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoAdmissibleStep {
    pub smallest_tried: f64,
}

/// Largest base step, up to a factor of two, for which every constraint keeps
/// at least the fraction `eps` of its current value (strictly positive when
/// `eps == 0`). Returns `eta_star` itself when it is admissible.
pub fn feasible_line_search(
    theta: &DVector<f64>,
    v: &DVector<f64>,
    r: f64,
    constraints: &ConstraintSet,
    eps: f64,
    eta_star: f64,
    eta_min: f64,
) -> std::result::Result<f64, NoAdmissibleStep> {
    let u0 = constraints.values(theta);
    let admissible = |eta: f64| {
        let cand = energy_candidate(theta, v, r, eta);
        constraints
            .constraints()
            .iter()
            .zip(&u0)
            .all(|(c, &u)| {
                let un = c.value(&cand);
                un > 0.0 && un >= eps * u
            })
    };
    if admissible(eta_star) {
        return Ok(eta_star);
    }
    let mut hi = eta_star;
    let mut lo = 0.5 * eta_star;
    let mut iters = 0;
    while !admissible(lo) {
        hi = lo;
        lo *= 0.5;
        iters += 1;
        if lo < eta_min {
            return Err(NoAdmissibleStep { smallest_tried: lo });
        }
    }
    while iters < 30 {
        let mid = 0.5 * (lo + hi);
        if admissible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        iters += 1;
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ball_barrier() -> LegendreBarrier {
        let w = DVector::from_vec(vec![0.3, -0.2]);
        let cs = ConstraintSet::new(2, vec![Constraint::ball_identity(&[0.0, 0.0])], &w).unwrap();
        LegendreBarrier::new(Kernel::Entropy, cs, &w).unwrap()
    }

    #[test]
    fn ball_gradient_vanishes_at_center() {
        let b = ball_barrier();
        let g = b.gradient(&DVector::zeros(2)).unwrap();
        assert_eq!(g.norm(), 0.0);
        assert!(b.correction().is_empty());
    }

    #[test]
    fn barrier_rejects_boundary_points() {
        let b = ball_barrier();
        let on = DVector::from_vec(vec![1.0, 0.0]);
        assert!(matches!(b.hessian(&on), Err(Error::Boundary { .. })));
    }

    #[test]
    fn sign_constraints_on_one_coordinate_get_corrected() {
        let w = DVector::from_vec(vec![1.0, 5.0]);
        let cs = ConstraintSet::new(2, vec![Constraint::Sign { index: 0, positive: true }], &w).unwrap();
        let b = LegendreBarrier::new(Kernel::Log, cs, &w).unwrap();
        assert_eq!(b.correction(), &[1]);
        let d = b.diagonal_hessian(&w).unwrap().unwrap();
        assert_eq!(d.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn bregman_of_entropy_on_orthant_is_kl() {
        let n = 3;
        let x: DVector<f64> = DVector::from_vec(vec![0.2, 0.5, 0.3]);
        let y: DVector<f64> = DVector::from_vec(vec![0.4, 0.4, 0.2]);
        let b = LegendreBarrier::with_correction(Kernel::Entropy, ConstraintSet::nonnegative_orthant(n), vec![]).unwrap();
        let kl: f64 = (0..n).map(|i| x[i] * (x[i] / y[i]).ln() - x[i] + y[i]).sum();
        assert_relative_eq!(b.bregman_divergence(&x, &y).unwrap(), kl, epsilon = 1e-14);
    }

    #[test]
    fn line_search_stops_at_fraction_of_boundary() {
        // U = theta, theta = 1, v = 1, r = 1: candidate 1 - 2 eta / (1 + 2 eta) >= 1/2 iff eta <= 1/2.
        let cs = ConstraintSet::new(1, vec![Constraint::Sign { index: 0, positive: true }], &DVector::from_element(1, 1.0)).unwrap();
        let theta = DVector::from_element(1, 1.0);
        let v = DVector::from_element(1, 1.0);
        let eta = feasible_line_search(&theta, &v, 1.0, &cs, 0.5, 10.0, 1e-12).unwrap();
        assert!(eta <= 0.5 && eta > 0.5 * (1.0 - 1e-6), "eta = {eta}");
        assert_eq!(feasible_line_search(&theta, &v, 1.0, &cs, 0.5, 0.1, 1e-12).unwrap(), 0.1);
    }
}
