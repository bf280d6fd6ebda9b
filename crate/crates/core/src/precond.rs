//! Preconditioners `T(theta)` mapping a gradient to an update direction.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::barrier::{ConstraintSet, LegendreBarrier};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::Objective;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecondKind {
    Identity,
    FixedSpd,
    HessianRiemannian,
    Simplex,
    Wasserstein,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrecondInfo {
    pub kind: PrecondKind,
    pub dimension: usize,
    /// Eigenvalue bounds of `T` when they do not depend on `theta`.
    pub spectral_bounds: Option<(f64, f64)>,
}

/// A (possibly state dependent) symmetric positive semidefinite operator.
pub trait Preconditioner: Send + Sync {
    fn dim(&self) -> usize;

    fn kind(&self) -> PrecondKind;

    /// `T(theta) g`.
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>>;

    /// Smallest and largest eigenvalue of the metric `T(theta)^{-1}` (on the
    /// tangent space for projected variants), when cheaply available.
    fn metric_bounds(&self, _theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        Ok(None)
    }

    /// Projected gradient `P(theta)^T g`; the identity without affine constraints.
    fn project_gradient(&self, _theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(g.clone())
    }

    fn describe(&self) -> PrecondInfo {
        PrecondInfo { kind: self.kind(), dimension: self.dim(), spectral_bounds: None }
    }
}

fn check_dims(n: usize, theta: &DVector<f64>, g: &DVector<f64>) -> Result<()> {
    for len in [theta.len(), g.len()] {
        if len != n {
            return Err(Error::Dimension { expected: n, got: len });
        }
    }
    Ok(())
}

/// `T = I`; the energy update reduces to plain adaptive gradient descent.
#[derive(Debug, Clone)]
pub struct Identity {
    pub n: usize,
}

impl Identity {
    pub fn new(n: usize) -> Self {
        Self { n }
    }
}

impl Preconditioner for Identity {
    fn dim(&self) -> usize {
        self.n
    }
    fn kind(&self) -> PrecondKind {
        PrecondKind::Identity
    }
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self.n, theta, g)?;
        Ok(g.clone())
    }
    fn metric_bounds(&self, _theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        Ok(Some((1.0, 1.0)))
    }
    fn describe(&self) -> PrecondInfo {
        PrecondInfo { kind: PrecondKind::Identity, dimension: self.n, spectral_bounds: Some((1.0, 1.0)) }
    }
}

/// Constant metric `A` (symmetric positive definite), so `T = A^{-1}`.
#[derive(Debug, Clone)]
pub struct FixedSpd {
    a: DMatrix<f64>,
    chol: nalgebra::linalg::Cholesky<f64, nalgebra::Dyn>,
    /// Eigenvalue range of `A`.
    bounds: (f64, f64),
}

impl FixedSpd {
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || linalg::asymmetry(&a) > 1e-12 {
            return Err(Error::NotSpd { context: "fixed preconditioner must be symmetric".into() });
        }
        let bounds = linalg::sym_eigen_bounds(&a);
        if !(bounds.0 > 0.0) {
            return Err(Error::NotSpd { context: format!("fixed preconditioner has eigenvalue {:e}", bounds.0) });
        }
        let chol = a.clone().cholesky().ok_or_else(|| Error::NotSpd { context: "Cholesky factorization failed".into() })?;
        Ok(Self { a, chol, bounds })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }
}

impl Preconditioner for FixedSpd {
    fn dim(&self) -> usize {
        self.a.nrows()
    }
    fn kind(&self) -> PrecondKind {
        PrecondKind::FixedSpd
    }
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self.dim(), theta, g)?;
        Ok(self.chol.solve(g))
    }
    fn metric_bounds(&self, _theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        Ok(Some(self.bounds))
    }
    fn describe(&self) -> PrecondInfo {
        let (lo, hi) = self.bounds;
        PrecondInfo { kind: PrecondKind::FixedSpd, dimension: self.dim(), spectral_bounds: Some((1.0 / hi, 1.0 / lo)) }
    }
}

/// Affine equality constraints `B theta = b` with `B` of full row rank.
#[derive(Debug, Clone)]
pub struct AffineConstraint {
    b: DMatrix<f64>,
    rhs: DVector<f64>,
}

impl AffineConstraint {
    pub fn new(b: DMatrix<f64>, rhs: DVector<f64>) -> Result<Self> {
        if rhs.len() != b.nrows() {
            return Err(Error::Dimension { expected: b.nrows(), got: rhs.len() });
        }
        let rank = linalg::numerical_rank(&b, 1e-10);
        if rank < b.nrows() {
            return Err(Error::RankDeficient { rank, rows: b.nrows(), cols: b.ncols() });
        }
        Ok(Self { b, rhs })
    }

    /// The single constraint `1^T theta = 1`.
    pub fn simplex(n: usize) -> Self {
        Self { b: DMatrix::from_element(1, n, 1.0), rhs: DVector::from_element(1, 1.0) }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.rhs
    }

    pub fn rows(&self) -> usize {
        self.b.nrows()
    }

    /// `max_i |(B theta - b)_i|`.
    pub fn residual(&self, theta: &DVector<f64>) -> f64 {
        (&self.b * theta - &self.rhs).amax()
    }
}

/// Relative pivot tolerance for the Schur complement `B G^{-1} B^T`.
const SCHUR_TOL: f64 = 1e-12;

/// `P = I - G^{-1} B^T (B G^{-1} B^T)^{-1} B`.
pub fn projection_matrix(g: &DMatrix<f64>, constraint: &AffineConstraint) -> Result<DMatrix<f64>> {
    let n = g.nrows();
    if constraint.b.ncols() != n {
        return Err(Error::Dimension { expected: n, got: constraint.b.ncols() });
    }
    let chol = g.clone().cholesky().ok_or_else(|| Error::NotSpd { context: "metric G".into() })?;
    if constraint.rows() == 0 {
        return Ok(DMatrix::identity(n, n));
    }
    let y = chol.solve(&constraint.b.transpose());
    let s = &constraint.b * &y;
    let s_chol = linalg::strict_cholesky(&s, SCHUR_TOL).ok_or_else(|| Error::SingularSchur {
        rows: implicated_rows(&constraint.b, &chol.inverse()),
    })?;
    Ok(DMatrix::identity(n, n) - y * s_chol.solve(&constraint.b))
}

fn implicated_rows(b: &DMatrix<f64>, g_inv: &DMatrix<f64>) -> Vec<usize> {
    let rows = linalg::dependent_rows(b, g_inv, 1e-8);
    if rows.is_empty() {
        (0..b.nrows()).collect()
    } else {
        rows
    }
}

/// Hessian-Riemannian preconditioner `T = H^{-1}(I - B^T (B H^{-1} B^T)^{-1} B H^{-1})`
/// for a Legendre barrier `h` with Hessian `H`.
#[derive(Debug, Clone)]
pub struct HessianRiemannian {
    barrier: LegendreBarrier,
    affine: Option<AffineConstraint>,
}

/// Intermediate quantities of one Hessian-Riemannian application.
struct HrSolve {
    v: DVector<f64>,
    projected: DVector<f64>,
}

impl HessianRiemannian {
    pub fn new(barrier: LegendreBarrier, affine: Option<AffineConstraint>) -> Result<Self> {
        if let Some(a) = &affine {
            if a.b.ncols() != barrier.dim() {
                return Err(Error::Dimension { expected: barrier.dim(), got: a.b.ncols() });
            }
        }
        Ok(Self { barrier, affine: affine.filter(|a| a.rows() > 0) })
    }

    pub fn barrier(&self) -> &LegendreBarrier {
        &self.barrier
    }

    pub fn affine(&self) -> Option<&AffineConstraint> {
        self.affine.as_ref()
    }

    pub fn constraints(&self) -> &ConstraintSet {
        self.barrier.constraints()
    }

    fn solve(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<HrSolve> {
        check_dims(self.dim(), theta, g)?;
        let w = self.barrier.hess_inv_apply(theta, g)?;
        let Some(a) = &self.affine else {
            return Ok(HrSolve { v: w, projected: g.clone() });
        };
        let bt = a.b.transpose();
        let mut y = DMatrix::zeros(self.dim(), a.rows());
        for j in 0..a.rows() {
            y.set_column(j, &self.barrier.hess_inv_apply(theta, &bt.column(j).into_owned())?);
        }
        let s = &a.b * &y;
        let Some(s_chol) = linalg::strict_cholesky(&s, SCHUR_TOL) else {
            let h = self.barrier.hessian(theta)?;
            let h_inv = h.try_inverse().unwrap_or_else(|| DMatrix::identity(self.dim(), self.dim()));
            return Err(Error::SingularSchur { rows: implicated_rows(&a.b, &h_inv) });
        };
        let mult = s_chol.solve(&(&a.b * &w));
        let v = w - &y * &mult;
        let projected = g - &bt * &mult;
        Ok(HrSolve { v, projected })
    }

    /// Metric `H(theta)`.
    pub fn metric(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.barrier.hessian(theta)
    }
}

impl Preconditioner for HessianRiemannian {
    fn dim(&self) -> usize {
        self.barrier.dim()
    }
    fn kind(&self) -> PrecondKind {
        PrecondKind::HessianRiemannian
    }
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.solve(theta, g)?.v)
    }
    fn project_gradient(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        if self.affine.is_none() {
            return Ok(g.clone());
        }
        Ok(self.solve(theta, g)?.projected)
    }
    fn metric_bounds(&self, theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        if let Some(d) = self.barrier.diagonal_hessian(theta)? {
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            return Ok(Some((lo, hi)));
        }
        Ok(Some(linalg::sym_eigen_bounds(&self.barrier.hessian(theta)?)))
    }
}

/// Shahshahani preconditioner on the probability simplex:
/// `T = diag(theta) - theta theta^T`.
#[derive(Debug, Clone)]
pub struct Simplex {
    pub n: usize,
    /// Allowed `|sum(theta) - 1|`.
    pub tol: f64,
}

impl Simplex {
    pub fn new(n: usize) -> Self {
        Self { n, tol: 1e-9 }
    }

    fn check(&self, theta: &DVector<f64>) -> Result<()> {
        let sum_err = (theta.sum() - 1.0).abs();
        let min_entry = theta.min();
        if sum_err > self.tol || min_entry < 0.0 {
            return Err(Error::OffSimplex { sum_err, min_entry });
        }
        Ok(())
    }
}

impl Preconditioner for Simplex {
    fn dim(&self) -> usize {
        self.n
    }
    fn kind(&self) -> PrecondKind {
        PrecondKind::Simplex
    }
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self.n, theta, g)?;
        self.check(theta)?;
        let mean = theta.dot(g);
        Ok(DVector::from_fn(self.n, |i, _| theta[i] * (g[i] - mean)))
    }
    fn project_gradient(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self.n, theta, g)?;
        self.check(theta)?;
        let mean = theta.dot(g) / theta.sum();
        Ok(g.map(|x| x - mean))
    }
    fn metric_bounds(&self, theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        self.check(theta)?;
        Ok(Some((1.0 / theta.max(), 1.0 / theta.min())))
    }
}

/// Compare the Hessian-Riemannian direction with the natural-gradient
/// direction computed in reduced coordinates `theta = phi(z)`, where `phi`
/// eliminates one pivot coordinate per affine row. Returns
/// `|D p - (-T grad f)| / |T grad f|` (zero when both vanish).
pub fn ngd_equivalence_check(
    barrier: &LegendreBarrier,
    affine: Option<&AffineConstraint>,
    objective: &dyn Objective,
    theta: &DVector<f64>,
) -> Result<f64> {
    let n = barrier.dim();
    let hr = HessianRiemannian::new(barrier.clone(), affine.cloned())?;
    let grad = objective.gradient(theta);
    let target = -hr.apply(theta, &grad)?;

    let jac = match affine {
        Some(a) if a.rows() > 0 => reduction_jacobian(a.matrix())?,
        _ => DMatrix::identity(n, n),
    };
    let h = barrier.hessian(theta)?;
    let g = jac.transpose() * &h * &jac;
    let rhs = -(jac.transpose() * &grad);
    let p = linalg::spd_solve(&g, &rhs, 0.0, "reduced metric")?;
    let lifted = &jac * p;
    let scale = target.norm();
    let diff = (lifted - &target).norm();
    Ok(if scale > 0.0 { diff / scale } else { diff })
}

/// Jacobian of the affine parametrization of `{B theta = b}` by the
/// non-pivot coordinates.
fn reduction_jacobian(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (m, n) = b.shape();
    let pivots = linalg::pivot_columns(b, 1e-10)?;
    let free: Vec<usize> = (0..n).filter(|j| !pivots.contains(j)).collect();
    let b_d = b.select_columns(&pivots);
    let b_f = b.select_columns(&free);
    let w = b_d
        .lu()
        .solve(&b_f)
        .ok_or(Error::RankDeficient { rank: m.saturating_sub(1), rows: m, cols: n })?;
    let mut jac = DMatrix::zeros(n, n - m);
    for (k, &j) in free.iter().enumerate() {
        jac[(j, k)] = 1.0;
    }
    for (r, &i) in pivots.iter().enumerate() {
        for k in 0..free.len() {
            jac[(i, k)] = -w[(r, k)];
        }
    }
    Ok(jac)
}
