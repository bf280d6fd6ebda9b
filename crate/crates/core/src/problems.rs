//! Benchmark problems with analytic gradients and optimum metadata.

use std::io::{BufRead, Write};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::barrier::{Constraint, ConstraintSet, Kernel, LegendreBarrier};
use crate::error::{Error, Result};
use crate::linalg;
use crate::objective::{Objective, ObjectiveSpec};
use crate::precond::{projection_matrix, AffineConstraint, HessianRiemannian, Identity, Preconditioner, Simplex};
use crate::stepper::Feasibility;
use crate::wngd::{DensityFit, GaussianMixture, Grid2D, WassersteinPreconditioner};

/// Identifier of the random generator used for design data.
pub const DESIGN_GENERATOR: &str = "chacha8-normal-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Quadratic,
    Rosenbrock,
    Doptimal,
    Mixture,
    StronglyConvex,
}

/// A benchmark problem: objective, start point, constraints and the
/// preconditioner it is meant to be solved with.
#[derive(Clone)]
pub struct ProblemInstance {
    pub name: String,
    pub kind: ProblemKind,
    pub objective: ObjectiveSpec,
    pub theta0: DVector<f64>,
    pub constraints: Option<ConstraintSet>,
    pub affine: Option<AffineConstraint>,
    pub barrier: Option<LegendreBarrier>,
    pub alpha_cond: Option<f64>,
    pub density: Option<DensityFit>,
    pub design: Option<Arc<DoptimalObjective>>,
}

impl std::fmt::Debug for ProblemInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProblemInstance")
            .field("name", &self.name)
            .field("objective", &self.objective)
            .field("theta0", &self.theta0.as_slice())
            .finish_non_exhaustive()
    }
}

impl ProblemInstance {
    pub fn dim(&self) -> usize {
        self.theta0.len()
    }

    pub fn feasibility(&self) -> Feasibility {
        Feasibility { constraints: self.constraints.clone(), affine: self.affine.clone() }
    }

    /// The problem's natural preconditioner: Hessian-Riemannian for barrier
    /// problems, the simplex metric for designs, Wasserstein for densities.
    pub fn natural_preconditioner(&self) -> Result<Box<dyn Preconditioner>> {
        match self.kind {
            ProblemKind::Doptimal => Ok(Box::new(Simplex::new(self.dim()))),
            ProblemKind::Mixture => {
                let fit = self.density.as_ref().expect("mixture problem carries its density fit");
                Ok(Box::new(WassersteinPreconditioner::new(fit.grid.clone(), fit.model.clone())))
            }
            _ => match &self.barrier {
                Some(b) => Ok(Box::new(HessianRiemannian::new(b.clone(), self.affine.clone())?)),
                None => Ok(Box::new(Identity::new(self.dim()))),
            },
        }
    }
}

/// `(x1 - 1)^2 + alpha (x2 - 1)^2`.
#[derive(Debug, Clone, Copy)]
pub struct Quadratic2 {
    pub alpha: f64,
}

impl Objective for Quadratic2 {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, t: &DVector<f64>) -> f64 {
        (t[0] - 1.0).powi(2) + self.alpha * (t[1] - 1.0).powi(2)
    }
    fn gradient(&self, t: &DVector<f64>) -> DVector<f64> {
        DVector::from_vec(vec![2.0 * (t[0] - 1.0), 2.0 * self.alpha * (t[1] - 1.0)])
    }
}

/// `(x1 - 1)^2 + alpha (x2 - x1^2)^2`.
#[derive(Debug, Clone, Copy)]
pub struct Rosenbrock2 {
    pub alpha: f64,
}

impl Objective for Rosenbrock2 {
    fn dim(&self) -> usize {
        2
    }
    fn value(&self, t: &DVector<f64>) -> f64 {
        (t[0] - 1.0).powi(2) + self.alpha * (t[1] - t[0] * t[0]).powi(2)
    }
    fn gradient(&self, t: &DVector<f64>) -> DVector<f64> {
        let s = t[1] - t[0] * t[0];
        DVector::from_vec(vec![2.0 * (t[0] - 1.0) - 4.0 * self.alpha * t[0] * s, 2.0 * self.alpha * s])
    }
}

/// `1/2 theta^T Q theta` with `Q` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub q: DMatrix<f64>,
}

impl Objective for QuadraticForm {
    fn dim(&self) -> usize {
        self.q.nrows()
    }
    fn value(&self, t: &DVector<f64>) -> f64 {
        0.5 * t.dot(&(&self.q * t))
    }
    fn gradient(&self, t: &DVector<f64>) -> DVector<f64> {
        &self.q * t
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("condition parameter must be positive, got {alpha}")))
    }
}

/// Quadratic on the disc `(x1 + 0.5)^2 + (x2 - 1)^2 <= 1` with the entropy
/// ball barrier; minimum `0.25` at `(0.5, 1)`, start `(-1, 1.8)`.
pub fn quadratic_problem(alpha: f64) -> Result<ProblemInstance> {
    check_alpha(alpha)?;
    let theta0 = DVector::from_vec(vec![-1.0, 1.8]);
    let cs = ConstraintSet::new(2, vec![Constraint::ball_identity(&[-0.5, 1.0])], &theta0)?;
    let barrier = LegendreBarrier::new(Kernel::Entropy, cs.clone(), &theta0)?;
    let objective = ObjectiveSpec::with_known_minimum(
        Arc::new(Quadratic2 { alpha }),
        Some(DVector::from_vec(vec![0.5, 1.0])),
        0.25,
    )
    .with_alpha(2.0 * alpha.max(1.0));
    Ok(ProblemInstance {
        name: format!("quad(alpha={alpha})"),
        kind: ProblemKind::Quadratic,
        objective,
        theta0,
        constraints: Some(cs),
        affine: None,
        barrier: Some(barrier),
        alpha_cond: Some(alpha),
        density: None,
        design: None,
    })
}

/// Rosenbrock function on `{x1 < 0, x2 > 0}` with barrier
/// `K(-x1) + K(x2)`; minimum `1` at `(0, 0)`, start `(-0.5, 2)`.
pub fn rosenbrock_problem(alpha: f64) -> Result<ProblemInstance> {
    check_alpha(alpha)?;
    let theta0 = DVector::from_vec(vec![-0.5, 2.0]);
    let cs = ConstraintSet::new(
        2,
        vec![Constraint::Sign { index: 0, positive: false }, Constraint::Sign { index: 1, positive: true }],
        &theta0,
    )?;
    let barrier = LegendreBarrier::new(Kernel::Entropy, cs.clone(), &theta0)?;
    let objective =
        ObjectiveSpec::with_known_minimum(Arc::new(Rosenbrock2 { alpha }), Some(DVector::zeros(2)), 1.0);
    Ok(ProblemInstance {
        name: format!("rosen(alpha={alpha})"),
        kind: ProblemKind::Rosenbrock,
        objective,
        theta0,
        constraints: Some(cs),
        affine: None,
        barrier: Some(barrier),
        alpha_cond: Some(alpha),
        density: None,
        design: None,
    })
}

/// Unconstrained `1/2 theta^T diag(d) theta` with PL constant `min d`.
pub fn strongly_convex_problem(diag: &[f64], theta0: &[f64]) -> Result<ProblemInstance> {
    if diag.len() != theta0.len() {
        return Err(Error::Dimension { expected: diag.len(), got: theta0.len() });
    }
    if diag.iter().any(|&d| !(d > 0.0)) {
        return Err(Error::NotSpd { context: "diagonal quadratic".into() });
    }
    let n = diag.len();
    let q = DMatrix::from_diagonal(&DVector::from_column_slice(diag));
    let mu = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let lmax = diag.iter().cloned().fold(0.0, f64::max);
    let objective = ObjectiveSpec::with_known_minimum(Arc::new(QuadraticForm { q }), Some(DVector::zeros(n)), 0.0)
        .with_mu(mu)
        .with_alpha(lmax);
    Ok(ProblemInstance {
        name: format!("strongly_convex(n={n})"),
        kind: ProblemKind::StronglyConvex,
        objective,
        theta0: DVector::from_column_slice(theta0),
        constraints: None,
        affine: None,
        barrier: None,
        alpha_cond: Some(lmax / mu),
        density: None,
        design: None,
    })
}

/// Gaussian-mixture density fit on `[0, 5]^2` with `N x N` cells, target
/// parameters `(1, 3)` and start `(4, 4.2)`.
pub fn mixture_problem(grid_n: usize) -> Result<ProblemInstance> {
    let grid = Grid2D::square(0.0, 5.0, grid_n)?;
    let theta_star = [1.0, 3.0];
    let fit = DensityFit::from_parameters(grid, Arc::new(GaussianMixture::default()), &theta_star);
    let objective = ObjectiveSpec::with_known_minimum(
        Arc::new(fit.clone()),
        Some(DVector::from_column_slice(&theta_star)),
        0.0,
    );
    Ok(ProblemInstance {
        name: format!("mixture(N={grid_n})"),
        kind: ProblemKind::Mixture,
        objective,
        theta0: DVector::from_vec(vec![4.0, 4.2]),
        constraints: None,
        affine: None,
        barrier: None,
        alpha_cond: None,
        density: Some(fit),
        design: None,
    })
}

/// Test vectors `u_i` (rows of `u`) for a D-optimal design.
#[derive(Debug, Clone, PartialEq)]
pub struct DoptimalData {
    /// `n x m`, one test vector per row.
    pub u: DMatrix<f64>,
    pub seed: Option<u64>,
}

impl DoptimalData {
    pub fn m(&self) -> usize {
        self.u.ncols()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    /// Standard normal entries from a seeded ChaCha8 stream, filled row by
    /// row. If the uniform design is singular the next seed is tried.
    pub fn generate(m: usize, n: usize, seed: u64) -> Result<Self> {
        if m == 0 || m >= n {
            return Err(Error::Config(format!("design needs 0 < m < n, got m = {m}, n = {n}")));
        }
        for s in seed..seed.saturating_add(16) {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let mut u = DMatrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    u[(i, j)] = StandardNormal.sample(&mut rng);
                }
            }
            let data = Self { u, seed: Some(s) };
            if linalg::numerical_rank(&data.u, 1e-10) == m {
                return Ok(data);
            }
        }
        Err(Error::Config("could not generate full-rank design data".into()))
    }

    /// CSV with a header row and 17 significant digits per entry.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (1..=self.m()).map(|j| format!("u{j}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.n() {
            let row: Vec<String> = (0..self.m()).map(|j| format!("{:.16e}", self.u[(i, j)])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 || line.trim().is_empty() {
                continue;
            }
            let row = line
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::Dimension { expected: first.len(), got: row.len() });
                }
            }
            rows.push(row);
        }
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        if n == 0 || m == 0 {
            return Err(Error::Config("empty design file".into()));
        }
        let u = DMatrix::from_fn(n, m, |i, j| rows[i][j]);
        Ok(Self { u, seed: None })
    }
}

/// `L(theta) = -log det(sum_i theta_i u_i u_i^T)`.
#[derive(Debug, Clone)]
pub struct DoptimalObjective {
    pub data: DoptimalData,
}

impl DoptimalObjective {
    pub fn information(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let u = &self.data.u;
        let weighted = DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| theta[i] * u[(i, j)]);
        u.transpose() * weighted
    }

    fn support(theta: &DVector<f64>) -> Vec<usize> {
        (0..theta.len()).filter(|&i| theta[i] > 0.0).collect()
    }

    /// Loss and leverage scores `d_i = u_i^T S^{-1} u_i` (the negative gradient).
    pub fn evaluate(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        if theta.len() != self.data.n() {
            return Err(Error::Dimension { expected: self.data.n(), got: theta.len() });
        }
        let s = self.information(theta);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::SingularDesign { support: Self::support(theta) })?;
        let l = chol.l();
        let logdet: f64 = 2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>();
        if !logdet.is_finite() {
            return Err(Error::SingularDesign { support: Self::support(theta) });
        }
        // rows of W = U L^{-T} give d_i = |w_i|^2
        let w = l.solve_lower_triangular(&self.data.u.transpose()).expect("Cholesky factor is invertible");
        let d = DVector::from_iterator(w.ncols(), w.column_iter().map(|c| c.norm_squared()));
        Ok((-logdet, d))
    }
}

impl Objective for DoptimalObjective {
    fn dim(&self) -> usize {
        self.data.n()
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        self.evaluate(theta).map_or(f64::NAN, |x| x.0)
    }
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        self.evaluate(theta).map_or_else(|_| DVector::from_element(theta.len(), f64::NAN), |x| -x.1)
    }
    fn value_and_gradient(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        match self.evaluate(theta) {
            Ok((l, d)) => (l, -d),
            Err(_) => (f64::NAN, DVector::from_element(theta.len(), f64::NAN)),
        }
    }
}

/// D-optimal design on the simplex from seeded Gaussian data, starting at the
/// uniform design. Without a reference value, `c` is chosen from the duality
/// lower bound at the start so that `L + c >= 1` on the whole simplex.
pub fn doptimal_problem(m: usize, n: usize, seed: u64) -> Result<ProblemInstance> {
    doptimal_from_data(DoptimalData::generate(m, n, seed)?)
}

pub fn doptimal_from_data(data: DoptimalData) -> Result<ProblemInstance> {
    let n = data.n();
    let m = data.m();
    let obj = Arc::new(DoptimalObjective { data });
    let theta0 = DVector::from_element(n, 1.0 / n as f64);
    let (l0, d0) = obj.evaluate(&theta0)?;
    let gap0 = d0.max() - m as f64;
    let objective = ObjectiveSpec::new(obj.clone(), 1.0 - (l0 - gap0));
    Ok(ProblemInstance {
        name: format!("doptimal(m={m},n={n})"),
        kind: ProblemKind::Doptimal,
        objective,
        theta0,
        constraints: Some(ConstraintSet::nonnegative_orthant(n)),
        affine: Some(AffineConstraint::simplex(n)),
        barrier: Some(LegendreBarrier::with_correction(Kernel::Entropy, ConstraintSet::nonnegative_orthant(n), vec![])?),
        alpha_cond: None,
        density: None,
        design: Some(obj),
    })
}

impl ProblemInstance {
    /// Replace the optimum with a reference value and reset `c = 1 - L_ref`.
    pub fn with_reference(mut self, value: f64) -> Self {
        self.objective = ObjectiveSpec { optimum: Some(crate::objective::Optimum { theta: None, value }), c: 1.0 - value, ..self.objective };
        self
    }
}

/// Both sides of the projected PL inequality for
/// `L = (beta theta_1^2 + alpha theta_2^2) / 2` on `a theta_1 + b theta_2 = 1`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedPlSides {
    /// `|P^T grad L|^2` with the Euclidean projection onto the constraint.
    pub projected_grad_sq: f64,
    /// `L(theta) - L(theta*)`.
    pub gap: f64,
    /// `(a^2 alpha + b^2 beta) / (a^2 + b^2)`.
    pub mu: f64,
}

pub fn projected_pl_example(a: f64, b: f64, alpha: f64, beta: f64, theta: &[f64; 2]) -> Result<ProjectedPlSides> {
    if a * b == 0.0 || !(alpha >= beta) || !(beta > 0.0) {
        return Err(Error::Config(format!("need ab != 0 and alpha >= beta > 0, got a={a}, b={b}, alpha={alpha}, beta={beta}")));
    }
    let res = a * theta[0] + b * theta[1] - 1.0;
    if res.abs() > 1e-9 * (1.0 + (a * theta[0]).abs() + (b * theta[1]).abs()) {
        return Err(Error::InfeasibleStart(format!("a theta_1 + b theta_2 - 1 = {res:e}")));
    }
    let den = a * a * alpha + b * b * beta;
    let star = [a * alpha / den, b * beta / den];
    let loss = |t: &[f64; 2]| 0.5 * (beta * t[0] * t[0] + alpha * t[1] * t[1]);
    let grad = DVector::from_vec(vec![beta * theta[0], alpha * theta[1]]);
    let constraint = AffineConstraint::new(DMatrix::from_row_slice(1, 2, &[a, b]), DVector::from_element(1, 1.0))?;
    let p = projection_matrix(&DMatrix::identity(2, 2), &constraint)?;
    let pg = p.transpose() * grad;
    Ok(ProjectedPlSides { projected_grad_sq: pg.norm_squared(), gap: loss(theta) - loss(&star), mu: den / (a * a + b * b) })
}
