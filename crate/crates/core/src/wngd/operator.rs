use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{density_cells, mean_project, tangent_cells, DensityModel, Grid2D};
use crate::error::{Error, Result};
use crate::linalg::{self, BandedCholesky};
use crate::precond::{PrecondKind, Preconditioner};

/// Tolerance on `|M v - g| / |g|` for tangent lifts.
pub const LIFT_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
struct Face {
    lower: usize,
    upper: usize,
    weight: f64,
}

/// `M v = -div(sqrt(rho) v)` for face velocities `v` on a staggered grid with
/// zero normal flux on the boundary. Faces normal to `x` come first, then
/// faces normal to `y`.
#[derive(Debug, Clone)]
pub struct DivergenceOperator {
    cells: usize,
    bandwidth: usize,
    faces: Vec<Face>,
}

impl DivergenceOperator {
    /// Assemble from positive cell densities; face densities are arithmetic means.
    pub fn assemble(grid: &Grid2D, rho: &[f64]) -> Result<Self> {
        if rho.len() != grid.cells() {
            return Err(Error::Dimension { expected: grid.cells(), got: rho.len() });
        }
        if let Some(c) = rho.iter().position(|&r| !(r > 0.0)) {
            return Err(Error::NonFinite(format!("density {} at cell {c} is not positive", rho[c])));
        }
        let (dx, dy) = (grid.dx(), grid.dy());
        let mut faces = Vec::with_capacity(2 * grid.cells());
        let face = |a: usize, b: usize, h: f64| Face { lower: a, upper: b, weight: (0.5 * (rho[a] + rho[b])).sqrt() / h };
        for i in 0..grid.nx.saturating_sub(1) {
            for j in 0..grid.ny {
                faces.push(face(grid.index(i, j), grid.index(i + 1, j), dx));
            }
        }
        for i in 0..grid.nx {
            for j in 0..grid.ny.saturating_sub(1) {
                faces.push(face(grid.index(i, j), grid.index(i, j + 1), dy));
            }
        }
        let bandwidth = if grid.nx > 1 { grid.ny } else { 1 };
        Ok(Self { cells: grid.cells(), bandwidth, faces })
    }

    pub fn faces(&self) -> usize {
        self.faces.len()
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.faces.len());
        let mut out = vec![0.0; self.cells];
        for (f, &vf) in self.faces.iter().zip(v) {
            let flux = f.weight * vf;
            out[f.lower] -= flux;
            out[f.upper] += flux;
        }
        out
    }

    pub fn apply_transpose(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.cells);
        self.faces.iter().map(|f| f.weight * (y[f.upper] - y[f.lower])).collect()
    }

    /// Lower band of `M M^T` with row `pin` and column `pin` replaced by the
    /// identity scaled to the original diagonal.
    fn grounded_normal_band(&self, pin: usize) -> Vec<f64> {
        let w = self.bandwidth + 1;
        let mut band = vec![0.0; self.cells * w];
        for f in &self.faces {
            let w2 = f.weight * f.weight;
            band[f.lower * w] += w2;
            band[f.upper * w] += w2;
            band[f.upper * w + (f.upper - f.lower)] -= w2;
        }
        let diag = band[pin * w];
        for d in 1..w {
            band[pin * w + d] = 0.0;
            if pin + d < self.cells {
                band[(pin + d) * w + d] = 0.0;
            }
        }
        band[pin * w] = if diag > 0.0 { diag } else { 1.0 };
        band
    }

    fn normal_apply(&self, y: &[f64]) -> Vec<f64> {
        self.apply(&self.apply_transpose(y))
    }
}

/// A min-norm solution of `M v = g`.
#[derive(Debug, Clone)]
pub struct Lift {
    pub field: Vec<f64>,
    /// `|M v - g| / |g|` (zero for `g = 0`).
    pub residual: f64,
}

/// Everything needed to evaluate the Wasserstein metric at one parameter.
#[derive(Debug, Clone)]
pub struct WassersteinWorkspace {
    pub grid: Grid2D,
    /// Cell densities after flooring.
    pub rho: Vec<f64>,
    /// Whether the density floor changed any cell.
    pub floor_active: bool,
    pub operator: DivergenceOperator,
    factor: BandedCholesky,
    pin: usize,
    /// Mean-projected parameter derivatives of the density.
    pub tangents: Vec<Vec<f64>>,
    /// Mass removed from each raw derivative by the mean projection.
    pub tangent_mass: Vec<f64>,
    pub lifts: Vec<Lift>,
    /// Information matrix `G_ij = <v_i, v_j>` (cell-area weighted).
    pub info: DMatrix<f64>,
}

impl WassersteinWorkspace {
    pub fn assemble(grid: &Grid2D, model: &dyn DensityModel, theta: &[f64]) -> Result<Self> {
        if theta.len() != model.dim() {
            return Err(Error::Dimension { expected: model.dim(), got: theta.len() });
        }
        let mut rho = density_cells(grid, model, theta);
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("density on the grid".into()));
        }
        let rmax = rho.iter().cloned().fold(0.0, f64::max);
        if !(rmax > 0.0) {
            return Err(Error::NonFinite("density vanishes on the whole grid".into()));
        }
        let floor = 1e-12 * rmax;
        let mut floor_active = false;
        for r in rho.iter_mut() {
            if *r < floor {
                *r = floor;
                floor_active = true;
            }
        }
        let operator = DivergenceOperator::assemble(grid, &rho)?;
        let pin = rho.iter().enumerate().fold(0, |best, (i, &r)| if r > rho[best] { i } else { best });
        let factor = BandedCholesky::factor(operator.cells, operator.bandwidth, operator.grounded_normal_band(pin))?;

        let mut tangents = tangent_cells(grid, model, theta);
        let tangent_mass = tangents.iter_mut().map(|t| mean_project(grid, t)).collect();
        let mut ws = Self {
            grid: grid.clone(),
            rho,
            floor_active,
            operator,
            factor,
            pin,
            tangents,
            tangent_mass,
            lifts: Vec::new(),
            info: DMatrix::zeros(0, 0),
        };
        let lifts = ws.tangents.iter().map(|t| ws.tangent_lift(t)).collect::<Result<Vec<_>>>()?;
        let fields: Vec<&[f64]> = lifts.iter().map(|l| l.field.as_slice()).collect();
        ws.info = information_matrix(&fields, grid.cell_area());
        ws.lifts = lifts;
        Ok(ws)
    }

    /// Min-norm `v` with `M v = g` for mean-zero `g`.
    pub fn tangent_lift(&self, g: &[f64]) -> Result<Lift> {
        let gnorm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if gnorm == 0.0 {
            return Ok(Lift { field: vec![0.0; self.operator.faces()], residual: 0.0 });
        }
        let mut rhs = g.to_vec();
        mean_project(&self.grid, &mut rhs);
        let mut y = vec![0.0; g.len()];
        for _ in 0..3 {
            let ay = self.operator.normal_apply(&y);
            let mut r: Vec<f64> = rhs.iter().zip(&ay).map(|(a, b)| a - b).collect();
            mean_project(&self.grid, &mut r);
            if r.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-14 * gnorm {
                break;
            }
            r[self.pin] = 0.0;
            self.factor.solve_in_place(&mut r);
            for (yi, ri) in y.iter_mut().zip(&r) {
                *yi += ri;
            }
        }
        let field = self.operator.apply_transpose(&y);
        let mv = self.operator.apply(&field);
        let residual = mv.iter().zip(g).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() / gnorm;
        if !(residual <= LIFT_TOLERANCE) {
            return Err(Error::IllPosedLift { residual, tolerance: LIFT_TOLERANCE });
        }
        Ok(Lift { field, residual })
    }

    /// Least-squares natural direction for a loss whose `L2` derivative in
    /// `rho` is `dloss` (cell values).
    pub fn natural_direction(&self, dloss: &[f64]) -> Result<NaturalDirection> {
        if dloss.len() != self.grid.cells() {
            return Err(Error::Dimension { expected: self.grid.cells(), got: dloss.len() });
        }
        let df = self.operator.apply_transpose(dloss);
        let fields: Vec<&[f64]> = self.lifts.iter().map(|l| l.field.as_slice()).collect();
        Ok(natural_direction(&df, &fields, self.grid.cell_area()))
    }

    /// Largest lift residual.
    pub fn max_lift_residual(&self) -> f64 {
        self.lifts.iter().map(|l| l.residual).fold(0.0, f64::max)
    }
}

/// `G_ij = area * <v_i, v_j>`.
pub fn information_matrix(lifts: &[&[f64]], area: f64) -> DMatrix<f64> {
    let n = lifts.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = area * lifts[i].iter().zip(lifts[j]).map(|(a, b)| a * b).sum::<f64>();
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

#[derive(Debug, Clone)]
pub struct NaturalDirection {
    pub p: DVector<f64>,
    pub info: DMatrix<f64>,
    /// `beta_i = area * <dF, v_i>`.
    pub beta: DVector<f64>,
    /// Set when `G` was too ill-conditioned and a pseudo-inverse was used.
    pub pseudo_solve: bool,
}

/// Solve `min_p |dF + sum_i p_i v_i|` through its normal equations `G p = -beta`.
pub fn natural_direction(df: &[f64], lifts: &[&[f64]], area: f64) -> NaturalDirection {
    let info = information_matrix(lifts, area);
    let beta = DVector::from_iterator(
        lifts.len(),
        lifts.iter().map(|v| area * v.iter().zip(df).map(|(a, b)| a * b).sum::<f64>()),
    );
    let (p, pseudo_solve) = solve_info(&info, &(-&beta));
    NaturalDirection { p, info, beta, pseudo_solve }
}

/// `G x = b` by Cholesky, falling back to a ridge-regularized pseudo-solve.
fn solve_info(g: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let n = g.nrows();
    if n == 0 {
        return (DVector::zeros(0), false);
    }
    let ridge = 1e-12 * g.trace() / n as f64;
    let (lo, _) = linalg::sym_eigen_bounds(g);
    if lo > ridge {
        if let Some(ch) = g.clone().cholesky() {
            return (ch.solve(b), false);
        }
    }
    warn!("information matrix is singular to working precision; using a pseudo-inverse");
    let svd = g.clone().svd(true, true);
    let x = svd.solve(b, ridge.max(f64::MIN_POSITIVE)).unwrap_or_else(|_| DVector::zeros(n));
    (x, true)
}

/// `T(theta) = G(theta)^{-1}` for the Wasserstein information matrix of a density model.
#[derive(Clone)]
pub struct WassersteinPreconditioner {
    pub grid: Grid2D,
    pub model: Arc<dyn DensityModel>,
}

impl WassersteinPreconditioner {
    pub fn new(grid: Grid2D, model: Arc<dyn DensityModel>) -> Self {
        Self { grid, model }
    }

    pub fn workspace(&self, theta: &DVector<f64>) -> Result<WassersteinWorkspace> {
        WassersteinWorkspace::assemble(&self.grid, self.model.as_ref(), theta.as_slice())
    }
}

impl Preconditioner for WassersteinPreconditioner {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn kind(&self) -> PrecondKind {
        PrecondKind::Wasserstein
    }
    fn apply(&self, theta: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.dim() {
            return Err(Error::Dimension { expected: self.dim(), got: g.len() });
        }
        let ws = self.workspace(theta)?;
        Ok(solve_info(&ws.info, g).0)
    }
    fn metric_bounds(&self, theta: &DVector<f64>) -> Result<Option<(f64, f64)>> {
        Ok(Some(linalg::sym_eigen_bounds(&self.workspace(theta)?.info)))
    }
}
