//! Discretized Wasserstein natural gradient for parametric densities on a
//! rectangular grid.

mod operator;

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::objective::Objective;

pub use operator::{
    information_matrix, natural_direction, DivergenceOperator, Lift, NaturalDirection, WassersteinPreconditioner,
    WassersteinWorkspace,
};

/// Uniform cell-centered grid on `[lo_x, hi_x] x [lo_y, hi_y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D {
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nx: usize,
    pub ny: usize,
}

impl Grid2D {
    /// `n x n` cells on `[lo, hi]^2`.
    pub fn square(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 4 {
            return Err(Error::Config(format!("grid needs at least 4 cells per dimension, got {n}")));
        }
        if !(hi > lo) {
            return Err(Error::Config(format!("empty domain [{lo}, {hi}]")));
        }
        Ok(Self { lo: [lo, lo], hi: [hi, hi], nx: n, ny: n })
    }

    /// A single row of `n` cells on `[lo, hi] x [0, 1]`, used as a 1-D grid.
    pub fn strip(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 4 || !(hi > lo) {
            return Err(Error::Config(format!("invalid strip grid: {n} cells on [{lo}, {hi}]")));
        }
        Ok(Self { lo: [lo, 0.0], hi: [hi, 1.0], nx: n, ny: 1 })
    }

    pub fn dx(&self) -> f64 {
        (self.hi[0] - self.lo[0]) / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        (self.hi[1] - self.lo[1]) / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.ny + j
    }

    pub fn center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.lo[0] + (i as f64 + 0.5) * self.dx(), self.lo[1] + (j as f64 + 0.5) * self.dy())
    }

    /// Cell centers in index order.
    pub fn centers(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.cells());
        for i in 0..self.nx {
            for j in 0..self.ny {
                out.push(self.center(i, j));
            }
        }
        out
    }

    /// Quadrature `sum_cells f * area`.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() * self.cell_area()
    }
}

/// Subtract the grid mean; returns the removed mass `integral of f`.
pub fn mean_project(grid: &Grid2D, f: &mut [f64]) -> f64 {
    let mass = grid.integrate(f);
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    for x in f.iter_mut() {
        *x -= mean;
    }
    mass
}

/// A parametric density `rho(theta, x)` on the plane.
pub trait DensityModel: Send + Sync {
    fn dim(&self) -> usize;

    fn density(&self, theta: &[f64], x: f64, y: f64) -> f64;

    /// `d rho / d theta_i` into `out`; defaults to central differences with
    /// relative step `1e-6`.
    fn density_gradient(&self, theta: &[f64], x: f64, y: f64, out: &mut [f64]) {
        let mut t = theta.to_vec();
        for i in 0..theta.len() {
            let h = 1e-6 * theta[i].abs().max(1.0);
            t[i] = theta[i] + h;
            let fp = self.density(&t, x, y);
            t[i] = theta[i] - h;
            let fm = self.density(&t, x, y);
            t[i] = theta[i];
            out[i] = (fp - fm) / (2.0 * h);
        }
    }
}

/// `w N(x; (theta_1, m_1), I) + (1 - w) N(x; (theta_2, m_2), I)`: two unit
/// Gaussians whose first coordinates are the parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMixture {
    pub weight: f64,
    pub second_coords: [f64; 2],
}

impl Default for GaussianMixture {
    fn default() -> Self {
        Self { weight: 0.05, second_coords: [3.0, 2.0] }
    }
}

fn std_normal_2d(dx: f64, dy: f64) -> f64 {
    (-(dx * dx + dy * dy) / 2.0).exp() / (2.0 * std::f64::consts::PI)
}

impl DensityModel for GaussianMixture {
    fn dim(&self) -> usize {
        2
    }

    fn density(&self, theta: &[f64], x: f64, y: f64) -> f64 {
        let w = self.weight;
        w * std_normal_2d(x - theta[0], y - self.second_coords[0])
            + (1.0 - w) * std_normal_2d(x - theta[1], y - self.second_coords[1])
    }

    fn density_gradient(&self, theta: &[f64], x: f64, y: f64, out: &mut [f64]) {
        let w = self.weight;
        out[0] = w * std_normal_2d(x - theta[0], y - self.second_coords[0]) * (x - theta[0]);
        out[1] = (1.0 - w) * std_normal_2d(x - theta[1], y - self.second_coords[1]) * (x - theta[1]);
    }
}

/// Density values at cell centers.
pub fn density_cells(grid: &Grid2D, model: &dyn DensityModel, theta: &[f64]) -> Vec<f64> {
    grid.centers().into_iter().map(|(x, y)| model.density(theta, x, y)).collect()
}

/// Parameter derivatives at cell centers, one vector per parameter.
pub fn tangent_cells(grid: &Grid2D, model: &dyn DensityModel, theta: &[f64]) -> Vec<Vec<f64>> {
    let n = model.dim();
    let mut out = vec![vec![0.0; grid.cells()]; n];
    let mut buf = vec![0.0; n];
    for (c, (x, y)) in grid.centers().into_iter().enumerate() {
        model.density_gradient(theta, x, y, &mut buf);
        for i in 0..n {
            out[i][c] = buf[i];
        }
    }
    out
}

/// `L(theta) = 1/2 integral (rho(theta) - rho*)^2` on a grid.
#[derive(Clone)]
pub struct DensityFit {
    pub grid: Grid2D,
    pub model: Arc<dyn DensityModel>,
    pub target: Vec<f64>,
}

impl DensityFit {
    pub fn new(grid: Grid2D, model: Arc<dyn DensityModel>, target: Vec<f64>) -> Result<Self> {
        if target.len() != grid.cells() {
            return Err(Error::Dimension { expected: grid.cells(), got: target.len() });
        }
        Ok(Self { grid, model, target })
    }

    /// Fit to the model's own density at `theta_star`.
    pub fn from_parameters(grid: Grid2D, model: Arc<dyn DensityModel>, theta_star: &[f64]) -> Self {
        let target = density_cells(&grid, model.as_ref(), theta_star);
        Self { grid, model, target }
    }

    /// `rho(theta) - rho*` at cell centers (the L2 derivative of the loss in `rho`).
    pub fn residual(&self, theta: &[f64]) -> Vec<f64> {
        density_cells(&self.grid, self.model.as_ref(), theta)
            .into_iter()
            .zip(&self.target)
            .map(|(a, b)| a - b)
            .collect()
    }
}

/// Loss and gradient of the density fit.
pub fn mixture_loss(fit: &DensityFit, theta: &[f64]) -> (f64, DVector<f64>) {
    let res = fit.residual(theta);
    let area = fit.grid.cell_area();
    let loss = 0.5 * area * res.iter().map(|r| r * r).sum::<f64>();
    let tangents = tangent_cells(&fit.grid, fit.model.as_ref(), theta);
    let grad = DVector::from_iterator(
        tangents.len(),
        tangents.iter().map(|t| area * t.iter().zip(&res).map(|(a, b)| a * b).sum::<f64>()),
    );
    (loss, grad)
}

impl Objective for DensityFit {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn value(&self, theta: &DVector<f64>) -> f64 {
        let res = self.residual(theta.as_slice());
        0.5 * self.grid.cell_area() * res.iter().map(|r| r * r).sum::<f64>()
    }
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        mixture_loss(self, theta.as_slice()).1
    }
    fn value_and_gradient(&self, theta: &DVector<f64>) -> (f64, DVector<f64>) {
        mixture_loss(self, theta.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_vanishes_at_target_parameters() {
        for n in [8, 16, 33] {
            let grid = Grid2D::square(0.0, 5.0, n).unwrap();
            let fit = DensityFit::from_parameters(grid, Arc::new(GaussianMixture::default()), &[1.0, 3.0]);
            let (l, g) = mixture_loss(&fit, &[1.0, 3.0]);
            assert!(l < 1e-20);
            assert_eq!(g.norm(), 0.0);
        }
    }

    #[test]
    fn analytic_tangents_match_default_differences() {
        struct Fd(GaussianMixture);
        impl DensityModel for Fd {
            fn dim(&self) -> usize {
                2
            }
            fn density(&self, t: &[f64], x: f64, y: f64) -> f64 {
                self.0.density(t, x, y)
            }
        }
        let m = GaussianMixture::default();
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        for &(x, y) in &[(0.3, 2.2), (4.1, 3.5), (2.5, 2.5)] {
            m.density_gradient(&[4.0, 4.2], x, y, &mut a);
            Fd(m).density_gradient(&[4.0, 4.2], x, y, &mut b);
            for i in 0..2 {
                assert!((a[i] - b[i]).abs() <= 1e-8 * a[i].abs().max(1e-3));
            }
        }
    }

    #[test]
    fn grid_rejects_coarse_resolution() {
        assert!(Grid2D::square(0.0, 5.0, 3).is_err());
        let g = Grid2D::square(0.0, 5.0, 4).unwrap();
        assert_eq!(g.center(0, 3), (0.625, 4.375));
    }
}
