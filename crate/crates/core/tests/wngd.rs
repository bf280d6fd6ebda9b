use std::f64::consts::PI;
use std::sync::Arc;

use approx::assert_relative_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use energia::bench::verify::wngd_sample;
use energia::problems;
use energia::wngd::{
    mixture_loss, natural_direction, DensityFit, DensityModel, DivergenceOperator, GaussianMixture, Grid2D,
    WassersteinWorkspace,
};

/// Smooth positive density on the unit square (`theta` only shifts the bump).
struct Bump;

impl DensityModel for Bump {
    fn dim(&self) -> usize {
        1
    }
    fn density(&self, theta: &[f64], x: f64, y: f64) -> f64 {
        1.0 + 0.5 * (PI * (x - theta[0])).sin() * (PI * y).sin()
    }
}

fn bump_rho(x: f64, y: f64) -> f64 {
    1.0 + 0.5 * (PI * x).sin() * (PI * y).sin()
}

/// Face velocities of `grad phi` for `phi = cos(pi x) cos(pi y)`, in operator face order.
fn grad_phi_faces(grid: &Grid2D) -> Vec<f64> {
    let mut v = Vec::new();
    for i in 0..grid.nx - 1 {
        for j in 0..grid.ny {
            let x = grid.lo[0] + (i + 1) as f64 * grid.dx();
            let y = grid.center(i, j).1;
            v.push(-PI * (PI * x).sin() * (PI * y).cos());
        }
    }
    for i in 0..grid.nx {
        for j in 0..grid.ny - 1 {
            let x = grid.center(i, j).0;
            let y = grid.lo[1] + (j + 1) as f64 * grid.dy();
            v.push(-PI * (PI * x).cos() * (PI * y).sin());
        }
    }
    v
}

/// `-div(sqrt(rho) grad phi)` in closed form.
fn manufactured(x: f64, y: f64) -> f64 {
    let rho = bump_rho(x, y);
    let s = rho.sqrt();
    let (px, py) = (-PI * (PI * x).sin() * (PI * y).cos(), -PI * (PI * x).cos() * (PI * y).sin());
    let lap = -2.0 * PI * PI * (PI * x).cos() * (PI * y).cos();
    let (rx, ry) = (0.5 * PI * (PI * x).cos() * (PI * y).sin(), 0.5 * PI * (PI * x).sin() * (PI * y).cos());
    -(s * lap + (rx * px + ry * py) / (2.0 * s))
}

fn divergence_error(n: usize) -> f64 {
    let grid = Grid2D::square(0.0, 1.0, n).unwrap();
    let rho: Vec<f64> = grid.centers().into_iter().map(|(x, y)| bump_rho(x, y)).collect();
    let m = DivergenceOperator::assemble(&grid, &rho).unwrap();
    let out = m.apply(&grad_phi_faces(&grid));
    grid.centers().into_iter().zip(out).map(|((x, y), o)| (o - manufactured(x, y)).abs()).fold(0.0, f64::max)
}

#[test]
fn divergence_is_second_order_on_a_manufactured_solution() {
    let (e1, e2, e3) = (divergence_error(16), divergence_error(32), divergence_error(64));
    assert!(e3 < 1e-2, "error {e3:e} at N = 64");
    assert!(e1 / e2 > 3.5 && e2 / e3 > 3.5, "ratios {} {}", e1 / e2, e2 / e3);
}

#[test]
fn divergence_conserves_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let grid = Grid2D::square(0.0, 5.0, 20).unwrap();
    let rho: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(0.1..3.0)).collect();
    let m = DivergenceOperator::assemble(&grid, &rho).unwrap();
    let v: Vec<f64> = (0..m.faces()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let total = grid.cell_area() * m.apply(&v).iter().sum::<f64>();
    assert!(total.abs() < 1e-12, "{total:e}");
}

#[test]
fn constant_density_and_field_has_no_interior_divergence() {
    let grid = Grid2D::square(0.0, 1.0, 10).unwrap();
    let m = DivergenceOperator::assemble(&grid, &vec![2.0; grid.cells()]).unwrap();
    let nx_faces = (grid.nx - 1) * grid.ny;
    let v: Vec<f64> = (0..m.faces()).map(|f| if f < nx_faces { 1.0 } else { 0.0 }).collect();
    let out = m.apply(&v);
    for i in 1..grid.nx - 1 {
        for j in 0..grid.ny {
            assert!(out[grid.index(i, j)].abs() < 1e-12);
        }
    }
}

#[test]
fn strip_lift_is_the_antiderivative() {
    let grid = Grid2D::strip(0.0, 2.0, 40).unwrap();
    let ws = WassersteinWorkspace::assemble(&grid, &Bump, &[0.3]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g: Vec<f64> = (0..grid.cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|x| *x -= mean);
    let lift = ws.tangent_lift(&g).unwrap();
    let dx = grid.dx();
    let mut partial = 0.0;
    for f in 0..grid.nx - 1 {
        partial += g[f];
        let w = (0.5 * (ws.rho[f] + ws.rho[f + 1])).sqrt() / dx;
        let expect = -partial / w;
        assert_relative_eq!(lift.field[f], expect, epsilon = 1e-12, max_relative = 1e-9);
    }
}

#[test]
fn lift_of_zero_is_zero() {
    let grid = Grid2D::square(0.0, 5.0, 16).unwrap();
    let ws = WassersteinWorkspace::assemble(&grid, &GaussianMixture::default(), &[4.0, 4.2]).unwrap();
    let l = ws.tangent_lift(&vec![0.0; grid.cells()]).unwrap();
    assert!(l.field.iter().all(|&x| x == 0.0));
}

#[test]
fn lift_is_orthogonal_to_the_kernel() {
    let grid = Grid2D::square(0.0, 5.0, 24).unwrap();
    let ws = WassersteinWorkspace::assemble(&grid, &GaussianMixture::default(), &[2.0, 3.5]).unwrap();
    let v = &ws.lifts[0].field;
    let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let r: Vec<f64> = (0..ws.operator.faces()).map(|_| rng.random_range(-1.0..1.0)).collect();
        // project r onto ker M: subtract its min-norm component
        let range_part = ws.tangent_lift(&ws.operator.apply(&r)).unwrap().field;
        let z: Vec<f64> = r.iter().zip(&range_part).map(|(a, b)| a - b).collect();
        let zn = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        let kernel_res = ws.operator.apply(&z).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(kernel_res < 1e-8 * zn);
        let dot: f64 = v.iter().zip(&z).map(|(a, b)| a * b).sum();
        assert!(dot.abs() <= 1e-8 * vn * zn, "{dot:e}");
    }
}

#[test]
fn one_parameter_direction_is_a_scalar_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let v1: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let df: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nd = natural_direction(&df, &[&v1], 0.04);
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    assert_relative_eq!(nd.p[0], -dot(&df, &v1) / dot(&v1, &v1), max_relative = 1e-12);
}

#[test]
fn direction_vanishes_at_the_data_fit_optimum() {
    let p = problems::mixture_problem(24).unwrap();
    let fit = p.density.as_ref().unwrap();
    let ws = WassersteinWorkspace::assemble(&fit.grid, fit.model.as_ref(), &[1.0, 3.0]).unwrap();
    let nd = ws.natural_direction(&fit.residual(&[1.0, 3.0])).unwrap();
    assert_eq!(nd.p.norm(), 0.0);
    let (l, g) = mixture_loss(fit, &[1.0, 3.0]);
    assert!(l < 1e-20 && g.norm() == 0.0);
}

#[test]
fn least_squares_direction_matches_the_explicit_inverse_at_the_start() {
    let p = problems::mixture_problem(32).unwrap();
    let s = wngd_sample(&p, &[4.0, 4.2]).unwrap();
    assert!(s.direction_gap < 1e-8, "{:e}", s.direction_gap);
    assert!(s.lift_residual < 1e-8);
    assert!(s.asymmetry < 1e-14 && s.min_eig_ratio > -1e-10);
}

#[test]
fn information_matrix_converges_under_refinement() {
    let model = GaussianMixture::default();
    let info: Vec<_> = [16, 32, 64]
        .iter()
        .map(|&n| {
            let grid = Grid2D::square(0.0, 5.0, n).unwrap();
            WassersteinWorkspace::assemble(&grid, &model, &[4.0, 4.2]).unwrap().info
        })
        .collect();
    let change = |a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>| (a - b).norm() / b.norm();
    let (c1, c2) = (change(&info[0], &info[1]), change(&info[1], &info[2]));
    assert!(c2 < 0.05, "32 -> 64 change {c2}");
    assert!(c2 < c1, "{c1} then {c2}");
}

#[test]
fn density_fit_loss_is_zero_only_at_the_target() {
    for n in [16, 40] {
        let grid = Grid2D::square(0.0, 5.0, n).unwrap();
        let fit = DensityFit::from_parameters(grid, Arc::new(GaussianMixture::default()), &[1.0, 3.0]);
        assert!(mixture_loss(&fit, &[1.0, 3.0]).0 < 1e-20);
        assert!(mixture_loss(&fit, &[1.2, 3.0]).0 > 1e-6);
    }
}
