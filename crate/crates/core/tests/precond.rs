use std::sync::Arc;

use approx::assert_relative_eq;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use energia::barrier::{Constraint, ConstraintSet, Kernel, LegendreBarrier};
use energia::objective::FnObjective;
use energia::precond::{
    ngd_equivalence_check, projection_matrix, AffineConstraint, FixedSpd, HessianRiemannian, Identity, Preconditioner,
    Simplex,
};

fn dv(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

fn orthant_barrier(n: usize) -> LegendreBarrier {
    LegendreBarrier::new(Kernel::Entropy, ConstraintSet::nonnegative_orthant(n), &DVector::from_element(n, 1.0)).unwrap()
}

fn random_simplex_point(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    let x = DVector::from_fn(n, |_, _| rng.random_range(0.05..1.0));
    let s = x.sum();
    x / s
}

#[test]
fn identity_returns_the_gradient() {
    let g = dv(&[1.0, -2.0, 3.5]);
    assert_eq!(Identity::new(3).apply(&dv(&[0.0; 3]), &g).unwrap(), g);
}

#[test]
fn diagonal_spd_inverts_entrywise() {
    let p = FixedSpd::new(DMatrix::from_diagonal(&dv(&[2.0, 8.0]))).unwrap();
    let v = p.apply(&dv(&[0.0, 0.0]), &dv(&[1.0, 1.0])).unwrap();
    assert_relative_eq!(v[0], 0.5, max_relative = 1e-15);
    assert_relative_eq!(v[1], 0.125, max_relative = 1e-15);
}

#[test]
fn random_spd_solve_has_small_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random_spd(&mut rng, 5);
    let g = DVector::from_fn(5, |_, _| rng.random_range(-1.0..1.0));
    let v = FixedSpd::new(a.clone()).unwrap().apply(&DVector::zeros(5), &g).unwrap();
    assert!((a * v - &g).norm() / g.norm() < 1e-10);
}

#[test]
fn fixed_spd_rejects_indefinite_matrices() {
    assert!(FixedSpd::new(DMatrix::from_diagonal(&dv(&[1.0, -1.0]))).is_err());
}

#[test]
fn euclidean_projection_onto_a_coordinate_axis() {
    let c = AffineConstraint::new(DMatrix::from_row_slice(1, 2, &[1.0, 0.0]), dv(&[0.0])).unwrap();
    let p = projection_matrix(&DMatrix::identity(2, 2), &c).unwrap();
    let expect = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
    assert!((p - expect).amax() < 1e-15);
}

#[test]
fn weighted_projection_satisfies_its_identities() {
    let g = DMatrix::from_diagonal(&dv(&[1.0, 4.0]));
    let c = AffineConstraint::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), dv(&[1.0])).unwrap();
    let p = projection_matrix(&g, &c).unwrap();
    assert!((&p * &p - &p).amax() < 1e-14);
    assert!((c.matrix() * &p).amax() < 1e-14);
    assert!((&g * &p - p.transpose() * &g).amax() < 1e-14);
}

#[test]
fn empty_constraint_gives_the_identity_projection() {
    let c = AffineConstraint::new(DMatrix::zeros(0, 3), DVector::zeros(0)).unwrap();
    let p = projection_matrix(&(DMatrix::identity(3, 3) * 2.0), &c).unwrap();
    assert!((p - DMatrix::identity(3, 3)).amax() < 1e-15);
}

#[test]
fn rosenbrock_metric_direction() {
    let cons = vec![Constraint::Sign { index: 0, positive: false }, Constraint::Sign { index: 1, positive: true }];
    let x = dv(&[-0.5, 2.0]);
    let cs = ConstraintSet::new(2, cons, &x).unwrap();
    let hr = HessianRiemannian::new(LegendreBarrier::new(Kernel::Entropy, cs, &x).unwrap(), None).unwrap();
    let v = hr.apply(&x, &dv(&[1.0, 1.0])).unwrap();
    assert_relative_eq!(v[0], 0.5, max_relative = 1e-15);
    assert_relative_eq!(v[1], 2.0, max_relative = 1e-15);
}

#[test]
fn simplex_metric_hand_values() {
    let s = Simplex::new(2);
    let v = s.apply(&dv(&[0.5, 0.5]), &dv(&[1.0, 0.0])).unwrap();
    assert_relative_eq!(v[0], 0.25, max_relative = 1e-15);
    assert_relative_eq!(v[1], -0.25, max_relative = 1e-15);
    let n = 6;
    let u = DVector::from_element(n, 1.0 / n as f64);
    assert!(Simplex::new(n).apply(&u, &DVector::from_element(n, 1.0)).unwrap().amax() < 1e-16);
}

#[test]
fn constrained_hr_matches_the_assembled_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 4;
    let b = DMatrix::from_row_slice(2, n, &[1.0, 1.0, 1.0, 1.0, 0.5, -1.0, 2.0, 0.0]);
    for _ in 0..10 {
        let theta = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
        let affine = AffineConstraint::new(b.clone(), &b * &theta).unwrap();
        let barrier = orthant_barrier(n);
        let h = barrier.hessian(&theta).unwrap();
        let hr = HessianRiemannian::new(barrier, Some(affine)).unwrap();
        let hinv = h.clone().try_inverse().unwrap();
        let schur = &b * &hinv * b.transpose();
        let t = &hinv - &hinv * b.transpose() * schur.try_inverse().unwrap() * &b * &hinv;
        let g = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let v = hr.apply(&theta, &g).unwrap();
        assert!((v - &t * &g).norm() / (&t * &g).norm() < 1e-10);
    }
}

#[test]
fn hr_with_sum_constraint_is_tangent_to_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 7;
    let hr = HessianRiemannian::new(orthant_barrier(n), Some(AffineConstraint::simplex(n))).unwrap();
    for _ in 0..20 {
        let theta = random_simplex_point(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
        assert!(hr.apply(&theta, &g).unwrap().sum().abs() < 1e-13);
    }
}

#[test]
fn dependent_constraint_rows_are_rejected() {
    let b = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    let theta = dv(&[0.2, 0.3, 0.5]);
    let res = AffineConstraint::new(b.clone(), &b * &theta)
        .and_then(|a| HessianRiemannian::new(orthant_barrier(3), Some(a)))
        .and_then(|hr| hr.apply(&theta, &dv(&[1.0, 0.0, 0.0])));
    assert!(res.is_err());
}

fn quad_objective(n: usize, seed: u64) -> FnObjective<impl Fn(&DVector<f64>) -> f64, impl Fn(&DVector<f64>) -> DVector<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Arc::new(random_spd(&mut rng, n));
    let lin = Arc::new(DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)));
    let (q2, lin2) = (q.clone(), lin.clone());
    FnObjective::new(n, move |x: &DVector<f64>| 0.5 * x.dot(&(&*q * x)) + lin.dot(x), move |x: &DVector<f64>| &*q2 * x + &*lin2)
}

#[test]
fn ngd_equivalence_on_the_two_dimensional_example() {
    // L = (beta t1^2 + alpha t2^2) / 2 on a t1 + b t2 = 1
    let (a, b, alpha, beta) = (0.7, 1.3, 5.0, 2.0);
    let obj = FnObjective::new(
        2,
        move |x: &DVector<f64>| 0.5 * (beta * x[0] * x[0] + alpha * x[1] * x[1]),
        move |x: &DVector<f64>| dv(&[beta * x[0], alpha * x[1]]),
    );
    let theta = dv(&[0.5, (1.0 - a * 0.5) / b]);
    let affine = AffineConstraint::new(DMatrix::from_row_slice(1, 2, &[a, b]), dv(&[1.0])).unwrap();
    let d = ngd_equivalence_check(&orthant_barrier(2), Some(&affine), &obj, &theta).unwrap();
    assert!(d < 1e-10, "discrepancy {d:e}");
}

#[test]
fn ngd_equivalence_for_a_constant_objective() {
    let obj = FnObjective::new(3, |_: &DVector<f64>| 2.0, |_: &DVector<f64>| DVector::zeros(3));
    let theta = dv(&[0.2, 0.3, 0.5]);
    let d = ngd_equivalence_check(&orthant_barrier(3), Some(&AffineConstraint::simplex(3)), &obj, &theta).unwrap();
    assert_eq!(d, 0.0);
}

#[test]
fn ngd_equivalence_on_random_five_dimensional_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 5;
    let b = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
    let obj = quad_objective(n, 9);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let theta = DVector::from_fn(n, |_, _| rng.random_range(0.1..2.0));
        let affine = AffineConstraint::new(b.clone(), &b * &theta).unwrap();
        worst = worst.max(ngd_equivalence_check(&orthant_barrier(n), Some(&affine), &obj, &theta).unwrap());
    }
    assert!(worst < 1e-9, "max discrepancy {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_identities_hold(seed in any::<u64>(), n in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_spd(&mut rng, n);
        let m = rng.random_range(1..n);
        let b = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
        let c = AffineConstraint::new(b.clone(), DVector::zeros(m)).unwrap();
        let p = projection_matrix(&g, &c).unwrap();
        let scale = g.amax() * p.amax().max(1.0);
        prop_assert!((&p * &p - &p).amax() / p.amax().max(1.0) < 1e-9);
        prop_assert!((&b * &p).amax() / p.amax().max(1.0) < 1e-9);
        prop_assert!((&g * &p - p.transpose() * &g).amax() / scale < 1e-9);
    }

    #[test]
    fn simplex_metric_agrees_with_constrained_entropy(seed in any::<u64>(), n in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_simplex_point(&mut rng, n);
        let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
        let a = Simplex::new(n).apply(&theta, &g).unwrap();
        let hr = HessianRiemannian::new(orthant_barrier(n), Some(AffineConstraint::simplex(n))).unwrap();
        let b = hr.apply(&theta, &g).unwrap();
        prop_assert!((&a - &b).norm() <= 1e-10 * a.norm().max(1e-12));
        prop_assert!(a.sum().abs() < 1e-13);
    }

    #[test]
    fn hr_direction_is_a_descent_direction(a in 0.05f64..3.0, c in 0.05f64..3.0, g0 in -5.0f64..5.0, g1 in -5.0f64..5.0) {
        let cons = vec![Constraint::Sign { index: 0, positive: false }, Constraint::Sign { index: 1, positive: true }];
        let x = dv(&[-a, c]);
        let cs = ConstraintSet::new(2, cons, &x).unwrap();
        let hr = HessianRiemannian::new(LegendreBarrier::new(Kernel::Entropy, cs, &x).unwrap(), None).unwrap();
        let g = dv(&[g0, g1]);
        prop_assert!(hr.apply(&x, &g).unwrap().dot(&g) >= 0.0);
    }
}
