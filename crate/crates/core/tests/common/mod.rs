#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use energia::problems::{self, ProblemInstance, ProblemKind};

/// Central differences with step `1e-6 max(1, |x_i|)`.
pub fn fd_gradient(p: &ProblemInstance, x: &DVector<f64>) -> DVector<f64> {
    let f = &p.objective.objective;
    DVector::from_fn(x.len(), |i, _| {
        let h = 1e-6 * x[i].abs().max(1.0);
        let mut a = x.clone();
        let mut b = x.clone();
        a[i] += h;
        b[i] -= h;
        (f.value(&a) - f.value(&b)) / (a[i] - b[i])
    })
}

/// A random point strictly inside the feasible set of `p`.
pub fn random_feasible(p: &ProblemInstance, rng: &mut ChaCha8Rng) -> DVector<f64> {
    match p.kind {
        ProblemKind::Quadratic => {
            let rad = 0.95 * rng.random_range(0.0f64..1.0).sqrt();
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            DVector::from_vec(vec![-0.5 + rad * phi.cos(), 1.0 + rad * phi.sin()])
        }
        ProblemKind::Rosenbrock => DVector::from_vec(vec![rng.random_range(-2.0..-0.01), rng.random_range(0.01..3.0)]),
        ProblemKind::Doptimal => {
            let e = DVector::from_fn(p.dim(), |_, _| -rng.random_range(1e-3f64..1.0).ln());
            let s = e.sum();
            e / s
        }
        ProblemKind::Mixture => DVector::from_vec(vec![rng.random_range(0.5..4.5), rng.random_range(0.5..4.5)]),
        _ => DVector::from_fn(p.dim(), |_, _| rng.random_range(-3.0..3.0)),
    }
}

/// Largest `|g - fd|_inf / |g|_inf` over `count` random feasible points.
pub fn worst_gradient_error(p: &ProblemInstance, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let x = random_feasible(p, &mut rng);
        if let Some(cs) = &p.constraints {
            assert!(cs.min_value(&x) > 0.0, "sampler left the domain of {}", p.name);
        }
        let g = p.objective.objective.gradient(&x);
        let fd = fd_gradient(p, &x);
        worst = worst.max((&g - fd).amax() / g.amax().max(1e-300));
    }
    worst
}

/// The problem suite used for gradient checks.
pub fn gradient_suite() -> Vec<ProblemInstance> {
    let mut out = Vec::new();
    for a in [1.0, 100.0, 1e4] {
        out.push(problems::quadratic_problem(a).unwrap());
        out.push(problems::rosenbrock_problem(a).unwrap());
    }
    out.push(problems::strongly_convex_problem(&[0.5, 2.0, 7.0], &[1.0, -1.0, 2.0]).unwrap());
    out.push(problems::doptimal_problem(5, 20, 3).unwrap());
    out.push(problems::doptimal_problem(10, 100, 42).unwrap());
    out.push(problems::mixture_problem(32).unwrap());
    out
}
