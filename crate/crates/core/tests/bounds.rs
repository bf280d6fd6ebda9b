use approx::assert_relative_eq;

use energia::bench::verify::trace_profile;
use energia::bench::{run_method, MethodId, RunParams};
use energia::bounds::{check_rate_bounds, compute_step_bounds, energy_floor, RateRegime, SmoothnessProfile};
use energia::problems;
use energia::{RunStatus, StopMode};

fn profile(alpha: f64, l_star: f64) -> SmoothnessProfile {
    SmoothnessProfile { alpha, lambda1: 1.0, lambdan: 1.0, l_star }
}

#[test]
fn thresholds_by_direct_substitution() {
    // eta_s = 4 * 1 * 1 / (2 * 4) * (2 - 0.5) = 0.75, eta_0 = 1 / (2 * 2) = 0.25
    let b = compute_step_bounds(&profile(2.0, 1.0), 1.5, 2.0).unwrap();
    assert_relative_eq!(b.eta_s, 0.75, max_relative = 1e-15);
    assert_relative_eq!(b.eta_0, 0.25, max_relative = 1e-15);
    assert_eq!(b.safe, 0.25);
    assert_relative_eq!(energy_floor(&profile(2.0, 1.0), 2.0, b.eta_s, 0.5), 0.5, max_relative = 1e-15);
}

#[test]
fn threshold_tends_to_four_over_alpha_for_large_c() {
    let alpha = 7.0;
    let mut prev = 0.0;
    for c in [1e2, 1e4, 1e6, 1e8] {
        // l* and l(theta0) both close to sqrt(c)
        let l0 = (c + 1.0f64).sqrt();
        let l_star = c.sqrt();
        let b = compute_step_bounds(&profile(alpha, l_star), l0, l0).unwrap();
        assert!(b.eta_s > prev);
        prev = b.eta_s;
    }
    assert_relative_eq!(prev, 4.0 / alpha, max_relative = 1e-6);
}

#[test]
fn zero_smoothness_gives_unbounded_steps() {
    let b = compute_step_bounds(&profile(0.0, 1.0), 1.0, 1.0).unwrap();
    assert!(b.eta_s.is_infinite() && b.safe.is_infinite());
}

#[test]
fn invalid_profiles_are_rejected() {
    assert!(compute_step_bounds(&SmoothnessProfile { alpha: 1.0, lambda1: 0.0, lambdan: 1.0, l_star: 1.0 }, 1.0, 1.0).is_err());
    assert!(compute_step_bounds(&SmoothnessProfile { alpha: 1.0, lambda1: 2.0, lambdan: 1.0, l_star: 1.0 }, 1.0, 1.0).is_err());
    assert!(compute_step_bounds(&profile(1.0, 1.0), 1.0, 0.0).is_err());
}

#[test]
fn convex_and_general_bounds_hold_on_the_quadratic() {
    let p = problems::quadratic_problem(10.0).unwrap();
    let mut params = RunParams::new(0.05, 20_000, 1e-10);
    params.eps_feas = 0.25;
    params.record_iterates = true;
    let t = run_method(&p, MethodId::Aepg, &params).unwrap();
    assert_eq!(t.status, RunStatus::Converged);
    let prof = trace_profile(&p, &t).unwrap();
    for regime in [RateRegime::Convex, RateRegime::General] {
        let rep = check_rate_bounds(&t, &p.objective, &prof, regime).unwrap();
        assert_eq!(rep.checks.len(), t.records.len() - 1);
        assert!(rep.all_pass(), "{regime:?}: {} violations", rep.violations());
        assert!(rep.tightest_margin > 0.0, "{regime:?}: margin {:e}", rep.tightest_margin);
    }
}

#[test]
fn pl_bound_holds_below_the_threshold() {
    let p = problems::strongly_convex_problem(&[1.0, 3.0, 10.0], &[1.0, 1.0, 1.0]).unwrap();
    let mut params = RunParams::new(0.01, 5_000, 1e-13);
    params.record_iterates = true;
    let t = run_method(&p, MethodId::Aepg, &params).unwrap();
    let prof = trace_profile(&p, &t).unwrap();
    let first = &t.records[0];
    let limit = compute_step_bounds(&prof, p.objective.energy_root(first.loss).unwrap(), first.r).unwrap().safe;
    assert!(0.01 < limit);
    let rep = check_rate_bounds(&t, &p.objective, &prof, RateRegime::Pl).unwrap();
    assert!(rep.all_pass(), "{} violations", rep.violations());
}

#[test]
fn single_record_trace_is_vacuous() {
    let p = problems::quadratic_problem(1.0).unwrap();
    let mut params = RunParams::new(0.05, 5, 1e-7);
    params.record_iterates = true;
    let mut t = run_method(&p, MethodId::Aepg, &params).unwrap();
    t.records.truncate(1);
    let prof = profile(20.0, 0.5);
    for regime in [RateRegime::Convex, RateRegime::General] {
        let rep = check_rate_bounds(&t, &p.objective, &prof, regime).unwrap();
        assert!(rep.checks.is_empty() && rep.envelope.is_empty());
    }
}

#[test]
fn inflated_losses_violate_the_bounds() {
    let p = problems::quadratic_problem(10.0).unwrap();
    let mut params = RunParams::new(0.05, 2_000, 0.0);
    params.stop_mode = Some(StopMode::IterationBudget);
    params.eps_feas = 0.25;
    params.record_iterates = true;
    let mut t = run_method(&p, MethodId::Aepg, &params).unwrap();
    let prof = trace_profile(&p, &t).unwrap();
    let clean = check_rate_bounds(&t, &p.objective, &prof, RateRegime::Convex).unwrap();
    assert!(clean.all_pass());
    let worst = clean.checks.last().unwrap();
    t.records[worst.k].loss = worst.rhs + 0.25 + 1e-6;
    let rep = check_rate_bounds(&t, &p.objective, &prof, RateRegime::Convex).unwrap();
    assert!(!rep.all_pass());
}

#[test]
fn missing_metadata_is_an_error() {
    let p = problems::mixture_problem(16).unwrap();
    let mut params = RunParams::new(1.0, 3, 0.0);
    params.stop_mode = Some(StopMode::IterationBudget);
    let t = run_method(&p, MethodId::Aepg, &params).unwrap();
    // mixture has no mu and no recorded iterates
    assert!(check_rate_bounds(&t, &p.objective, &profile(1.0, 1.0), RateRegime::Pl).is_err());
    assert!(check_rate_bounds(&t, &p.objective, &profile(1.0, 1.0), RateRegime::Convex).is_err());
}
