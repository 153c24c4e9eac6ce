mod common;

use std::f64::consts::PI;

use common::{golden2d, pendulum};
use kam_core::iteration::{
    check_hypotheses, kappa_threshold, lemma_sum, lemma_sup, run, ComposedMap, IterationSchedule,
    RunOutcome, ScheduleOptions, Termination,
};
use kam_core::matrix::AngleMatrix;
use kam_core::step::{build_map, GeneratorSolution, KolmogorovForm, TwistData};
use kam_core::verify::{conjugacy_residual, PointHamiltonian};
use kam_core::{AnalyticityDomain, FourierTaylorSeries, SeriesShape};
use proptest::prelude::*;

fn solve(form: &KolmogorovForm, options: ScheduleOptions) -> (IterationSchedule, RunOutcome) {
    let twist = TwistData::for_form(form).unwrap();
    let schedule = IterationSchedule::new(form, &twist, &options).unwrap();
    let out = run(form, &twist, &schedule);
    (schedule, out)
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * b.abs()
}

#[test]
fn unperturbed_run_takes_no_steps() {
    let f = golden2d(0.0);
    let (_, out) = solve(&f, ScheduleOptions::default());
    assert_eq!(out.termination, Termination::Converged);
    assert_eq!(out.steps(), 0);
    assert_eq!(out.final_form, f);
    assert_eq!(out.map.deviation().unwrap(), 0.0);
    let (r, t) = out.map.apply(&[0.1, 0.2], &[1.0, 2.0]).unwrap();
    assert_eq!((r, t), (vec![0.1, 0.2], vec![1.0, 2.0]));
}

#[test]
fn pendulum_reference_run() {
    let (schedule, out) = solve(&pendulum(1e-4), ScheduleOptions::default());
    assert!(out.converged());
    let eps: Vec<f64> = out.records.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps.len(), 3);
    assert!(close(eps[0], 1e-4 * 1f64.exp(), 1e-15));
    // recorded reference values
    assert!(close(eps[1], 2.546_850_893_829_523e-8, 1e-6), "{eps:?}");
    assert!(eps[2] < schedule.stop_tol);
    assert!(close(eps[1] / (eps[0] * eps[0]), 0.344_68, 1e-4));
    assert!(close(out.records[1].epsilon_hat, 3.895_947_5e-4, 1e-6));
    assert!(close(schedule.kappa, 1.312_089_762e-12, 1e-8));
    assert!(out.map_bound_holds(&schedule));
}

#[test]
fn golden_reference_run() {
    let (schedule, out) = solve(&golden2d(1e-4), ScheduleOptions::default());
    assert!(out.converged());
    let eps: Vec<f64> = out.records.iter().map(|r| r.epsilon).collect();
    assert_eq!(eps.len(), 3);
    assert!(close(eps[0], 1e-4 * 2f64.exp(), 1e-15));
    assert!(close(eps[1], 2.193_809_8e-8, 1e-6), "{eps:?}");
    assert!(close(schedule.kappa, 4.085_449e-18, 1e-6));
    assert!(out.map_bound_holds(&schedule));
}

#[test]
fn larger_perturbation_converges_quadratically() {
    let (_, out) = solve(&pendulum(5e-2 / 1f64.exp()), ScheduleOptions::default());
    assert!(out.converged());
    assert_eq!(out.steps(), 3);
    let slope = out.fitted_slope().unwrap();
    assert!(close(slope, 1.975_6, 1e-3), "slope {slope}");
}

#[test]
fn bookkeeping_grows_by_at_most_the_map_size() {
    for f in [pendulum(1e-4), golden2d(1e-4), pendulum(5e-2 / 1f64.exp())] {
        let (schedule, out) = solve(&f, ScheduleOptions::default());
        for pair in out.records.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            assert!(
                next.gamma <= prev.gamma + next.epsilon_hat,
                "{prev:?} -> {next:?}"
            );
            assert!(
                next.eta <= prev.eta + next.epsilon_hat,
                "{prev:?} -> {next:?}"
            );
            assert!(next.h1_ok && next.h2_ok);
            assert!(next.shift_norm <= 0.5 * next.delta_n);
        }
        assert!(out.map.jacobian_deviation().unwrap() < 0.5);
        assert!(out.total_increment() <= schedule.map_constant * out.records[0].epsilon);
    }
}

#[test]
fn composed_map_matches_pointwise_composition() {
    let f = pendulum(5e-2 / 1f64.exp());
    let (schedule, out) = solve(&f, ScheduleOptions::default());
    let v = schedule.verification_domain();
    let mut map = ComposedMap::identity(f.shape(), v, f.domain());
    for step in out.map.steps() {
        map = map.compose_step(step).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            let phi = 2.0 * PI * i as f64 / 64.0;
            for big_r in [-v.rho, 0.0, 0.5 * v.rho] {
                let (r1, t1) = map.apply(&[big_r], &[phi]).unwrap();
                let (r2, t2) = map.apply_pointwise(&[big_r], &[phi]).unwrap();
                worst = worst.max((r1[0] - r2[0]).abs()).max((t1[0] - t2[0]).abs());
            }
        }
        assert!(
            worst < 1e-11,
            "after {} steps: {worst:e}",
            map.steps().len()
        );
    }
    assert_eq!(map.steps().len(), 3);
}

fn translation(shape: SeriesShape, alpha: Vec<f64>) -> GeneratorSolution {
    let d = alpha.len();
    GeneratorSolution {
        u: FourierTaylorSeries::zero(shape),
        v: vec![FourierTaylorSeries::zero(shape); d],
        alpha,
        du: vec![FourierTaylorSeries::zero(shape); d],
        dv_t: AngleMatrix::zero(shape),
    }
}

#[test]
fn translations_compose_additively() {
    let shape = SeriesShape::new(2, 4, 2).unwrap();
    let outer = AnalyticityDomain::new(1.0, 1.0).unwrap();
    let v = AnalyticityDomain::new(0.375, 0.375).unwrap();
    let id = ComposedMap::identity(shape, v, outer);
    let zero = build_map(&translation(shape, vec![0.0, 0.0]), outer).unwrap();
    assert_eq!(id.compose_step(&zero).unwrap().deviation().unwrap(), 0.0);

    let a = build_map(&translation(shape, vec![0.01, 0.02]), outer).unwrap();
    let b = build_map(&translation(shape, vec![-0.03, 0.005]), outer).unwrap();
    let both = id.compose_step(&a).unwrap().compose_step(&b).unwrap();
    let (r, t) = both.apply(&[0.1, -0.1], &[0.5, 1.5]).unwrap();
    assert!((r[0] - (0.1 + 0.01 - 0.03)).abs() < 1e-16);
    assert!((r[1] - (-0.1 + 0.02 + 0.005)).abs() < 1e-16);
    assert_eq!(t, vec![0.5, 1.5]);
    assert!((both.increments()[1] - 0.03).abs() < 1e-16);
}

#[test]
fn truncated_run_leaves_a_residual_of_the_current_size() {
    let f = pendulum(1e-3);
    let options = ScheduleOptions {
        max_steps: 1,
        ..Default::default()
    };
    let (_, out) = solve(&f, options);
    assert_eq!(out.termination, Termination::MaxSteps);
    let eps1 = out.records[1].epsilon;
    let ham = PointHamiltonian::new(&f).unwrap();
    let res = conjugacy_residual(&ham, &out.map, &[1.0], 64, 1e-5).unwrap();
    // oscillation of eps_1 h_1(0, .) on the real torus: bounded by 2 eps_1
    assert!(res.angle_dep_err <= 2.0 * eps1, "{res:?} vs {eps1:e}");
    assert!(res.angle_dep_err >= 1e-2 * eps1, "{res:?} vs {eps1:e}");
}

#[test]
fn hypotheses_examples() {
    let f = pendulum(0.0);
    let twist = TwistData::for_form(&f).unwrap();
    let schedule = IterationSchedule::new(&f, &twist, &ScheduleOptions::default()).unwrap();
    let check = check_hypotheses(&f, &twist, &schedule, 0);
    assert!(check.h1_ok && check.h2_ok, "{check:?}");

    let mut at_edge = twist.clone();
    at_edge.eta = twist.beta;
    let check = check_hypotheses(&f, &at_edge, &schedule, 0);
    assert!(!check.h1_ok);

    let big = pendulum(1e4);
    let check = check_hypotheses(&big, &TwistData::for_form(&big).unwrap(), &schedule, 0);
    assert!(!check.h2_ok);
    assert!(close(
        schedule.smallness_threshold(0),
        (1.0f64 / 3.0).powf(schedule.nu) / schedule.step_constant,
        1e-15
    ));
}

#[test]
fn schedule_stays_inside_half_the_domain() {
    let f = golden2d(1e-4);
    let twist = TwistData::for_form(&f).unwrap();
    let schedule = IterationSchedule::new(&f, &twist, &ScheduleOptions::default()).unwrap();
    schedule.check_domain_chain().unwrap();
    let total: f64 = (1..60).map(|n| schedule.loss(n)).sum();
    assert!(close(total, 0.5 * schedule.delta_base, 1e-14));
    for n in 0..20 {
        let d = schedule.domain(n);
        assert!(d.rho >= 0.5 * schedule.rho0 && d.delta_strip > 0.5 * schedule.strip0);
        assert!((d.rho - schedule.domain(n + 1).rho - schedule.loss(n + 1)).abs() < 1e-15);
    }
    assert_eq!(schedule.nu, 2.0 * (2.0 + 2.0 + 2.0));
}

#[test]
fn kappa_closed_form() {
    let k = kappa_threshold(1f64.exp(), 1.0, 1e-3, 1e-3, 1.0, 1e3);
    assert!(close(k, (-1.0 / std::f64::consts::LN_2).exp(), 1e-14));
    assert!(close(k, 0.236_3, 1e-3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn below_kappa_the_lemma_bounds_hold(
        c1_big in 0.1f64..1e6, c2_big in 0.5f64..1e3,
        c3_big in 0.1f64..1e6, c4_big in 0.5f64..1e3,
        c1 in 1e-6f64..10.0, c2 in 1e-6f64..10.0,
    ) {
        let k = kappa_threshold(c1_big, c2_big, c3_big, c4_big, c1, c2);
        prop_assert!(k > 0.0 && k <= 1.0);
        let x = 0.99 * k;
        prop_assert!(lemma_sup(x, c1_big, c2_big, 60) < c1);
        prop_assert!(lemma_sum(x, c3_big, c4_big, 60) < c2);
    }
}
