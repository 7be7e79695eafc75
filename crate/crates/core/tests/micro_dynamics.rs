use std::f64::consts::PI;

use mfsim::kernels::{InteractionKernel, SourceKernel};
use mfsim::measures::{counting_measure, empirical_measure};
use mfsim::micro::{
    indistinguishability_check, integrate_micro, permutation_check, quadrature_initial_state,
    MicroConfig, ParticleState,
};

fn two_gaussians(x: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return 0.0;
    }
    let c = 1.0 / (0.4 * PI).sqrt();
    3.5 * c * (-5.0 * (x - 0.25f64).powi(2) / 4.0).exp()
        + c * (-5.0 * (x - 0.90f64).powi(2) / 4.0).exp()
}

fn competition(dt: f64, horizon: f64) -> MicroConfig {
    MicroConfig::new(
        InteractionKernel::sin2(0.2).unwrap(),
        SourceKernel::m1(100.0, 0.2).unwrap(),
        dt,
        horizon,
    )
}

#[test]
fn mass_positivity_and_growth_for_twenty_agents() {
    let n = 20;
    let initial = quadrature_initial_state(two_gaussians, n, n as f64).unwrap();
    let cfg = competition(1e-3, 1.0);
    let traj = integrate_micro(&cfg, &initial, 10).unwrap();
    let bound = cfg.source.bound_on_ball(0.5 * traj.max_diameter());
    let summary = traj.summary(1e-3, bound);
    assert!(summary.mass_drift_max <= 1e-8 * n as f64, "{summary:?}");
    assert!(summary.min_weight > 0.0);
    assert!(summary.max_weight_ratio_vs_bound <= 1.0 + 1e-6);
}

#[test]
fn empirical_measure_stays_a_probability() {
    let initial = quadrature_initial_state(two_gaussians, 30, 1.0).unwrap();
    let traj = integrate_micro(&competition(1e-2, 0.5), &initial, 5).unwrap();
    for s in &traj.states {
        let e = empirical_measure(s).unwrap();
        assert!((e.total_mass() - 1.0).abs() < 1e-12);
        let c = counting_measure(s, 41).unwrap();
        assert!((c.total_mass() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn unit_and_count_mass_conventions_agree_after_scaling() {
    let a = quadrature_initial_state(two_gaussians, 25, 1.0).unwrap();
    let b = quadrature_initial_state(two_gaussians, 25, 25.0).unwrap();
    let cfg = competition(1e-2, 0.5);
    let ta = integrate_micro(&cfg, &a, 50).unwrap();
    let tb = integrate_micro(&cfg, &b, 50).unwrap();
    for (p, q) in ta.last().positions().iter().zip(tb.last().positions()) {
        assert!((p - q).abs() < 1e-12);
    }
    for (p, q) in ta.last().weights().iter().zip(tb.last().weights()) {
        assert!((25.0 * p - q).abs() < 1e-10);
    }
}

#[test]
fn merging_a_colocated_pair() {
    let base = ParticleState::from_line(vec![0.2, 0.2, 0.3, 0.45], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
    let report = indistinguishability_check(&competition(1e-3, 1.0), &base, &[0, 1], &[1.5, 0.5]).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn fully_colocated_group_does_not_move() {
    let base = ParticleState::from_line(vec![0.4; 4], vec![1.0, 2.0, 0.5, 0.5]).unwrap();
    let cfg = competition(1e-2, 1.0);
    let traj = integrate_micro(&cfg, &base, 10).unwrap();
    assert_eq!(traj.last().positions(), base.positions());
    assert_eq!(traj.last().weights(), base.weights());
    let report = indistinguishability_check(&cfg, &base, &[0, 1, 2, 3], &[1.0, 1.0, 1.0, 1.0]).unwrap();
    assert!(report.passed);
}

#[test]
fn relabeling_commutes_with_the_flow() {
    let base = quadrature_initial_state(two_gaussians, 12, 12.0).unwrap();
    let perm = [5, 3, 11, 0, 1, 2, 4, 6, 10, 9, 8, 7];
    let gap = permutation_check(&competition(1e-2, 1.0), &base, &perm).unwrap();
    assert!(gap <= 1e-8, "{gap}");
}
