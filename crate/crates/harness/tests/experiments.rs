use std::fs;

use mfsim::micro::integrate_micro;
use mfsim_harness::experiments::{
    builtin_test_functions, run_convergence_study, run_macro, weak_form_residual, TestFunction,
};
use mfsim_harness::{ExperimentConfig, Output};

fn small() -> ExperimentConfig {
    ExperimentConfig {
        n_list: vec![10, 20, 40],
        grid: 100,
        horizon: 0.5,
        level: Some(6),
        micro_dt: 1e-2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn barycenter_is_conserved_without_competition() {
    let cfg = ExperimentConfig { beta: 0.0, horizon: 2.0, stationary_speed: None, ..ExperimentConfig::default() };
    let traj = integrate_micro(&cfg.micro_config().unwrap(), &cfg.initial_state(30).unwrap(), 10).unwrap();
    let b0 = traj.initial().barycenter()[0];
    for s in &traj.states {
        assert!((s.barycenter()[0] - b0).abs() <= 1e-8);
    }
}

#[test]
fn constant_test_function_sees_only_mass_drift() {
    let cfg = ExperimentConfig { horizon: 0.2, stationary_speed: None, ..ExperimentConfig::default() };
    let micro = cfg.micro_config().unwrap();
    let traj = integrate_micro(&micro, &cfg.initial_state(20).unwrap(), 1).unwrap();
    let one = TestFunction { name: "1", f: |_| 1.0, df: |_| 0.0 };
    let r = weak_form_residual(&traj.states, &micro.kernel, &micro.source, &[one]).unwrap();
    assert!(r.max_residual < 1e-10, "{}", r.max_residual);
    assert!(builtin_test_functions().len() >= 5);
}

#[test]
fn initial_distance_decreases_with_n() {
    let cfg = small();
    let r = run_convergence_study(&cfg, &mut Output::discard()).unwrap();
    for metric in ["BL", "W1", "W2"] {
        let d: Vec<f64> = cfg.n_list.iter().map(|&n| r.table.get(n, 0.0, metric).unwrap()).collect();
        assert!(d.windows(2).all(|w| w[1] < w[0]), "{metric}: {d:?}");
    }
    let times = 1 + cfg.sample_times().len();
    assert_eq!(r.table.rows.len(), cfg.n_list.len() * times * 3);
    assert!(r.table.rows.iter().all(|row| row.distance >= 0.0));
    assert!(r.chain_violation <= 1e-10);
}

#[test]
fn macro_artifacts_are_deterministic_probabilities() {
    let cfg = small();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_macro(&cfg, &mut Output::new(Some(a.path())).unwrap()).unwrap();
    run_macro(&cfg, &mut Output::new(Some(b.path())).unwrap()).unwrap();
    let text = fs::read_to_string(a.path().join("macro_density.csv")).unwrap();
    assert_eq!(text, fs::read_to_string(b.path().join("macro_density.csv")).unwrap());

    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["t", "cell_left", "cell_right", "mass", "density"]);
    let mut sums: Vec<(f64, f64)> = Vec::new();
    for rec in reader.records() {
        let rec = rec.unwrap();
        let t: f64 = rec[0].parse().unwrap();
        let m: f64 = rec[3].parse().unwrap();
        match sums.last_mut() {
            Some((last, s)) if *last == t => *s += m,
            _ => sums.push((t, m)),
        }
    }
    assert_eq!(sums.len(), 1 + cfg.sample_times().len());
    for (t, s) in sums {
        assert!((s - 1.0).abs() <= 1e-9, "t = {t}: {s}");
    }
}
