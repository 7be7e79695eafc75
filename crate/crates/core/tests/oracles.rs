use minilp::{ComparisonOp, OptimizationDirection, Problem};
use mfsim::kernels::{InteractionKernel, SourceKernel};
use mfsim::macroscheme::{
    grid_source_rates, grid_source_rates_naive, scheme_s_step_atomic, scheme_stilde_step_atomic,
    SchemeConfig,
};
use mfsim::measures::{grid_from_density, AtomicMeasure};
use mfsim::metrics::{bounded_lipschitz, generalized_wasserstein_1, random_probability, wasserstein_p_1d};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Dual of the flat distance with every pairwise Lipschitz constraint, solved by simplex.
fn flat_by_simplex(mu: &AtomicMeasure, nu: &AtomicMeasure, a: f64, b: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = mu.atoms().map(|(x, w)| (x[0], w)).collect();
    pts.extend(nu.atoms().map(|(x, w)| (x[0], -w)));
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = pts.iter().map(|&(_, c)| lp.add_var(c, (-a, a))).collect();
    for i in 0..pts.len() {
        for j in 0..pts.len() {
            if i != j {
                let gap = b * (pts[i].0 - pts[j].0).abs();
                lp.add_constraint(&[(vars[i], 1.0), (vars[j], -1.0)], ComparisonOp::Le, gap);
            }
        }
    }
    lp.solve().unwrap().objective()
}

/// Primal transport problem with cost `|x - y|^p`.
fn wasserstein_by_simplex(mu: &AtomicMeasure, nu: &AtomicMeasure, p: i32) -> f64 {
    let xs: Vec<(f64, f64)> = mu.atoms().map(|(x, w)| (x[0], w)).collect();
    let ys: Vec<(f64, f64)> = nu.atoms().map(|(x, w)| (x[0], w)).collect();
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let plan: Vec<Vec<_>> = xs
        .iter()
        .map(|&(x, _)| {
            ys.iter()
                .map(|&(y, _)| lp.add_var((x - y).abs().powi(p), (0.0, f64::INFINITY)))
                .collect()
        })
        .collect();
    for (i, &(_, w)) in xs.iter().enumerate() {
        let row: Vec<_> = plan[i].iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(row.as_slice(), ComparisonOp::Eq, w);
    }
    for (j, &(_, w)) in ys.iter().enumerate() {
        let col: Vec<_> = plan.iter().map(|r| (r[j], 1.0)).collect();
        lp.add_constraint(col.as_slice(), ComparisonOp::Eq, w);
    }
    lp.solve().unwrap().objective().powf(1.0 / p as f64)
}

fn random_signed(rng: &mut ChaCha8Rng, n: usize, spread: f64) -> AtomicMeasure {
    let pairs: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(-spread..spread), rng.gen_range(-1.0..1.0)))
        .collect();
    AtomicMeasure::from_pairs(&pairs).unwrap()
}

#[test]
fn flat_distance_matches_simplex_on_signed_measures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..60 {
        let n = rng.gen_range(1..9);
        let m = rng.gen_range(1..9);
        let spread = rng.gen_range(0.2..4.0);
        let mu = random_signed(&mut rng, n, spread);
        let nu = random_signed(&mut rng, m, spread);
        let ours = bounded_lipschitz(&mu, &nu).unwrap().value;
        let oracle = flat_by_simplex(&mu, &nu, 1.0, 1.0);
        assert!((ours - oracle).abs() < 1e-9, "{ours} vs {oracle}");
    }
}

#[test]
fn generalized_distance_matches_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..40 {
        let a = rng.gen_range(0.1..3.0);
        let b = rng.gen_range(0.1..3.0);
        let mu = random_signed(&mut rng, 6, 2.0);
        let nu = random_signed(&mut rng, 5, 2.0);
        let ours = generalized_wasserstein_1(&mu, &nu, a, b).unwrap().value;
        let oracle = flat_by_simplex(&mu, &nu, a, b);
        assert!((ours - oracle).abs() < 1e-9 * (1.0 + oracle), "{ours} vs {oracle}");
    }
}

#[test]
fn wasserstein_matches_transport_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..40 {
        let mu = random_probability(&mut rng, 2.0, 7);
        let nu = random_probability(&mut rng, 2.0, 7);
        for p in 1..=3 {
            let ours = wasserstein_p_1d(&mu, &nu, p as u32).unwrap();
            let oracle = wasserstein_by_simplex(&mu, &nu, p);
            assert!((ours - oracle).abs() < 1e-8, "p={p}: {ours} vs {oracle}");
        }
    }
}

#[test]
fn witness_reproduces_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let mu = random_signed(&mut rng, 10, 3.0);
        let nu = random_signed(&mut rng, 10, 3.0);
        let report = bounded_lipschitz(&mu, &nu).unwrap();
        let witness = report.certificate.unwrap();
        let diff = mu.subtract(&nu).unwrap().canonicalize();
        let achieved: f64 = diff
            .atoms()
            .map(|(x, w)| {
                let k = witness.positions.iter().position(|&p| p == x[0]).unwrap();
                w * witness.values[k]
            })
            .sum();
        assert!((achieved - report.value).abs() < 1e-9);
    }
}

fn two_peaks(x: f64) -> f64 {
    (-(x - 0.3f64).powi(2) * 30.0).exp() + 0.4 * (-(x - 0.75f64).powi(2) * 50.0).exp()
}

#[test]
fn grid_source_factored_equals_naive() {
    let g = grid_from_density(two_peaks, 1.0, 0.0, 1.0, 32).unwrap();
    for beta in [0.0, 1.0, 100.0] {
        let s = SourceKernel::m1(beta, 0.2).unwrap();
        let fast = grid_source_rates(&g, &s).unwrap();
        let slow = grid_source_rates_naive(&g, &s).unwrap();
        let scale = slow.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
        }
    }
}

fn two_atom_config(dt: f64) -> SchemeConfig {
    SchemeConfig::new(InteractionKernel::SaturatedLinear, SourceKernel::Linear, dt, 0)
}

fn start() -> AtomicMeasure {
    AtomicMeasure::from_pairs(&[(1.0, 0.5), (-1.0, 0.5)]).unwrap()
}

#[test]
fn splitting_second_step_closed_form() {
    for dt in [0.1, 0.01, 0.3] {
        let cfg = two_atom_config(dt);
        let one = scheme_s_step_atomic(&start(), &cfg).unwrap();
        let two = scheme_s_step_atomic(&one, &cfg).unwrap();
        let expected = AtomicMeasure::from_pairs(&[
            (1.0 + 2.0 * dt, 0.5 * (1.0 + dt) * (1.0 + dt * (1.0 - dt * dt))),
            (-1.0 - 2.0 * dt, 0.5 * (1.0 - dt) * (1.0 - dt * (1.0 + dt).powi(2))),
        ])
        .unwrap();
        assert!(two.measure_equal(&expected, 1e-12));
        assert!(two.min_weight().unwrap() >= 0.0);
        assert!((two.total_mass() - 1.0).abs() < 1e-15);
    }
}

#[test]
fn tilde_second_step_closed_form() {
    for dt in [0.1, 0.01] {
        let cfg = two_atom_config(dt);
        let one = scheme_stilde_step_atomic(&start(), &cfg).unwrap();
        let two = scheme_stilde_step_atomic(&one, &cfg).unwrap();
        let expected = AtomicMeasure::from_pairs(&[
            (1.0 + 2.0 * dt, 0.5),
            (1.0 + dt, dt),
            (1.0, 0.5 * dt * dt * (1.0 - dt)),
            (-1.0, 0.5 * dt * dt * (1.0 + dt)),
            (-1.0 - dt, -dt * (1.0 + dt)),
            (-1.0 - 2.0 * dt, 0.5),
        ])
        .unwrap();
        assert!(two.measure_equal(&expected, 1e-12));
        assert_eq!(two.len(), 6);
    }
}
