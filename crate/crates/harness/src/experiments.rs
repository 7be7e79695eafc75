//! Experiment drivers. Each returns a report with explicit pass/fail fields
//! and optionally writes CSV, SVG and JSON artifacts.

use std::io::Write;

use anyhow::{bail, Context, Result};
use mfsim::kernels::{InteractionKernel, SourceKernel};
use mfsim::macroscheme::{
    run_scheme, run_scheme_atomic, scheme_s_step_atomic, scheme_stilde_step_atomic,
    support_radius_bound, SchemeConfig, SchemeDiagnostics, SchemeRun,
};
use mfsim::measures::{
    atomic_from_grid, counting_measure, empirical_measure, grid_from_density, AtomicMeasure,
    GridMeasure,
};
use mfsim::metrics::{
    bounded_lipschitz, check_metric_inequalities, distance,
    wasserstein_p_1d, InequalityReport, Which,
};
use mfsim::micro::{integrate_micro, system_rhs, MicroSummary, ParticleState, Trajectory};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{competition_density, ExperimentConfig};
use crate::output::Output;
use crate::svg::{line_plot, step_points, Series};

/// Cluster centers reported for the competition model.
pub const REPORTED_CLUSTER_CENTERS: [f64; 4] = [0.07, 0.33, 0.66, 0.90];
pub const CLUSTER_CENTER_TOLERANCE: f64 = 0.03;

/// Conservation tolerances of the micro runs.
pub const MASS_DRIFT_TOLERANCE: f64 = 1e-8;
pub const GROWTH_TOLERANCE: f64 = 1e-6;
/// Mass tolerance of every sampled macroscopic measure.
pub const MACRO_MASS_TOLERANCE: f64 = 1e-10;
/// Tolerance of the closed-form checks in the two-atom comparison.
pub const COMPARISON_TOLERANCE: f64 = 1e-12;
/// Tolerance of the metric identities and inequalities.
pub const METRIC_TOLERANCE: f64 = 1e-9;
pub const METRIC_SLACK: f64 = 1e-10;
/// Constant `C` in the weak-form bound `C (s^2 + dt^4)`.
pub const WEAK_FORM_CONSTANT: f64 = 100.0;

/// One named scalar check.
#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn close(name: impl Into<String>, value: f64, expected: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected,
            tolerance,
            passed: (value - expected).abs() <= tolerance,
        }
    }

    pub fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self {
            name: name.into(),
            value,
            expected: limit,
            tolerance: 0.0,
            passed: value <= limit,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Cluster {
    pub center: f64,
    pub mass: f64,
    pub size: usize,
}

/// Maximal groups of particles whose consecutive gaps are at most `gap`
/// (one-dimensional states). Centers are weight averages.
pub fn detect_clusters(state: &ParticleState, gap: f64) -> Vec<Cluster> {
    let mut atoms: Vec<(f64, f64)> = state
        .positions()
        .iter()
        .copied()
        .zip(state.weights().iter().copied())
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<Cluster> = Vec::new();
    let mut prev = f64::NEG_INFINITY;
    let mut moment = 0.0;
    for (x, m) in atoms {
        if x - prev > gap {
            if let Some(c) = out.last_mut() {
                c.center = moment / c.mass;
            }
            out.push(Cluster {
                center: 0.0,
                mass: 0.0,
                size: 0,
            });
            moment = 0.0;
        }
        let c = out.last_mut().expect("pushed above");
        c.mass += m;
        c.size += 1;
        moment += m * x;
        prev = x;
    }
    if let Some(c) = out.last_mut() {
        c.center = moment / c.mass;
    }
    out
}

/// Integrated micro system for one particle count.
#[derive(Debug, Clone)]
pub struct MicroRun {
    pub n: usize,
    pub trajectory: Trajectory,
    pub summary: MicroSummary,
    pub clusters: Vec<Cluster>,
}

impl MicroRun {
    pub fn conservation_ok(&self) -> bool {
        let s = &self.summary;
        s.mass_drift_max <= MASS_DRIFT_TOLERANCE * s.total_mass
            && s.min_weight > 0.0
            && s.max_weight_ratio_vs_bound <= 1.0 + GROWTH_TOLERANCE
    }
}

/// Runs the micro system for every `n` (in parallel), keeping every
/// `stride`-th step.
pub fn run_micro_runs(
    cfg: &ExperimentConfig,
    ns: &[usize],
    stride: usize,
    early_stop: bool,
) -> Result<Vec<MicroRun>> {
    let mut micro = cfg.micro_config()?;
    if !early_stop {
        micro.stationary_speed = None;
    }
    ns.par_iter()
        .map(|&n| {
            let initial = cfg.initial_state(n)?;
            let trajectory = integrate_micro(&micro, &initial, stride)
                .with_context(|| format!("micro run with N = {n}"))?;
            let bound = micro.source.bound_on_ball(0.5 * trajectory.max_diameter());
            let summary = trajectory.summary(micro.dt, bound);
            let clusters = detect_clusters(trajectory.last(), cfg.cluster_gap);
            Ok(MicroRun {
                n,
                trajectory,
                summary,
                clusters,
            })
        })
        .collect()
}

fn write_trajectory(out: &mut Output, run: &MicroRun) -> Result<()> {
    out.with_file(&format!("micro_N{}.csv", run.n), |w| {
        Ok(run.trajectory.write_csv(w)?)
    })?;
    out.json(&format!("micro_N{}_summary.json", run.n), &run.summary)?;
    if out.is_enabled() {
        let series: Vec<Series> = (0..run.n)
            .map(|i| {
                let pts = run
                    .trajectory
                    .states
                    .iter()
                    .map(|s| (s.time(), s.positions()[i]))
                    .collect();
                Series::new(format!("x_{i}"), pts)
            })
            .collect();
        out.text(
            &format!("micro_N{}.svg", run.n),
            &line_plot(&format!("Positions, N = {}", run.n), "t", "x", &series),
        )?;
    }
    Ok(())
}

/// Report of the micro subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct MicroReport {
    pub summaries: Vec<MicroSummary>,
    pub clusters: Vec<ClusterSummary>,
    pub passed: bool,
}

pub fn run_micro(cfg: &ExperimentConfig, out: &mut Output) -> Result<MicroReport> {
    let runs = run_micro_runs(cfg, &cfg.n_list, 10, true)?;
    for run in &runs {
        write_trajectory(out, run)?;
    }
    Ok(MicroReport {
        passed: runs.iter().all(MicroRun::conservation_ok),
        summaries: runs.iter().map(|r| r.summary.clone()).collect(),
        clusters: runs.iter().map(ClusterSummary::of).collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    #[serde(rename = "N")]
    pub n: usize,
    pub final_time: f64,
    pub stopped_early_at: Option<f64>,
    pub count: usize,
    pub centers: Vec<f64>,
    pub masses: Vec<f64>,
}

impl ClusterSummary {
    fn of(run: &MicroRun) -> Self {
        Self {
            n: run.n,
            final_time: run.trajectory.last().time(),
            stopped_early_at: run.trajectory.stopped_early_at,
            count: run.clusters.len(),
            centers: run.clusters.iter().map(|c| c.center).collect(),
            masses: run
                .clusters
                .iter()
                .map(|c| c.mass / run.summary.total_mass)
                .collect(),
        }
    }

    /// Largest distance from a reported center to the matching detected one,
    /// or infinity when the counts differ.
    pub fn center_error(&self) -> f64 {
        if self.count != REPORTED_CLUSTER_CENTERS.len() {
            return f64::INFINITY;
        }
        self.centers
            .iter()
            .zip(REPORTED_CLUSTER_CENTERS)
            .map(|(c, p)| (c - p).abs())
            .fold(0.0, f64::max)
    }
}

/// Report of the macro subcommand.
#[derive(Debug, Clone, Serialize)]
pub struct MacroReport {
    pub level: u32,
    pub dt: f64,
    pub source_bound: f64,
    pub support_bound: f64,
    pub diagnostics: Vec<SchemeDiagnostics>,
    pub passed: bool,
}

/// Runs the grid scheme from the preset's initial density.
pub fn macro_run(cfg: &ExperimentConfig, times: &[f64]) -> Result<(SchemeConfig, SchemeRun<GridMeasure>)> {
    let scheme = cfg.scheme_config()?;
    let mu0 = cfg.initial_grid()?;
    let run = run_scheme(&scheme, &mu0, times).context("macroscopic scheme run")?;
    Ok((scheme, run))
}

/// Checks mass, sign and support of every sample of a grid run.
pub fn macro_report(cfg: &ExperimentConfig, scheme: &SchemeConfig, run: &SchemeRun<GridMeasure>) -> Result<MacroReport> {
    let initial_radius = cfg.domain[0].abs().max(cfg.domain[1].abs());
    let support_bound = support_radius_bound(&scheme.kernel, initial_radius, scheme.horizon);
    let passed = run.diagnostics.iter().all(|d| {
        (d.mass - 1.0).abs() <= MACRO_MASS_TOLERANCE
            && d.min_mass >= 0.0
            && d.support_left.abs() <= support_bound
            && d.support_right.abs() <= support_bound
    });
    Ok(MacroReport {
        level: scheme.level,
        dt: scheme.dt(),
        source_bound: scheme.source_bound_on(cfg.domain[0], cfg.domain[1]),
        support_bound,
        diagnostics: run.diagnostics.clone(),
        passed,
    })
}

fn write_macro(out: &mut Output, run: &SchemeRun<GridMeasure>) -> Result<()> {
    out.with_file("macro_density.csv", |w| {
        for (k, (t, g)) in run.times.iter().zip(&run.samples).enumerate() {
            g.write_csv_at(*t, &mut *w, k == 0)?;
        }
        Ok(())
    })?;
    out.json("macro_diagnostics.json", &run.diagnostics)?;
    if out.is_enabled() {
        let series: Vec<Series> = run
            .times
            .iter()
            .zip(&run.samples)
            .map(|(t, g)| Series::new(format!("t = {t}"), grid_density_points(g)))
            .collect();
        out.text(
            "macro_density.svg",
            &line_plot("Macroscopic density", "x", "density", &series),
        )?;
    }
    Ok(())
}

fn grid_density_points(g: &GridMeasure) -> Vec<(f64, f64)> {
    let edges: Vec<(f64, f64)> = (0..g.cells()).map(|j| g.cell_bounds(j)).collect();
    let dens: Vec<f64> = (0..g.cells()).map(|j| g.density(j)).collect();
    step_points(&edges, &dens)
}

pub fn run_macro(cfg: &ExperimentConfig, out: &mut Output) -> Result<MacroReport> {
    let mut times = vec![0.0];
    times.extend(cfg.sample_times());
    let (scheme, run) = macro_run(cfg, &times)?;
    write_macro(out, &run)?;
    macro_report(cfg, &scheme, &run)
}

/// Report of the full competition-model experiment.
#[derive(Debug, Clone, Serialize)]
pub struct CompetitionReport {
    pub sample_times: Vec<f64>,
    pub micro: Vec<MicroSummary>,
    pub clusters: Vec<ClusterSummary>,
    pub macro_report: MacroReport,
    pub conservation_ok: bool,
    pub counts_identical: bool,
    pub count_is_four: bool,
    pub max_center_error: f64,
    pub centers_match: bool,
    pub passed: bool,
}

/// Micro runs for every `N`, the macroscopic density at the sample times,
/// counting-measure overlays, and the cluster assertions.
pub fn run_competition_experiment(cfg: &ExperimentConfig, out: &mut Output) -> Result<CompetitionReport> {
    let sample_times = cfg.sample_times();
    let runs = run_micro_runs(cfg, &cfg.n_list, 10, true)?;
    let (scheme, macro_samples) = macro_run(cfg, &sample_times)?;
    for run in &runs {
        write_trajectory(out, run)?;
        write_overlay(out, cfg, run, &macro_samples)?;
    }
    write_macro(out, &macro_samples)?;
    let macro_report = macro_report(cfg, &scheme, &macro_samples)?;
    let clusters: Vec<ClusterSummary> = runs.iter().map(ClusterSummary::of).collect();
    let counts_identical = clusters.windows(2).all(|w| w[0].count == w[1].count);
    let count_is_four = clusters.iter().all(|c| c.count == REPORTED_CLUSTER_CENTERS.len());
    let max_center_error = clusters
        .iter()
        .map(ClusterSummary::center_error)
        .fold(0.0, f64::max);
    let centers_match = max_center_error <= CLUSTER_CENTER_TOLERANCE;
    let conservation_ok = runs.iter().all(MicroRun::conservation_ok);
    out.json("clusters.json", &clusters)?;
    Ok(CompetitionReport {
        sample_times,
        micro: runs.iter().map(|r| r.summary.clone()).collect(),
        passed: conservation_ok && macro_report.passed && counts_identical && count_is_four && centers_match,
        clusters,
        macro_report,
        conservation_ok,
        counts_identical,
        count_is_four,
        max_center_error,
        centers_match,
    })
}

fn write_overlay(
    out: &mut Output,
    cfg: &ExperimentConfig,
    run: &MicroRun,
    macro_samples: &SchemeRun<GridMeasure>,
) -> Result<()> {
    if !out.is_enabled() {
        return Ok(());
    }
    let mut rows: Vec<(f64, &'static str, f64, f64, f64)> = Vec::new();
    let mut last = None;
    for (t, g) in macro_samples.times.iter().zip(&macro_samples.samples) {
        let state = run.trajectory.at(*t);
        let counting = counting_measure(state, cfg.counting_bins)?;
        for j in 0..counting.cells() {
            let (l, r) = counting.cell_bounds(j);
            rows.push((*t, "counting", l, r, counting.density(j)));
        }
        for j in 0..g.cells() {
            let (l, r) = g.cell_bounds(j);
            rows.push((*t, "macro", l, r, g.density(j)));
        }
        last = Some((*t, counting, g));
    }
    out.with_file(&format!("overlay_N{}.csv", run.n), |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["t", "kind", "cell_left", "cell_right", "density"])?;
        for (t, kind, l, r, d) in &rows {
            csv.write_record([t.to_string(), kind.to_string(), l.to_string(), r.to_string(), d.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    })?;
    if let Some((t, counting, g)) = last {
        let svg = line_plot(
            &format!("N = {}, t = {t}", run.n),
            "x",
            "density",
            &[
                Series::new("counting measure", grid_density_points(&counting)),
                Series::new("macroscopic", grid_density_points(g)),
            ],
        );
        out.text(&format!("overlay_N{}.svg", run.n), &svg)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ConvergenceRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub t: f64,
    pub metric: String,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ConvergenceTable {
    pub rows: Vec<ConvergenceRow>,
}

pub const CONVERGENCE_METRICS: [(&str, Which); 3] =
    [("BL", Which::Bl), ("W1", Which::W1), ("W2", Which::Wp(2))];

impl ConvergenceTable {
    pub fn get(&self, n: usize, t: f64, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.t == t && r.metric == metric)
            .map(|r| r.distance)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["N", "t", "metric", "distance"])?;
        for r in &self.rows {
            csv.write_record([r.n.to_string(), r.t.to_string(), r.metric.clone(), r.distance.to_string()])?;
        }
        csv.flush()?;
        Ok(())
    }

    /// Least-squares slope of `ln D` against `ln N` at one time.
    pub fn slope(&self, t: f64, metric: &str) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.t == t && r.metric == metric && r.distance > 0.0)
            .map(|r| ((r.n as f64).ln(), r.distance.ln()))
            .collect();
        fit_slope(&pts)
    }
}

/// Least-squares slope through the points.
pub fn fit_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize)]
pub struct SlopeFit {
    pub metric: String,
    pub t: f64,
    pub slope: f64,
    /// `D(N_max) < D(N_min)`.
    pub decreasing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub table: ConvergenceTable,
    pub fits: Vec<SlopeFit>,
    /// Smallest `C` with `rho(mu^N_t, mu_t) <= e^{C t} rho(mu^N_0, mu_0)` over all rows.
    pub stability_constant: f64,
    /// Largest violation of `W_2 <= (2R)^{1/2} W_1^{1/2}` and of
    /// `rho <= W_1 <= max(1, R) rho`, with `R` the radius of both supports.
    pub chain_violation: f64,
    pub macro_diagnostics: Vec<SchemeDiagnostics>,
    pub passed: bool,
}

/// Distances between the empirical measures for every `N` and the
/// macroscopic reference at `t = 0` and the sample times.
pub fn run_convergence_study(cfg: &ExperimentConfig, out: &mut Output) -> Result<ConvergenceReport> {
    let sample_times = cfg.sample_times();
    let mut times = vec![0.0];
    times.extend(&sample_times);
    let (_, reference) = macro_run(cfg, &times)?;
    let runs = run_micro_runs(cfg, &cfg.n_list, 1, false)?;
    let mut table = ConvergenceTable::default();
    let mut chain_violation: f64 = 0.0;
    for run in &runs {
        for (t, g) in reference.times.iter().zip(&reference.samples) {
            let state = run.trajectory.at(*t);
            let emp = empirical_measure(state)?;
            let grid_atoms = atomic_from_grid(g);
            let mut row = |metric: &str, which: Which| -> Result<f64> {
                let d = distance(&grid_atoms, &emp, which)?;
                table.rows.push(ConvergenceRow {
                    n: run.n,
                    t: *t,
                    metric: metric.to_string(),
                    distance: d,
                });
                Ok(d)
            };
            let rho = row("BL", Which::Bl)?;
            let w1 = row("W1", Which::W1)?;
            let w2 = row("W2", Which::Wp(2))?;
            let r = grid_atoms.support_radius().max(emp.support_radius());
            chain_violation = chain_violation
                .max(w2 - (2.0 * r).sqrt() * w1.sqrt())
                .max(rho - w1)
                .max(w1 - r.max(1.0) * rho);
        }
    }
    let n_min = cfg.n_list[0];
    let n_max = *cfg.n_list.last().expect("validated non-empty");
    let mut fits = Vec::new();
    for &t in reference.times.iter().skip(1) {
        for (metric, _) in CONVERGENCE_METRICS {
            fits.push(SlopeFit {
                metric: metric.to_string(),
                t,
                slope: table.slope(t, metric),
                decreasing: table.get(n_max, t, metric) < table.get(n_min, t, metric),
            });
        }
    }
    let mut stability_constant: f64 = 0.0;
    for run in &runs {
        let Some(rho0) = table.get(run.n, 0.0, "BL") else { continue };
        for r in table.rows.iter().filter(|r| r.n == run.n && r.metric == "BL" && r.t > 0.0) {
            stability_constant = stability_constant.max((r.distance / rho0).ln() / r.t);
        }
    }
    out.with_file("convergence.csv", |w| table.write_csv(w))?;
    if out.is_enabled() {
        for (metric, _) in CONVERGENCE_METRICS {
            let series: Vec<Series> = reference
                .times
                .iter()
                .map(|&t| {
                    let pts = cfg
                        .n_list
                        .iter()
                        .filter_map(|&n| table.get(n, t, metric).map(|d| ((n as f64).ln(), d.ln())))
                        .collect();
                    Series::new(format!("t = {t}"), pts)
                })
                .collect();
            out.text(
                &format!("convergence_{metric}.svg"),
                &line_plot(&format!("{metric} distance to the macroscopic solution"), "ln N", "ln D", &series),
            )?;
        }
    }
    let passed = fits.iter().all(|f| f.decreasing && f.slope < 0.0)
        && chain_violation <= METRIC_SLACK
        && stability_constant.is_finite();
    Ok(ConvergenceReport {
        table,
        fits,
        stability_constant,
        chain_violation,
        macro_diagnostics: reference.diagnostics,
        passed,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SchemeComparisonReport {
    pub checks: Vec<Check>,
    pub passed: bool,
}

/// Largest coordinate or weight difference between two measures after
/// canonicalization; infinite when the atom counts differ.
pub fn atom_deviation(a: &AtomicMeasure, b: &AtomicMeasure) -> f64 {
    let (a, b) = (a.canonicalize(), b.canonicalize());
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.atoms()
        .zip(b.atoms())
        .map(|((x, v), (y, w))| (x[0] - y[0]).abs().max((v - w).abs()))
        .fold(0.0, f64::max)
}

fn pairs(p: &[(f64, f64)]) -> AtomicMeasure {
    AtomicMeasure::from_pairs(p).expect("finite closed forms")
}

/// Both schemes on the two-atom example, against the closed forms.
pub fn run_scheme_comparison(cfg: &ExperimentConfig, out: &mut Output) -> Result<SchemeComparisonReport> {
    let steps = cfg.comparison_steps.max(2);
    let mut checks = Vec::new();
    let tol = COMPARISON_TOLERANCE;
    for &dt in &cfg.comparison_dts {
        let scheme = SchemeConfig::new(InteractionKernel::SaturatedLinear, SourceKernel::Linear, dt, 0);
        let start = pairs(&[(1.0, 0.5), (-1.0, 0.5)]);
        let mut split = vec![start.clone()];
        let mut tilde = vec![start];
        for n in 0..steps {
            split.push(scheme_s_step_atomic(&split[n], &scheme)?);
            tilde.push(scheme_stilde_step_atomic(&tilde[n], &scheme)?);
        }
        let tag = |s: &str| format!("dt={dt}: {s}");
        let tilde1 = pairs(&[(1.0 + dt, 0.5), (1.0, 0.5 * dt), (-1.0, -0.5 * dt), (-1.0 - dt, 0.5)]);
        checks.push(Check::at_most(tag("tilde step 1 atoms"), atom_deviation(&tilde[1], &tilde1), tol));
        checks.push(Check::close(tag("tilde step 1 mass"), tilde[1].total_mass(), 1.0, tol));
        checks.push(Check::close(tag("tilde step 1 total variation"), tilde[1].total_variation(), 1.0 + dt, tol));
        checks.push(Check::close(tag("tilde step 1 center"), tilde[1].first_moment(), dt, tol));
        checks.push(Check::close(
            tag("tilde step 2 total variation"),
            tilde[2].total_variation(),
            1.0 + 2.0 * (dt + dt * dt),
            tol,
        ));
        checks.push(Check::close(tag("tilde step 2 center"), tilde[2].first_moment(), 2.0 * dt + 3.0 * dt * dt, tol));
        checks.push(Check::close(tag("tilde step 1 negative atom"), tilde[1].min_weight().unwrap_or(0.0), -0.5 * dt, tol));
        let split1 = pairs(&[(1.0 + dt, 0.5 * (1.0 + dt)), (-1.0 - dt, 0.5 * (1.0 - dt))]);
        checks.push(Check::at_most(tag("split step 1 atoms"), atom_deviation(&split[1], &split1), tol));
        for n in 1..=steps {
            if n <= 2 {
                checks.push(Check::close(
                    tag(&format!("tilde atom count after {n} steps")),
                    tilde[n].canonicalize().len() as f64,
                    2.0 * (n as f64 + 1.0),
                    0.0,
                ));
            }
            checks.push(Check::close(tag(&format!("split atom count after {n} steps")), split[n].len() as f64, 2.0, 0.0));
            let min = split[n].min_weight().unwrap_or(0.0);
            checks.push(Check {
                name: tag(&format!("split minimum weight after {n} steps")),
                value: min,
                expected: 0.0,
                tolerance: 0.0,
                passed: min >= 0.0,
            });
            checks.push(Check::close(tag(&format!("split total variation after {n} steps")), split[n].total_variation(), 1.0, tol));
        }
        out.with_file(&format!("scheme_compare_dt{dt}.csv"), |w| {
            let mut csv = csv::Writer::from_writer(w);
            csv.write_record(["scheme", "step", "position", "weight"])?;
            for (name, seq) in [("split", &split), ("tilde", &tilde)] {
                for (n, m) in seq.iter().enumerate() {
                    for (x, wgt) in m.canonicalize().atoms() {
                        csv.write_record([name.to_string(), n.to_string(), x[0].to_string(), wgt.to_string()])?;
                    }
                }
            }
            csv.flush()?;
            Ok(())
        })?;
    }
    Ok(SchemeComparisonReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
    })
}

/// Smooth test function with its derivative.
#[derive(Debug, Clone, Copy)]
pub struct TestFunction {
    pub name: &'static str,
    pub f: fn(f64) -> f64,
    pub df: fn(f64) -> f64,
}

fn bump(x: f64, c: f64, r: f64) -> f64 {
    let u = (x - c) / r;
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn bump_derivative(x: f64, c: f64, r: f64) -> f64 {
    let u = (x - c) / r;
    if u.abs() >= 1.0 {
        0.0
    } else {
        let s = 1.0 - u * u;
        (-1.0 / s).exp() * (-2.0 * u / (s * s)) / r
    }
}

/// Three bumps plus `x`, `x^2` and `sin(pi x)`.
pub fn builtin_test_functions() -> Vec<TestFunction> {
    use std::f64::consts::PI;
    vec![
        TestFunction { name: "bump(0.25, 0.3)", f: |x| bump(x, 0.25, 0.3), df: |x| bump_derivative(x, 0.25, 0.3) },
        TestFunction { name: "bump(0.5, 0.4)", f: |x| bump(x, 0.5, 0.4), df: |x| bump_derivative(x, 0.5, 0.4) },
        TestFunction { name: "bump(0.75, 0.3)", f: |x| bump(x, 0.75, 0.3), df: |x| bump_derivative(x, 0.75, 0.3) },
        TestFunction { name: "x", f: |x| x, df: |_| 1.0 },
        TestFunction { name: "x^2", f: |x| x * x, df: |x| 2.0 * x },
        TestFunction { name: "sin(pi x)", f: |x| (PI * x).sin(), df: |x| PI * (PI * x).cos() },
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakFormReport {
    pub sampling_interval: f64,
    pub max_residual: f64,
    pub per_function: Vec<(String, f64)>,
}

/// Largest gap between the central difference of `t -> int f d mu^N_t` and
/// `int V[mu] f' d mu + int f dh[mu]`, over the interior samples of a
/// uniformly sampled trajectory.
pub fn weak_form_residual(
    states: &[ParticleState],
    kernel: &InteractionKernel,
    source: &SourceKernel,
    functions: &[TestFunction],
) -> Result<WeakFormReport> {
    if states.len() < 3 {
        bail!("need at least three samples");
    }
    let s = states[1].time() - states[0].time();
    let pairing = |st: &ParticleState, g: fn(f64) -> f64| -> f64 {
        st.positions()
            .iter()
            .zip(st.weights())
            .map(|(x, m)| m * g(*x))
            .sum::<f64>()
            / st.total_mass()
    };
    let mut per_function: Vec<(String, f64)> = functions.iter().map(|f| (f.name.to_string(), 0.0)).collect();
    for k in 1..states.len() - 1 {
        let st = &states[k];
        let (v, dm) = system_rhs(st, kernel, source)?;
        for (tf, slot) in functions.iter().zip(per_function.iter_mut()) {
            let lhs = (pairing(&states[k + 1], tf.f) - pairing(&states[k - 1], tf.f)) / (2.0 * s);
            let rhs = st
                .positions()
                .iter()
                .zip(st.weights())
                .zip(v.iter().zip(&dm))
                .map(|((x, m), (vx, mdot))| m * vx * (tf.df)(*x) + mdot * (tf.f)(*x))
                .sum::<f64>()
                / st.total_mass();
            slot.1 = slot.1.max((lhs - rhs).abs());
        }
    }
    Ok(WeakFormReport {
        sampling_interval: s,
        max_residual: per_function.iter().map(|p| p.1).fold(0.0, f64::max),
        per_function,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct WeakFormStudy {
    pub integration_dt: f64,
    pub reports: Vec<WeakFormReport>,
    /// `log2` of the residual ratio between consecutive intervals.
    pub observed_orders: Vec<f64>,
    /// `C (s^2 + dt^4)` for each interval.
    pub bounds: Vec<f64>,
    pub passed: bool,
}

/// Integrates once with step `dt` and evaluates the residual at each
/// sampling interval (each a multiple of `dt`).
pub fn weak_form_study(
    cfg: &ExperimentConfig,
    n: usize,
    horizon: f64,
    dt: f64,
    intervals: &[f64],
) -> Result<WeakFormStudy> {
    let mut micro = cfg.micro_config()?;
    micro.dt = dt;
    micro.horizon = horizon;
    micro.stationary_speed = None;
    let strides: Vec<usize> = intervals.iter().map(|s| (s / dt).round() as usize).collect();
    if strides.iter().zip(intervals).any(|(&k, s)| k == 0 || (k as f64 * dt - s).abs() > 1e-12) {
        bail!("sampling intervals must be multiples of the integration step");
    }
    let base = strides.iter().copied().reduce(gcd).unwrap_or(1);
    let traj = integrate_micro(&micro, &cfg.initial_state(n)?, base)?;
    let functions = builtin_test_functions();
    let mut reports = Vec::new();
    for &k in &strides {
        let states: Vec<ParticleState> = traj.states.iter().step_by(k / base).cloned().collect();
        reports.push(weak_form_residual(&states, &micro.kernel, &micro.source, &functions)?);
    }
    let observed_orders = reports
        .windows(2)
        .map(|w| (w[0].max_residual / w[1].max_residual).ln() / (w[0].sampling_interval / w[1].sampling_interval).ln())
        .collect();
    let bounds: Vec<f64> = intervals
        .iter()
        .map(|s| WEAK_FORM_CONSTANT * (s * s + dt.powi(4)))
        .collect();
    let passed = reports.iter().zip(&bounds).all(|(r, b)| r.max_residual <= *b);
    Ok(WeakFormStudy {
        integration_dt: dt,
        reports,
        observed_orders,
        bounds,
        passed,
    })
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsCheckReport {
    pub identities: Vec<Check>,
    pub inequalities: InequalityReport,
    pub passed: bool,
}

/// Dirac identities plus the comparison inequalities on random pairs.
pub fn run_metrics_check(cfg: &ExperimentConfig, out: &mut Output) -> Result<MetricsCheckReport> {
    let mut identities = Vec::new();
    for c in [0.5, 1.0, 2.0, 3.0, 10.0] {
        let a = AtomicMeasure::dirac(0.0);
        let b = AtomicMeasure::dirac(c);
        identities.push(Check::close(
            format!("rho(delta_0, delta_{c})"),
            bounded_lipschitz(&a, &b)?.value,
            c.min(2.0),
            METRIC_TOLERANCE,
        ));
        for &p in &cfg.metric_orders {
            identities.push(Check::close(
                format!("W{p}(delta_0, delta_{c})"),
                wasserstein_p_1d(&a, &b, p)?,
                c,
                METRIC_TOLERANCE,
            ));
        }
    }
    let inequalities = check_metric_inequalities(
        cfg.metric_pairs,
        cfg.metric_radius,
        &cfg.metric_orders,
        cfg.seed,
        METRIC_SLACK,
    )?;
    let report = MetricsCheckReport {
        passed: identities.iter().all(|c| c.passed) && inequalities.violations == 0,
        identities,
        inequalities,
    };
    out.json("metrics_check.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct DyadicStudy {
    pub horizon: f64,
    pub atoms: usize,
    pub levels: Vec<u32>,
    /// `sup_t rho(mu^k_t, mu^{k+1}_t)` for each `k` in `levels`.
    pub sup_distances: Vec<f64>,
    /// Consecutive ratios of `sup_distances`.
    pub ratios: Vec<f64>,
}

/// Self-convergence of the atomic splitting scheme under `k -> k + 1`,
/// starting from the cell-midpoint atoms of the preset density.
pub fn dyadic_self_convergence(
    cfg: &ExperimentConfig,
    horizon: f64,
    levels: &[u32],
    atoms: usize,
    samples: usize,
) -> Result<DyadicStudy> {
    let grid = grid_from_density(competition_density, 1.0, cfg.domain[0], cfg.domain[1], atoms)?;
    let mu0 = atomic_from_grid(&grid);
    let (kernel, source) = cfg.kernels()?;
    let times: Vec<f64> = (1..=samples).map(|j| horizon * j as f64 / samples as f64).collect();
    let mut all_levels = levels.to_vec();
    if let Some(&last) = levels.last() {
        all_levels.push(last + 1);
    }
    let runs: Vec<SchemeRun<AtomicMeasure>> = all_levels
        .par_iter()
        .map(|&k| {
            let scheme = SchemeConfig::new(kernel, source.clone(), horizon, k);
            Ok(run_scheme_atomic(&scheme, &mu0, &times)?)
        })
        .collect::<Result<_>>()?;
    let mut sup_distances = Vec::new();
    for pair in runs.windows(2) {
        let mut sup: f64 = 0.0;
        for (a, b) in pair[0].samples.iter().zip(&pair[1].samples) {
            sup = sup.max(bounded_lipschitz(a, b)?.value);
        }
        sup_distances.push(sup);
    }
    let ratios = sup_distances.windows(2).map(|w| w[1] / w[0]).collect();
    Ok(DyadicStudy {
        horizon,
        atoms,
        levels: levels.to_vec(),
        sup_distances,
        ratios,
    })
}
