//! Splitting scheme for the transport equation with source on the line.
//!
//! Each step of size `dt = T / 2^k` first multiplies the weights by
//! `1 + dt * Lambda`, where `Lambda(x) = int S(x, .) d mu^q` is evaluated on the
//! measure at the start of the step, then pushes the result forward along the
//! velocity field of that same starting measure. On a grid the push-forward
//! moves each cell center along its characteristic and splits the mass between
//! the two nearest cell centers.
//!
//! The variant that transports first and adds `dt * h[mu]` at the old atom
//! positions is provided for comparison; it loses positivity.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::{direction_1d, InteractionKernel, SourceKernel};
use crate::measures::{AtomicMeasure, GridMeasure};

/// Largest number of kernel evaluations accepted by the naive source sum.
pub const NAIVE_COST_LIMIT: f64 = 1e9;

const PARALLEL_THRESHOLD: usize = 256;

/// Borrowed view of a one-dimensional measure.
#[derive(Debug, Clone, Copy)]
pub enum MeasureRef<'a> {
    Atomic(&'a AtomicMeasure),
    Grid(&'a GridMeasure),
}

impl<'a> From<&'a AtomicMeasure> for MeasureRef<'a> {
    fn from(m: &'a AtomicMeasure) -> Self {
        Self::Atomic(m)
    }
}

impl<'a> From<&'a GridMeasure> for MeasureRef<'a> {
    fn from(m: &'a GridMeasure) -> Self {
        Self::Grid(m)
    }
}

impl MeasureRef<'_> {
    /// Nonzero atoms as `(positions, weights)`.
    fn atoms(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        match self {
            Self::Atomic(m) => {
                if m.dim() != 1 {
                    return Err(Error::DimensionMismatch {
                        expected: 1,
                        got: m.dim(),
                    });
                }
                Ok(m.atoms()
                    .filter(|(_, w)| *w != 0.0)
                    .map(|(x, w)| (x[0], w))
                    .unzip())
            }
            Self::Grid(g) => Ok(g
                .masses()
                .iter()
                .enumerate()
                .filter(|(_, &w)| w != 0.0)
                .map(|(j, &w)| (g.center(j), w))
                .unzip()),
        }
    }
}

/// Velocity field `V[mu](x) = sum_j w_j phi(y_j - x)` of a frozen measure.
#[derive(Debug, Clone)]
pub struct FlowField {
    kernel: InteractionKernel,
    positions: Vec<f64>,
    weights: Vec<f64>,
    mass: f64,
}

impl FlowField {
    pub fn new<'a>(mu: impl Into<MeasureRef<'a>>, kernel: InteractionKernel) -> Result<Self> {
        let (positions, weights) = mu.into().atoms()?;
        Ok(Self::from_atoms(positions, weights, kernel))
    }

    fn from_atoms(positions: Vec<f64>, weights: Vec<f64>, kernel: InteractionKernel) -> Self {
        let mut order: Vec<usize> = (0..positions.len()).collect();
        order.sort_by(|&a, &b| positions[a].total_cmp(&positions[b]));
        let positions: Vec<f64> = order.iter().map(|&i| positions[i]).collect();
        let weights: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        let mass = weights.iter().sum();
        Self {
            kernel,
            positions,
            weights,
            mass,
        }
    }

    pub fn kernel(&self) -> &InteractionKernel {
        &self.kernel
    }

    pub fn velocity(&self, x: f64) -> f64 {
        match self.kernel {
            InteractionKernel::Zero => 0.0,
            InteractionKernel::SaturatedLinear => self.mass * self.kernel.pair_1d(x, x),
            InteractionKernel::Sin2 { radius } => {
                let lo = self.positions.partition_point(|&y| y < x - radius);
                let hi = self.positions.partition_point(|&y| y <= x + radius);
                let mut acc = 0.0;
                for j in lo..hi {
                    acc += self.weights[j] * self.kernel.eval_1d(self.positions[j] - x);
                }
                acc
            }
        }
    }

    /// Endpoint of the characteristic from `x` over time `t`, using `substeps`
    /// midpoint-rule steps.
    pub fn flow(&self, x: f64, t: f64, substeps: usize) -> f64 {
        let n = substeps.max(1);
        let h = t / n as f64;
        let mut y = x;
        for _ in 0..n {
            let k1 = self.velocity(y);
            let k2 = self.velocity(y + 0.5 * h * k1);
            y += h * k2;
        }
        y
    }
}

/// `V[mu](x)`.
pub fn velocity_eval<'a>(
    mu: impl Into<MeasureRef<'a>>,
    kernel: &InteractionKernel,
    x: f64,
) -> Result<f64> {
    Ok(FlowField::new(mu, *kernel)?.velocity(x))
}

fn map_rows<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    if n < PARALLEL_THRESHOLD {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Rates `Lambda(x_i) = int S(x_i, .) d mu^q` at the given atoms of `mu`,
/// using closed or factored forms where available.
pub fn source_rates(positions: &[f64], weights: &[f64], source: &SourceKernel) -> Result<Vec<f64>> {
    let n = positions.len();
    match source {
        SourceKernel::M1 { beta, phi } => {
            let field = FlowField::from_atoms(positions.to_vec(), weights.to_vec(), *phi);
            let a: Vec<f64> = positions.iter().map(|&x| field.velocity(x)).collect();
            Ok(map_rows(n, |i| {
                let (mut d, mut b) = (0.0, 0.0);
                for j in 0..n {
                    let h = direction_1d(positions[i] - positions[j]);
                    d += weights[j] * h;
                    b += weights[j] * a[j] * h;
                }
                0.5 * beta * (a[i] * d + b)
            }))
        }
        SourceKernel::Linear => {
            let mass: f64 = weights.iter().sum();
            let moment: f64 = positions.iter().zip(weights).map(|(x, w)| x * w).sum();
            Ok(positions.iter().map(|x| x * mass - moment).collect())
        }
        SourceKernel::Custom(_) => source_rates_naive(positions, weights, source),
    }
}

/// Rates by the full `q`-fold sum over atoms.
pub fn source_rates_naive(
    positions: &[f64],
    weights: &[f64],
    source: &SourceKernel,
) -> Result<Vec<f64>> {
    let n = positions.len();
    let q = source.arity();
    let cost = (n as f64).powi(q as i32 + 1);
    if cost > NAIVE_COST_LIMIT {
        return Err(Error::TooExpensive {
            cost,
            limit: NAIVE_COST_LIMIT,
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    Ok(map_rows(n, |i| {
        let mut index = vec![0usize; q];
        let mut args = vec![0.0; q + 1];
        args[0] = positions[i];
        let mut acc = 0.0;
        loop {
            let mut prod = 1.0;
            for (slot, &j) in args[1..].iter_mut().zip(&index) {
                *slot = positions[j];
                prod *= weights[j];
            }
            acc += prod * source.eval_1d(&args);
            let mut k = q;
            loop {
                if k == 0 {
                    return acc;
                }
                k -= 1;
                index[k] += 1;
                if index[k] < n {
                    break;
                }
                index[k] = 0;
            }
        }
    }))
}

/// Signed source measure `h[mu]`, carried by the atoms or cells of `mu`.
pub fn source_eval_atomic(mu: &AtomicMeasure, source: &SourceKernel) -> Result<AtomicMeasure> {
    let (positions, weights) = MeasureRef::Atomic(mu).atoms()?;
    let rates = source_rates(&positions, &weights, source)?;
    let h = weights.iter().zip(&rates).map(|(w, r)| w * r).collect();
    AtomicMeasure::new(1, positions, h)
}

pub fn source_eval_grid(mu: &GridMeasure, source: &SourceKernel) -> Result<GridMeasure> {
    let rates = GridTables::new(mu, source).rates(mu, source)?;
    let h = mu.masses().iter().zip(&rates).map(|(w, r)| w * r).collect();
    GridMeasure::new(mu.left(), mu.right(), h)
}

/// Translation tables for a uniform grid: pair quantities between cell
/// centers depend only on the index difference.
#[derive(Debug, Clone)]
struct GridTables {
    cells: usize,
    phi: Vec<f64>,
    dir: Vec<f64>,
}

impl GridTables {
    fn new(grid: &GridMeasure, source: &SourceKernel) -> Self {
        let g = grid.cells();
        let h = grid.cell_width();
        let offsets = (0..2 * g - 1).map(|k| (k as f64 - (g - 1) as f64) * h);
        let (phi, dir) = match source {
            SourceKernel::M1 { phi, .. } => offsets
                .map(|d| (phi.eval_1d(d), direction_1d(d)))
                .unzip(),
            _ => (Vec::new(), Vec::new()),
        };
        Self { cells: g, phi, dir }
    }

    /// Entry for `x_i - x_j` (or `x_j - x_i` via the odd symmetry).
    #[inline]
    fn index(&self, i: usize, j: usize) -> usize {
        i + self.cells - 1 - j
    }

    fn rates(&self, grid: &GridMeasure, source: &SourceKernel) -> Result<Vec<f64>> {
        let w = grid.masses();
        let g = self.cells;
        match source {
            SourceKernel::M1 { beta, .. } => {
                let active: Vec<usize> = (0..g).filter(|&j| w[j] != 0.0).collect();
                // A_i = sum_z w_z phi(x_z - x_i)
                let a = map_rows(g, |i| {
                    active
                        .iter()
                        .map(|&z| w[z] * self.phi[self.index(z, i)])
                        .sum()
                });
                Ok(map_rows(g, |i| {
                    if w[i] == 0.0 {
                        return 0.0;
                    }
                    let (mut d, mut b) = (0.0, 0.0);
                    for &j in &active {
                        let h = self.dir[self.index(i, j)];
                        d += w[j] * h;
                        b += w[j] * a[j] * h;
                    }
                    0.5 * beta * (a[i] * d + b)
                }))
            }
            _ => source_rates(&grid.centers(), w, source),
        }
    }
}

/// Rates on the cell centers of `mu` by the naive `q`-fold sum.
pub fn grid_source_rates_naive(mu: &GridMeasure, source: &SourceKernel) -> Result<Vec<f64>> {
    source_rates_naive(&mu.centers(), mu.masses(), source)
}

/// Rates on the cell centers of `mu` by the factored evaluation.
pub fn grid_source_rates(mu: &GridMeasure, source: &SourceKernel) -> Result<Vec<f64>> {
    GridTables::new(mu, source).rates(mu, source)
}

#[derive(Debug, Clone)]
pub struct SchemeConfig {
    pub kernel: InteractionKernel,
    pub source: SourceKernel,
    pub horizon: f64,
    /// Refinement level `k`; the step is `horizon / 2^k`.
    pub level: u32,
    pub transport_substeps: usize,
    /// Largest accepted value of `dt * S_bar`.
    pub step_bound_limit: f64,
    /// Overrides the bound on `|S|` derived from the kernel.
    pub source_bound: Option<f64>,
}

impl SchemeConfig {
    pub fn new(kernel: InteractionKernel, source: SourceKernel, horizon: f64, level: u32) -> Self {
        Self {
            kernel,
            source,
            horizon,
            level,
            transport_substeps: 4,
            step_bound_limit: 1.0,
            source_bound: None,
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / 2f64.powi(self.level as i32)
    }

    pub fn steps(&self) -> usize {
        1usize << self.level
    }

    /// `S_bar` for arguments in `[left, right]`.
    pub fn source_bound_on(&self, left: f64, right: f64) -> f64 {
        self.source_bound
            .unwrap_or_else(|| self.source.bound_on_interval(left, right))
    }

    /// Fails unless `dt * S_bar` stays within the configured limit.
    pub fn check_step(&self, left: f64, right: f64) -> Result<()> {
        let bound = self.source_bound_on(left, right);
        let dt = self.dt();
        let product = dt * bound;
        if product > self.step_bound_limit {
            return Err(Error::StepTooLarge {
                dt,
                bound,
                product,
                limit: self.step_bound_limit,
            });
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be non-negative, got {}",
                self.horizon
            )));
        }
        if self.level > 40 {
            return Err(Error::InvalidArgument("refinement level above 40".into()));
        }
        Ok(())
    }
}

/// Smallest level `k` with `horizon / 2^k * bound <= limit`.
pub fn level_for(horizon: f64, bound: f64, limit: f64) -> u32 {
    let mut k = 0;
    while horizon / 2f64.powi(k as i32) * bound > limit && k < 40 {
        k += 1;
    }
    k
}

/// Radius bound `(phi0/(2L) + R0) e^{2 L t} - phi0/(2L)` for the support of the
/// solution started inside the ball of radius `initial_radius`.
pub fn support_radius_bound(kernel: &InteractionKernel, initial_radius: f64, t: f64) -> f64 {
    let l = kernel.lipschitz_constant();
    let phi0 = kernel.phi_at_zero();
    if l == 0.0 {
        return initial_radius + phi0 * t;
    }
    let c = phi0 / (2.0 * l);
    (c + initial_radius) * (2.0 * l * t).exp() - c
}

/// Reusable state for grid steps on a fixed geometry.
#[derive(Debug, Clone)]
pub struct GridStepper {
    config: SchemeConfig,
    tables: GridTables,
    left: f64,
    right: f64,
    width: f64,
}

impl GridStepper {
    pub fn new(config: &SchemeConfig, geometry: &GridMeasure) -> Result<Self> {
        config.validate()?;
        config.check_step(geometry.left(), geometry.right())?;
        Ok(Self {
            config: config.clone(),
            tables: GridTables::new(geometry, &config.source),
            left: geometry.left(),
            right: geometry.right(),
            width: geometry.cell_width(),
        })
    }

    /// One step of the splitting scheme.
    pub fn step(&self, mu: &GridMeasure) -> Result<GridMeasure> {
        let dt = self.config.dt();
        let g = self.tables.cells;
        if mu.cells() != g || mu.left() != self.left || mu.right() != self.right {
            return Err(Error::InvalidArgument("grid geometry changed between steps".into()));
        }
        let rates = self.tables.rates(mu, &self.config.source)?;
        let mut after_source = Vec::with_capacity(g);
        for (cell, (w, r)) in mu.masses().iter().zip(&rates).enumerate() {
            let m = w * (1.0 + dt * r);
            if m < 0.0 {
                return Err(Error::NegativeMass { cell, mass: m });
            }
            after_source.push(m);
        }
        let field = FlowField::new(mu, self.config.kernel)?;
        let substeps = self.config.transport_substeps;
        let arrivals = map_rows(g, |j| {
            if after_source[j] == 0.0 {
                f64::NAN
            } else {
                field.flow(mu.center(j), dt, substeps)
            }
        });
        let mut out = vec![0.0; g];
        for (j, (&a, &m)) in arrivals.iter().zip(&after_source).enumerate() {
            if m == 0.0 {
                continue;
            }
            if !(a >= self.left && a <= self.right) {
                return Err(Error::LeftDomain {
                    from: mu.center(j),
                    to: a,
                    left: self.left,
                    right: self.right,
                });
            }
            let s = (a - self.left) / self.width - 0.5;
            if s <= 0.0 {
                out[0] += m;
            } else if s >= (g - 1) as f64 {
                out[g - 1] += m;
            } else {
                let k = s.floor() as usize;
                let frac = s - k as f64;
                out[k] += m * (1.0 - frac);
                out[k + 1] += m * frac;
            }
        }
        GridMeasure::new(self.left, self.right, out)
    }
}

/// One grid step; see [`GridStepper`] for repeated use.
pub fn scheme_s_step(mu: &GridMeasure, config: &SchemeConfig) -> Result<GridMeasure> {
    GridStepper::new(config, mu)?.step(mu)
}

/// One step of the splitting scheme on atoms: weights change at fixed atoms,
/// then every atom moves along the frozen field.
pub fn scheme_s_step_atomic(mu: &AtomicMeasure, config: &SchemeConfig) -> Result<AtomicMeasure> {
    config.validate()?;
    let (positions, weights) = MeasureRef::Atomic(mu).atoms()?;
    if let Some((lo, hi)) = bounds(&positions) {
        config.check_step(lo, hi)?;
    }
    let dt = config.dt();
    let rates = source_rates(&positions, &weights, &config.source)?;
    let mut new_weights = Vec::with_capacity(weights.len());
    for (cell, (w, r)) in weights.iter().zip(&rates).enumerate() {
        let m = w * (1.0 + dt * r);
        if m < 0.0 {
            return Err(Error::NegativeMass { cell, mass: m });
        }
        new_weights.push(m);
    }
    let field = FlowField::from_atoms(positions.clone(), weights, config.kernel);
    let moved = map_rows(positions.len(), |i| {
        field.flow(positions[i], dt, config.transport_substeps)
    });
    AtomicMeasure::new(1, moved, new_weights)
}

/// One step of the transport-then-add variant: the pushed measure plus
/// `dt * h[mu]` placed at the old atoms.
pub fn scheme_stilde_step_atomic(
    mu: &AtomicMeasure,
    config: &SchemeConfig,
) -> Result<AtomicMeasure> {
    config.validate()?;
    let (positions, weights) = MeasureRef::Atomic(mu).atoms()?;
    let dt = config.dt();
    let rates = source_rates(&positions, &weights, &config.source)?;
    let field = FlowField::from_atoms(positions.clone(), weights.clone(), config.kernel);
    let mut all_positions: Vec<f64> = positions
        .iter()
        .map(|&x| field.flow(x, dt, config.transport_substeps))
        .collect();
    let mut all_weights = weights.clone();
    all_positions.extend_from_slice(&positions);
    all_weights.extend(weights.iter().zip(&rates).map(|(w, r)| dt * w * r));
    Ok(AtomicMeasure::new(1, all_positions, all_weights)?.canonicalize())
}

fn bounds(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Some((lo, hi))
}

/// Per-sample diagnostics of a scheme run.
#[derive(Debug, Clone, Copy, Serialize, PartialEq)]
pub struct SchemeDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub min_mass: f64,
    pub support_left: f64,
    pub support_right: f64,
    pub tv: f64,
}

impl SchemeDiagnostics {
    fn of_grid(t: f64, g: &GridMeasure) -> Self {
        let (support_left, support_right) = g.support_bounds().unwrap_or((f64::NAN, f64::NAN));
        Self {
            t,
            mass: g.total_mass(),
            min_mass: g.min_mass(),
            support_left,
            support_right,
            tv: g.total_variation(),
        }
    }

    fn of_atomic(t: f64, m: &AtomicMeasure) -> Self {
        let (support_left, support_right) = m.support_bounds().unwrap_or((f64::NAN, f64::NAN));
        Self {
            t,
            mass: m.total_mass(),
            min_mass: m.min_weight().unwrap_or(0.0),
            support_left,
            support_right,
            tv: m.total_variation(),
        }
    }
}

/// Sampled output of a scheme run.
#[derive(Debug, Clone)]
pub struct SchemeRun<M> {
    pub dt: f64,
    pub times: Vec<f64>,
    pub samples: Vec<M>,
    pub diagnostics: Vec<SchemeDiagnostics>,
}

/// Step indices for the requested times, snapped to multiples of `dt`.
fn sample_steps(config: &SchemeConfig, sample_times: &[f64]) -> Result<Vec<usize>> {
    let dt = config.dt();
    let mut steps = Vec::with_capacity(sample_times.len());
    for &t in sample_times {
        if !(t >= 0.0 && t <= config.horizon * (1.0 + 1e-12)) {
            return Err(Error::InvalidArgument(format!(
                "sample time {t} outside [0, {}]",
                config.horizon
            )));
        }
        steps.push(((t / dt).round() as usize).min(config.steps()));
    }
    Ok(steps)
}

/// Runs the grid scheme to the horizon and records the requested samples.
pub fn run_scheme(
    config: &SchemeConfig,
    mu0: &GridMeasure,
    sample_times: &[f64],
) -> Result<SchemeRun<GridMeasure>> {
    if mu0.min_mass() < 0.0 || !mu0.is_probability(1e-9) {
        return Err(Error::NotProbability(format!(
            "initial grid has mass {} and minimum cell {}",
            mu0.total_mass(),
            mu0.min_mass()
        )));
    }
    let stepper = GridStepper::new(config, mu0)?;
    let wanted = sample_steps(config, sample_times)?;
    let last = wanted.iter().copied().max().unwrap_or(0);
    let dt = config.dt();
    let mut run = SchemeRun {
        dt,
        times: Vec::new(),
        samples: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut mu = mu0.clone();
    for n in 0..=last {
        if n > 0 {
            mu = stepper.step(&mu)?;
        }
        for _ in wanted.iter().filter(|&&w| w == n) {
            let t = n as f64 * dt;
            run.diagnostics.push(SchemeDiagnostics::of_grid(t, &mu));
            run.times.push(t);
            run.samples.push(mu.clone());
        }
    }
    Ok(run)
}

/// Atomic counterpart of [`run_scheme`].
pub fn run_scheme_atomic(
    config: &SchemeConfig,
    mu0: &AtomicMeasure,
    sample_times: &[f64],
) -> Result<SchemeRun<AtomicMeasure>> {
    let wanted = sample_steps(config, sample_times)?;
    let last = wanted.iter().copied().max().unwrap_or(0);
    let dt = config.dt();
    let mut run = SchemeRun {
        dt,
        times: Vec::new(),
        samples: Vec::new(),
        diagnostics: Vec::new(),
    };
    let mut mu = mu0.clone();
    for n in 0..=last {
        if n > 0 {
            mu = scheme_s_step_atomic(&mu, config)?;
        }
        for _ in wanted.iter().filter(|&&w| w == n) {
            let t = n as f64 * dt;
            run.diagnostics.push(SchemeDiagnostics::of_atomic(t, &mu));
            run.times.push(t);
            run.samples.push(mu.clone());
        }
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::grid_from_density;
    use proptest::prelude::*;

    fn two_atom_config(dt: f64) -> SchemeConfig {
        SchemeConfig::new(
            InteractionKernel::SaturatedLinear,
            SourceKernel::Linear,
            dt,
            0,
        )
    }

    fn two_atoms() -> AtomicMeasure {
        AtomicMeasure::from_pairs(&[(1.0, 0.5), (-1.0, 0.5)]).unwrap()
    }

    #[test]
    fn velocity_of_dirac() {
        let k = InteractionKernel::sin2(0.2).unwrap();
        let mu = AtomicMeasure::dirac(0.5);
        let v = velocity_eval(&mu, &k, 0.45).unwrap();
        assert!((v - k.eval_1d(0.05)).abs() < 1e-15);
        assert_eq!(velocity_eval(&mu, &k, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn saturated_field_scales_with_mass() {
        let k = InteractionKernel::SaturatedLinear;
        let mu = two_atoms();
        assert_eq!(velocity_eval(&mu, &k, 3.0).unwrap(), 1.0);
        assert_eq!(velocity_eval(&mu, &k, -1.0).unwrap(), -1.0);
        assert_eq!(velocity_eval(&mu, &k, 0.25).unwrap(), 0.25);
    }

    #[test]
    fn linear_source_on_two_atoms() {
        let h = source_eval_atomic(&two_atoms(), &SourceKernel::Linear).unwrap();
        let expected = AtomicMeasure::from_pairs(&[(1.0, 0.5), (-1.0, -0.5)]).unwrap();
        assert!(h.measure_equal(&expected, 1e-15));
    }

    #[test]
    fn zero_beta_source_vanishes() {
        let s = SourceKernel::m1(0.0, 0.2).unwrap();
        let mu = AtomicMeasure::from_pairs(&[(0.1, 0.3), (0.2, 0.7)]).unwrap();
        let h = source_eval_atomic(&mu, &s).unwrap();
        assert!(h.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn factored_rates_match_naive_on_atoms() {
        let s = SourceKernel::m1(100.0, 0.2).unwrap();
        let x = [0.1, 0.15, 0.22, 0.3, 0.5, 0.52];
        let w = [0.1, 0.2, 0.15, 0.25, 0.2, 0.1];
        let a = source_rates(&x, &w, &s).unwrap();
        let b = source_rates_naive(&x, &w, &s).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12 * 100.0);
        }
    }

    #[test]
    fn identity_without_source_or_field() {
        let cfg = SchemeConfig::new(
            InteractionKernel::Zero,
            SourceKernel::m1(0.0, 0.2).unwrap(),
            1.0,
            3,
        );
        let g = grid_from_density(|x| 1.0 + x, 1.0, 0.0, 1.0, 16).unwrap();
        let next = scheme_s_step(&g, &cfg).unwrap();
        for (a, b) in g.masses().iter().zip(next.masses()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn source_only_grid_step_on_two_atoms() {
        let dt = 0.1;
        let mut cfg = two_atom_config(dt);
        cfg.kernel = InteractionKernel::Zero;
        let mut mass = vec![0.0; 5];
        mass[0] = 0.5;
        mass[4] = 0.5;
        let g = GridMeasure::new(-1.25, 1.25, mass).unwrap();
        let next = scheme_s_step(&g, &cfg).unwrap();
        assert!((next.masses()[4] - 0.5 * (1.0 + dt)).abs() < 1e-15);
        assert!((next.masses()[0] - 0.5 * (1.0 - dt)).abs() < 1e-15);
    }

    #[test]
    fn oversized_step_rejected() {
        let cfg = SchemeConfig::new(
            InteractionKernel::sin2(0.2).unwrap(),
            SourceKernel::m1(100.0, 0.2).unwrap(),
            1.0,
            2,
        );
        let g = grid_from_density(|_| 1.0, 1.0, 0.0, 1.0, 10).unwrap();
        assert!(matches!(
            scheme_s_step(&g, &cfg),
            Err(Error::StepTooLarge { .. })
        ));
    }

    #[test]
    fn leaving_domain_is_reported() {
        let mut cfg = two_atom_config(0.5);
        cfg.source = SourceKernel::m1(0.0, 0.2).unwrap();
        let g = GridMeasure::new(-1.0, 1.0, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            scheme_s_step(&g, &cfg),
            Err(Error::LeftDomain { .. })
        ));
    }

    #[test]
    fn atomic_step_one_matches_closed_form() {
        for dt in [0.1, 0.01] {
            let next = scheme_s_step_atomic(&two_atoms(), &two_atom_config(dt)).unwrap();
            let expected = AtomicMeasure::from_pairs(&[
                (1.0 + dt, 0.5 * (1.0 + dt)),
                (-1.0 - dt, 0.5 * (1.0 - dt)),
            ])
            .unwrap();
            assert!(next.measure_equal(&expected, 1e-12));
        }
    }

    #[test]
    fn tilde_step_one_matches_closed_form() {
        let dt = 0.1;
        let next = scheme_stilde_step_atomic(&two_atoms(), &two_atom_config(dt)).unwrap();
        let expected = AtomicMeasure::from_pairs(&[
            (1.0 + dt, 0.5),
            (1.0, 0.5 * dt),
            (-1.0, -0.5 * dt),
            (-1.0 - dt, 0.5),
        ])
        .unwrap();
        assert!(next.measure_equal(&expected, 1e-12));
        assert!((next.total_variation() - (1.0 + dt)).abs() < 1e-12);
        assert!((next.first_moment() - dt).abs() < 1e-12);
    }

    #[test]
    fn run_returns_initial_at_time_zero() {
        let cfg = SchemeConfig::new(
            InteractionKernel::sin2(0.2).unwrap(),
            SourceKernel::m1(100.0, 0.2).unwrap(),
            0.0,
            0,
        );
        let g = grid_from_density(|_| 1.0, 1.0, 0.0, 1.0, 8).unwrap();
        let run = run_scheme(&cfg, &g, &[0.0]).unwrap();
        assert_eq!(run.samples, vec![g]);
    }

    #[test]
    fn support_bound_formula() {
        let k = InteractionKernel::sin2(0.5).unwrap();
        let l = k.lipschitz_constant();
        assert!((support_radius_bound(&k, 1.0, 0.1) - (0.2 * l).exp()).abs() < 1e-12);
        assert_eq!(support_radius_bound(&InteractionKernel::Zero, 2.0, 5.0), 2.0);
    }

    #[test]
    fn level_for_meets_limit() {
        let k = level_for(10.0, 78.5, 0.5);
        assert!(10.0 / 2f64.powi(k as i32) * 78.5 <= 0.5);
        assert!(10.0 / 2f64.powi(k as i32 - 1) * 78.5 > 0.5);
    }

    proptest! {
        #[test]
        fn grid_step_conserves_mass_and_sign(seed in 0u64..50) {
            let shift = seed as f64 / 100.0;
            let g = grid_from_density(
                |x| (-(x - 0.3 - shift).powi(2) * 40.0).exp() + 0.5 * (-(x - 0.7).powi(2) * 60.0).exp(),
                1.0, 0.0, 1.0, 64,
            ).unwrap();
            let cfg = SchemeConfig::new(
                InteractionKernel::sin2(0.2).unwrap(),
                SourceKernel::m1(100.0, 0.2).unwrap(),
                0.05,
                3,
            );
            let next = scheme_s_step(&g, &cfg).unwrap();
            prop_assert!((next.total_mass() - 1.0).abs() < 1e-13);
            prop_assert!(next.min_mass() >= 0.0);
        }

        #[test]
        fn source_measure_has_zero_mass(seed in 0u64..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(1..20);
            let pairs: Vec<(f64, f64)> =
                (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))).collect();
            let mu = AtomicMeasure::from_pairs(&pairs).unwrap();
            let s = SourceKernel::m1(100.0, 0.2).unwrap();
            let h = source_eval_atomic(&mu, &s).unwrap();
            let scale = h.total_variation().max(1.0);
            prop_assert!(h.total_mass().abs() <= 1e-12 * scale);
            prop_assert_eq!(h.len(), mu.canonicalize().len());
        }
    }
}
