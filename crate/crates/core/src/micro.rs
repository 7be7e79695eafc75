//! Weighted microscopic system.
//!
//! Positions follow `x_i' = (1/M) sum_j m_j phi(x_j - x_i)` and weights follow
//! `m_i' = m_i M^{-q} sum_{j_1..j_q} m_{j_1} .. m_{j_q} S(x_i, x_{j_1}, .., x_{j_q})`.
//! Row sums are evaluated sequentially in index order, so results do not depend
//! on the number of worker threads.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{direction, direction_1d, InteractionKernel, SourceKernel};
use crate::measures::cell_integrals;

/// Largest number of kernel evaluations accepted by [`weight_rhs_naive`].
pub const NAIVE_COST_LIMIT: f64 = 1e9;

/// Rows below this count are evaluated on the calling thread.
const PARALLEL_THRESHOLD: usize = 64;

/// Positions `x` (row-major `N x d`), weights `m`, total mass `M` and time.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    dim: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
    total_mass: f64,
    time: f64,
}

impl ParticleState {
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>, total_mass: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if positions.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: weights.len() * dim,
                got: positions.len(),
            });
        }
        if let Some(index) = positions.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "positions",
                index: index / dim,
            });
        }
        if let Some(index) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "weights",
                index,
            });
        }
        if !total_mass.is_finite() {
            return Err(Error::NonFinite {
                what: "total mass",
                index: 0,
            });
        }
        Ok(Self {
            dim,
            positions,
            weights,
            total_mass,
            time: 0.0,
        })
    }

    /// One-dimensional state with `M = sum m_i`.
    pub fn from_line(positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let total = weights.iter().sum();
        Self::new(1, positions, weights, total)
    }

    pub fn with_time(mut self, time: f64) -> Self {
        self.time = time;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn min_weight(&self) -> f64 {
        self.weights.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Weighted mean position `(1/M) sum m_i x_i`.
    pub fn barycenter(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (x, m) in self.positions.chunks(self.dim).zip(&self.weights) {
            for (o, c) in out.iter_mut().zip(x) {
                *o += m * c;
            }
        }
        out.iter_mut().for_each(|o| *o /= self.total_mass);
        out
    }

    /// Largest distance between two particles.
    pub fn diameter(&self) -> f64 {
        if self.dim == 1 {
            let lo = self.positions.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = self.positions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return if self.is_empty() { 0.0 } else { hi - lo };
        }
        let mut best: f64 = 0.0;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                best = best.max(distance(self.position(i), self.position(j)));
            }
        }
        best
    }

    /// Shifts every position by `offset`.
    pub fn translated(&self, offset: &[f64]) -> Self {
        let mut out = self.clone();
        for x in out.positions.chunks_mut(self.dim) {
            for (c, o) in x.iter_mut().zip(offset) {
                *c += o;
            }
        }
        out
    }

    /// Relabels particles so that new particle `k` is old particle `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut positions = Vec::with_capacity(self.positions.len());
        let mut weights = Vec::with_capacity(self.len());
        for &p in perm {
            positions.extend_from_slice(self.position(p));
            weights.push(self.weights[p]);
        }
        Self {
            positions,
            weights,
            ..self.clone()
        }
    }

    fn check_valid_for_run(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("state has no particles".into()));
        }
        if self.total_mass <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "total mass must be positive, got {}",
                self.total_mass
            )));
        }
        if let Some((index, &weight)) = self.weights.iter().enumerate().find(|(_, &w)| w <= 0.0) {
            return Err(Error::NonPositiveWeight {
                time: self.time,
                index,
                weight,
            });
        }
        Ok(())
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn rows<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    if n < PARALLEL_THRESHOLD {
        (0..n).map(f).collect()
    } else {
        (0..n).into_par_iter().map(f).collect()
    }
}

/// Velocities `(1/M) sum_j m_j phi(x_j - x_i)`, row-major `N x d`.
pub fn position_rhs(state: &ParticleState, kernel: &InteractionKernel) -> Vec<f64> {
    let n = state.len();
    let d = state.dim();
    let inv_mass = 1.0 / state.total_mass();
    let x = state.positions();
    let m = state.weights();
    if d == 1 {
        return rows(n, |i| {
            let xi = x[i];
            let mut acc = 0.0;
            for j in 0..n {
                acc += m[j] * kernel.pair_1d(xi, x[j]);
            }
            acc * inv_mass
        });
    }
    let per_row: Vec<Vec<f64>> = rows(n, |i| {
        let mut acc = vec![0.0; d];
        let mut scratch = vec![0.0; d];
        let mut out = vec![0.0; d];
        for j in 0..n {
            kernel.pair(state.position(i), state.position(j), &mut scratch, &mut out);
            for (a, o) in acc.iter_mut().zip(&out) {
                *a += m[j] * o;
            }
        }
        acc.iter_mut().for_each(|a| *a *= inv_mass);
        acc
    });
    per_row.concat()
}

/// Weight derivatives by the full `(q+1)`-fold sum.
pub fn weight_rhs_naive(state: &ParticleState, source: &SourceKernel) -> Result<Vec<f64>> {
    let n = state.len();
    let q = source.arity();
    let cost = (n as f64).powi(q as i32 + 1);
    if cost > NAIVE_COST_LIMIT {
        return Err(Error::TooExpensive {
            cost,
            limit: NAIVE_COST_LIMIT,
        });
    }
    let d = state.dim();
    let m = state.weights();
    let norm = state.total_mass().powi(q as i32);
    Ok(rows(n, |i| {
        let mut index = vec![0usize; q];
        let mut acc = 0.0;
        let mut scalar_args = vec![0.0; q + 1];
        if n == 0 {
            return 0.0;
        }
        loop {
            let mut prod = 1.0;
            for &j in &index {
                prod *= m[j];
            }
            let s = if d == 1 {
                scalar_args[0] = state.positions()[i];
                for (slot, &j) in scalar_args[1..].iter_mut().zip(&index) {
                    *slot = state.positions()[j];
                }
                source.eval_1d(&scalar_args)
            } else {
                let mut args: Vec<&[f64]> = Vec::with_capacity(q + 1);
                args.push(state.position(i));
                args.extend(index.iter().map(|&j| state.position(j)));
                source.eval(&args)
            };
            acc += prod * s;
            // Odometer increment over the multi-index.
            let mut k = q;
            loop {
                if k == 0 {
                    return m[i] * acc / norm;
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

/// Weight derivatives for the pairwise competition kernel in `O(N^2)`:
/// with `A_i = (1/M) sum_k m_k phi(x_k - x_i)`,
/// `m_i' = (beta/M) m_i sum_j m_j <(A_i + A_j)/2, dir(x_i - x_j)>`.
pub fn weight_rhs_m1_factored(state: &ParticleState, source: &SourceKernel) -> Result<Vec<f64>> {
    let SourceKernel::M1 { beta, phi } = source else {
        return Err(Error::UnsupportedSource(source.to_string()));
    };
    let n = state.len();
    let d = state.dim();
    let m = state.weights();
    let scale = beta / state.total_mass();
    let field = position_rhs(state, phi);
    if d == 1 {
        let x = state.positions();
        return Ok(rows(n, |i| {
            let mut acc = 0.0;
            for j in 0..n {
                acc += m[j] * 0.5 * (field[i] + field[j]) * direction_1d(x[i] - x[j]);
            }
            scale * m[i] * acc
        }));
    }
    Ok(rows(n, |i| {
        let mut acc = 0.0;
        let mut delta = vec![0.0; d];
        let mut dir = vec![0.0; d];
        let ai = &field[i * d..(i + 1) * d];
        for j in 0..n {
            let aj = &field[j * d..(j + 1) * d];
            for ((o, a), b) in delta.iter_mut().zip(state.position(i)).zip(state.position(j)) {
                *o = a - b;
            }
            direction(&delta, &mut dir);
            let dot: f64 = ai
                .iter()
                .zip(aj)
                .zip(&dir)
                .map(|((a, b), h)| 0.5 * (a + b) * h)
                .sum();
            acc += m[j] * dot;
        }
        scale * m[i] * acc
    }))
}

/// Factored evaluation when available, otherwise the naive sum.
pub fn weight_rhs(state: &ParticleState, source: &SourceKernel) -> Result<Vec<f64>> {
    if source.is_m1() {
        weight_rhs_m1_factored(state, source)
    } else {
        weight_rhs_naive(state, source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    Euler,
    #[default]
    Rk4,
}

/// How initial weights are scaled: to sum to one, or to sum to `N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum MassConvention {
    #[serde(rename = "unit")]
    Unit,
    #[default]
    #[serde(rename = "N")]
    N,
}

impl MassConvention {
    pub fn total_mass(self, n: usize) -> f64 {
        match self {
            Self::Unit => 1.0,
            Self::N => n as f64,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MicroConfig {
    pub kernel: InteractionKernel,
    pub source: SourceKernel,
    pub dt: f64,
    pub horizon: f64,
    pub integrator: Integrator,
    /// Stop early once the largest particle speed drops below this value.
    pub stationary_speed: Option<f64>,
}

impl MicroConfig {
    pub fn new(kernel: InteractionKernel, source: SourceKernel, dt: f64, horizon: f64) -> Self {
        Self {
            kernel,
            source,
            dt,
            horizon,
            integrator: Integrator::Rk4,
            stationary_speed: None,
        }
    }

    fn validate(&self) -> Result<usize> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon must be non-negative, got {}",
                self.horizon
            )));
        }
        if self.dt > self.horizon && self.horizon > 0.0 {
            return Err(Error::InvalidArgument("dt exceeds the horizon".into()));
        }
        Ok((self.horizon / self.dt).round() as usize)
    }
}

/// Position and weight derivatives of the full system.
pub fn system_rhs(
    state: &ParticleState,
    kernel: &InteractionKernel,
    source: &SourceKernel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    Ok((position_rhs(state, kernel), weight_rhs(state, source)?))
}

fn shifted(base: &ParticleState, dx: &[f64], dm: &[f64], h: f64) -> ParticleState {
    let mut out = base.clone();
    out.positions.iter_mut().zip(dx).for_each(|(x, v)| *x += h * v);
    out.weights.iter_mut().zip(dm).for_each(|(m, v)| *m += h * v);
    out
}

/// One explicit step of size `h`; returns the new state and the position
/// increment rate used for the stationarity test.
pub fn step(
    state: &ParticleState,
    config: &MicroConfig,
    h: f64,
) -> Result<(ParticleState, f64)> {
    let (k, s) = (&config.kernel, &config.source);
    let (dx1, dm1) = system_rhs(state, k, s)?;
    let (dx, dm) = match config.integrator {
        Integrator::Euler => (dx1, dm1),
        Integrator::Rk4 => {
            let (dx2, dm2) = system_rhs(&shifted(state, &dx1, &dm1, 0.5 * h), k, s)?;
            let (dx3, dm3) = system_rhs(&shifted(state, &dx2, &dm2, 0.5 * h), k, s)?;
            let (dx4, dm4) = system_rhs(&shifted(state, &dx3, &dm3, h), k, s)?;
            let combine = |a: &[f64], b: &[f64], c: &[f64], d: &[f64]| -> Vec<f64> {
                a.iter()
                    .zip(b)
                    .zip(c)
                    .zip(d)
                    .map(|(((a, b), c), d)| (a + 2.0 * b + 2.0 * c + d) / 6.0)
                    .collect()
            };
            (combine(&dx1, &dx2, &dx3, &dx4), combine(&dm1, &dm2, &dm3, &dm4))
        }
    };
    let speed = dx.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut next = shifted(state, &dx, &dm, h);
    next.time = state.time + h;
    Ok((next, speed))
}

/// Sampled solution of the microscopic system.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub states: Vec<ParticleState>,
    /// Set when the run stopped before the horizon because particles stopped moving.
    pub stopped_early_at: Option<f64>,
}

impl Trajectory {
    pub fn times(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.time).collect()
    }

    pub fn initial(&self) -> &ParticleState {
        &self.states[0]
    }

    pub fn last(&self) -> &ParticleState {
        self.states.last().expect("trajectory is never empty")
    }

    /// State sampled closest to `t`.
    pub fn at(&self, t: f64) -> &ParticleState {
        self.states
            .iter()
            .min_by(|a, b| (a.time - t).abs().total_cmp(&(b.time - t).abs()))
            .expect("trajectory is never empty")
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let Some(first) = self.states.first() else {
            return Ok(());
        };
        let d = first.dim;
        let mut header = vec!["t".to_string(), "i".to_string()];
        header.extend((0..d).map(|k| format!("x_{k}")));
        header.push("m".into());
        out.write_record(&header)?;
        for s in &self.states {
            for i in 0..s.len() {
                let mut row = vec![s.time.to_string(), i.to_string()];
                row.extend(s.position(i).iter().map(|c| c.to_string()));
                row.push(s.weights[i].to_string());
                out.write_record(&row)?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Conservation and growth diagnostics. `source_bound` is the bound on
    /// `|S|` over the region visited by the particles.
    pub fn summary(&self, dt: f64, source_bound: f64) -> MicroSummary {
        let first = self.initial();
        let total = first.total_mass;
        let mut drift: f64 = 0.0;
        let mut min_weight = f64::INFINITY;
        let mut ratio: f64 = 0.0;
        for s in &self.states {
            drift = drift.max((s.weight_sum() - total).abs());
            min_weight = min_weight.min(s.min_weight());
            let growth = (source_bound * (s.time - first.time)).exp();
            for (m, m0) in s.weights.iter().zip(&first.weights) {
                ratio = ratio.max(m / (m0 * growth));
            }
        }
        MicroSummary {
            n: first.len(),
            total_mass: total,
            dt,
            horizon: self.last().time,
            mass_drift_max: drift,
            min_weight,
            max_weight_ratio_vs_bound: ratio,
            source_bound,
        }
    }

    /// Largest particle-to-particle distance over all samples.
    pub fn max_diameter(&self) -> f64 {
        self.states.iter().map(ParticleState::diameter).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MicroSummary {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "M")]
    pub total_mass: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mass_drift_max: f64,
    pub min_weight: f64,
    pub max_weight_ratio_vs_bound: f64,
    pub source_bound: f64,
}

/// Fixed-step integration to the horizon. The step is adjusted to
/// `horizon / round(horizon / dt)`. Every `sample_stride`-th state is kept,
/// together with the initial and final ones.
pub fn integrate_micro(
    config: &MicroConfig,
    initial: &ParticleState,
    sample_stride: usize,
) -> Result<Trajectory> {
    let steps = config.validate()?;
    initial.check_valid_for_run()?;
    let stride = sample_stride.max(1);
    let mut traj = Trajectory {
        states: vec![initial.clone()],
        stopped_early_at: None,
    };
    if steps == 0 {
        return Ok(traj);
    }
    let h = config.horizon / steps as f64;
    let start = initial.time;
    let mut state = initial.clone();
    for n in 1..=steps {
        let (mut next, speed) = step(&state, config, h)?;
        next.time = start + n as f64 * h;
        if let Some((index, &weight)) = next
            .weights
            .iter()
            .enumerate()
            .find(|(_, w)| !(**w > 0.0))
        {
            return Err(Error::NonPositiveWeight {
                time: next.time,
                index,
                weight,
            });
        }
        state = next;
        let stationary = config.stationary_speed.is_some_and(|tol| speed < tol);
        if n % stride == 0 || n == steps || stationary {
            traj.states.push(state.clone());
        }
        if stationary {
            traj.stopped_early_at = Some(state.time);
            break;
        }
    }
    Ok(traj)
}

/// One-dimensional initial data: `x_i = i/N` and `m_i` the integral of the
/// density over `((i-1)/N, i/N]`, rescaled so the weights sum to `total_mass`.
pub fn quadrature_initial_state<F: Fn(f64) -> f64>(
    density: F,
    n: usize,
    total_mass: f64,
) -> Result<ParticleState> {
    if n == 0 {
        return Err(Error::InvalidArgument("N must be positive".into()));
    }
    let raw = cell_integrals(density, 0.0, 1.0, n)?;
    let sum: f64 = raw.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument("density has zero mass on [0, 1]".into()));
    }
    let positions = (1..=n).map(|i| i as f64 / n as f64).collect();
    let weights = raw.iter().map(|w| w * total_mass / sum).collect();
    ParticleState::new(1, positions, weights, total_mass)
}

/// Result of comparing two runs that should be indistinguishable.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IndistinguishabilityReport {
    pub max_position_gap: f64,
    pub max_group_sum_gap: f64,
    pub max_outside_weight_gap: f64,
    pub passed: bool,
}

/// Tolerance used by the indistinguishability checks.
pub const INDISTINGUISHABILITY_TOLERANCE: f64 = 1e-8;

/// Runs `base` and a copy whose weights on the co-located `group` are replaced
/// by `group_weights` (same group sum), then compares positions, the group's
/// weight sum and the weights outside the group at every sample.
pub fn indistinguishability_check(
    config: &MicroConfig,
    base: &ParticleState,
    group: &[usize],
    group_weights: &[f64],
) -> Result<IndistinguishabilityReport> {
    if group.len() != group_weights.len() || group.is_empty() {
        return Err(Error::InvalidArgument(
            "group and replacement weights must be non-empty and of equal length".into(),
        ));
    }
    let anchor = base.position(group[0]);
    if group.iter().any(|&i| distance(base.position(i), anchor) != 0.0) {
        return Err(Error::InvalidArgument("group members are not co-located".into()));
    }
    let old_sum: f64 = group.iter().map(|&i| base.weights[i]).sum();
    let new_sum: f64 = group_weights.iter().sum();
    if (old_sum - new_sum).abs() > 1e-12 * old_sum.abs().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "group sums differ: {old_sum} vs {new_sum}"
        )));
    }
    let mut other = base.clone();
    for (&i, &w) in group.iter().zip(group_weights) {
        other.weights[i] = w;
    }
    let a = integrate_micro(config, base, 1)?;
    let b = integrate_micro(config, &other, 1)?;
    let mut report = IndistinguishabilityReport {
        max_position_gap: 0.0,
        max_group_sum_gap: 0.0,
        max_outside_weight_gap: 0.0,
        passed: false,
    };
    for (sa, sb) in a.states.iter().zip(&b.states) {
        for (p, q) in sa.positions.iter().zip(&sb.positions) {
            report.max_position_gap = report.max_position_gap.max((p - q).abs());
        }
        let ga: f64 = group.iter().map(|&i| sa.weights[i]).sum();
        let gb: f64 = group.iter().map(|&i| sb.weights[i]).sum();
        report.max_group_sum_gap = report.max_group_sum_gap.max((ga - gb).abs());
        for i in (0..sa.len()).filter(|i| !group.contains(i)) {
            report.max_outside_weight_gap = report
                .max_outside_weight_gap
                .max((sa.weights[i] - sb.weights[i]).abs());
        }
    }
    report.passed = report.max_position_gap <= INDISTINGUISHABILITY_TOLERANCE
        && report.max_group_sum_gap <= INDISTINGUISHABILITY_TOLERANCE
        && report.max_outside_weight_gap <= INDISTINGUISHABILITY_TOLERANCE;
    Ok(report)
}

/// Largest gap between the run from a relabeled state and the relabeled run.
pub fn permutation_check(
    config: &MicroConfig,
    base: &ParticleState,
    perm: &[usize],
) -> Result<f64> {
    let mut sorted = perm.to_vec();
    sorted.sort_unstable();
    if sorted != (0..base.len()).collect::<Vec<_>>() {
        return Err(Error::InvalidArgument("not a permutation".into()));
    }
    let a = integrate_micro(config, base, 1)?;
    let b = integrate_micro(config, &base.permuted(perm), 1)?;
    let mut gap: f64 = 0.0;
    for (sa, sb) in a.states.iter().zip(&b.states) {
        let pa = sa.permuted(perm);
        for (p, q) in pa.positions.iter().zip(&sb.positions) {
            gap = gap.max((p - q).abs());
        }
        for (p, q) in pa.weights.iter().zip(&sb.weights) {
            gap = gap.max((p - q).abs());
        }
    }
    Ok(gap)
}
