//! Distances between measures on the line.
//!
//! Wasserstein distances use the quantile representation. The bounded
//! Lipschitz distance and its generalization `W^{a,b}_1` are computed from the
//! dual problem
//!
//! ```text
//! maximize sum_i c_i f_i  subject to  |f_i| <= a,  |f_{i+1} - f_i| <= b (x_{i+1} - x_i)
//! ```
//!
//! on the sorted union support, where `c` is the mass of `mu - nu`. The value
//! function of this chain problem is concave and piecewise linear, so it is
//! solved exactly by dynamic programming over slope segments, and the optimal
//! `f` is recovered by backtracking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::macroscheme::MeasureRef;
use crate::measures::{atomic_from_grid, AtomicMeasure, GridMeasure};

/// Tolerance on witness feasibility and on the witness reproducing the value.
pub const WITNESS_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Quantile,
    DualLp,
}

/// Test function values at the union support.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Witness {
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceReport {
    pub value: f64,
    pub method: Method,
    pub certificate: Option<Witness>,
}

fn require_line(m: &AtomicMeasure) -> Result<()> {
    if m.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: m.dim(),
        });
    }
    Ok(())
}

fn require_probability(m: &AtomicMeasure) -> Result<()> {
    require_line(m)?;
    if m.weights().iter().any(|&w| w < 0.0) {
        return Err(Error::NotProbability("negative weight".into()));
    }
    let total = m.total_mass();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotProbability(format!("total mass {total}")));
    }
    Ok(())
}

fn sorted_atoms(m: &AtomicMeasure) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = m
        .atoms()
        .filter(|(_, w)| *w != 0.0)
        .map(|(x, w)| (x[0], w))
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    atoms
}

/// `W_p` between probability measures on the line:
/// `(int_0^1 |F_mu^{-1}(u) - F_nu^{-1}(u)|^p du)^{1/p}`.
pub fn wasserstein_p_1d(mu: &AtomicMeasure, nu: &AtomicMeasure, p: u32) -> Result<f64> {
    if p == 0 {
        return Err(Error::InvalidArgument("p must be at least 1".into()));
    }
    require_probability(mu)?;
    require_probability(nu)?;
    let a = sorted_atoms(mu);
    let b = sorted_atoms(nu);
    if a.is_empty() || b.is_empty() {
        return Err(Error::NotProbability("empty measure".into()));
    }
    // Normalize away the admitted rounding so both quantile functions end at 1.
    let (ma, mb) = (mu.total_mass(), nu.total_mass());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1 / ma, b[0].1 / mb);
    let mut acc = 0.0;
    loop {
        let step = ra.min(rb);
        acc += step * (a[i].0 - b[j].0).abs().powi(p as i32);
        ra -= step;
        rb -= step;
        if ra <= 0.0 {
            i += 1;
            if i == a.len() {
                break;
            }
            ra = a[i].1 / ma;
        }
        if rb <= 0.0 {
            j += 1;
            if j == b.len() {
                break;
            }
            rb = b[j].1 / mb;
        }
    }
    Ok(acc.powf(1.0 / p as f64))
}

/// Concave piecewise-linear function on `[-a, a]` stored as its value at `-a`
/// and consecutive `(length, slope)` pieces with decreasing slopes.
#[derive(Debug, Clone)]
struct Concave {
    bound: f64,
    start: f64,
    pieces: Vec<(f64, f64)>,
}

impl Concave {
    fn linear(bound: f64, slope: f64) -> Self {
        Self {
            bound,
            start: -slope * bound,
            pieces: vec![(2.0 * bound, slope)],
        }
    }

    fn add_linear(&mut self, slope: f64) {
        self.start -= slope * self.bound;
        self.pieces.iter_mut().for_each(|p| p.1 += slope);
    }

    /// `[lo, hi]` where the maximum is attained, and the maximum.
    fn argmax(&self) -> (f64, f64, f64) {
        let mut x = -self.bound;
        let mut v = self.start;
        let mut lo = x;
        for &(len, slope) in &self.pieces {
            if slope > 0.0 {
                x += len;
                v += len * slope;
                lo = x;
            } else if slope == 0.0 {
                x += len;
            } else {
                break;
            }
        }
        (lo, x, v)
    }

    /// `W(f) = max { V(g) : |g - f| <= d, |g| <= a }`.
    fn window_max(&mut self, d: f64) {
        if d == 0.0 {
            return;
        }
        let mut rising = Vec::new();
        let mut flat = 0.0;
        let mut falling = Vec::new();
        for &(len, slope) in &self.pieces {
            if slope > 0.0 {
                rising.push((len, slope));
            } else if slope == 0.0 {
                flat += len;
            } else {
                falling.push((len, slope));
            }
        }
        let mut pieces = rising;
        pieces.push((flat + 2.0 * d, 0.0));
        pieces.extend(falling);
        // The widened function lives on [-a - d, a + d]; cut d from both ends.
        let mut cut = d;
        let mut front = 0;
        while cut > 0.0 && front < pieces.len() {
            let (len, slope) = pieces[front];
            let take = len.min(cut);
            self.start += take * slope;
            cut -= take;
            if take >= len {
                front += 1;
            } else {
                pieces[front].0 -= take;
            }
        }
        pieces.drain(..front);
        let mut cut = d;
        while cut > 0.0 {
            let Some(last) = pieces.last_mut() else { break };
            if last.0 <= cut {
                cut -= last.0;
                pieces.pop();
            } else {
                last.0 -= cut;
                cut = 0.0;
            }
        }
        pieces.retain(|p| p.0 > 0.0);
        // Merge equal slopes so the piece count stays small.
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(pieces.len());
        for p in pieces {
            match merged.last_mut() {
                Some(last) if last.1 == p.1 => last.0 += p.0,
                _ => merged.push(p),
            }
        }
        self.pieces = merged;
    }
}

/// Union support of `mu - nu`, with the signed mass at each point.
fn difference_on_union(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Vec<(f64, f64)> {
    let mut atoms: Vec<(f64, f64)> = sorted_atoms(mu);
    atoms.extend(sorted_atoms(nu).into_iter().map(|(x, w)| (x, -w)));
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
    for (x, w) in atoms {
        match merged.last_mut() {
            Some(last) if last.0 == x => last.1 += w,
            _ => merged.push((x, w)),
        }
    }
    merged
}

/// Generalized Wasserstein distance `W^{a,b}_1` between finite signed
/// measures on the line, with the optimal test function as certificate.
pub fn generalized_wasserstein_1(
    mu: &AtomicMeasure,
    nu: &AtomicMeasure,
    a: f64,
    b: f64,
) -> Result<DistanceReport> {
    require_line(mu)?;
    require_line(nu)?;
    if !(a.is_finite() && a > 0.0 && b.is_finite() && b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "box and slope bounds must be positive, got a = {a}, b = {b}"
        )));
    }
    let atoms = difference_on_union(mu, nu);
    if atoms.is_empty() {
        return Ok(DistanceReport {
            value: 0.0,
            method: Method::DualLp,
            certificate: Some(Witness {
                positions: Vec::new(),
                values: Vec::new(),
            }),
        });
    }
    let n = atoms.len();
    let gaps: Vec<f64> = atoms.windows(2).map(|w| b * (w[1].0 - w[0].0)).collect();
    let mut value_fn = Concave::linear(a, atoms[0].1);
    let mut intervals = Vec::with_capacity(n);
    for i in 1..n {
        let (lo, hi, _) = value_fn.argmax();
        intervals.push((lo, hi));
        value_fn.window_max(gaps[i - 1]);
        value_fn.add_linear(atoms[i].1);
    }
    let (lo, hi, value) = value_fn.argmax();
    let mut f = vec![0.0; n];
    f[n - 1] = 0.0f64.clamp(lo, hi);
    for i in (0..n - 1).rev() {
        let (lo, hi) = intervals[i];
        let next = f[i + 1];
        f[i] = next
            .clamp(lo, hi)
            .clamp(next - gaps[i], next + gaps[i])
            .clamp(-a, a);
    }
    let positions: Vec<f64> = atoms.iter().map(|p| p.0).collect();
    let achieved: f64 = atoms.iter().zip(&f).map(|(p, v)| p.1 * v).sum();
    let scale = atoms.iter().map(|p| p.1.abs()).sum::<f64>().max(1.0) * a;
    let box_violation = f.iter().map(|v| v.abs() - a).fold(0.0f64, f64::max);
    let slope_violation = f
        .windows(2)
        .zip(&gaps)
        .map(|(w, g)| (w[1] - w[0]).abs() - g)
        .fold(0.0f64, f64::max);
    if box_violation > WITNESS_TOLERANCE
        || slope_violation > WITNESS_TOLERANCE
        || (achieved - value).abs() > WITNESS_TOLERANCE * scale
    {
        return Err(Error::InvalidArgument(format!(
            "dual solver witness check failed: value {value}, witness {achieved}"
        )));
    }
    Ok(DistanceReport {
        value: value.max(0.0),
        method: Method::DualLp,
        certificate: Some(Witness {
            positions,
            values: f,
        }),
    })
}

/// Bounded Lipschitz distance: test functions with sup norm and Lipschitz
/// constant at most one.
pub fn bounded_lipschitz(mu: &AtomicMeasure, nu: &AtomicMeasure) -> Result<DistanceReport> {
    generalized_wasserstein_1(mu, nu, 1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    W1,
    Wp(u32),
    Bl,
}

/// Distance between the cell-midpoint atomization of `mu` and `nu`.
pub fn distance_between_grid<'a>(
    mu: &GridMeasure,
    nu: impl Into<MeasureRef<'a>>,
    which: Which,
) -> Result<f64> {
    let left = atomic_from_grid(mu);
    let owned;
    let right = match nu.into() {
        MeasureRef::Atomic(m) => m,
        MeasureRef::Grid(g) => {
            owned = atomic_from_grid(g);
            &owned
        }
    };
    distance(&left, right, which)
}

pub fn distance(mu: &AtomicMeasure, nu: &AtomicMeasure, which: Which) -> Result<f64> {
    match which {
        Which::W1 => wasserstein_p_1d(mu, nu, 1),
        Which::Wp(p) => wasserstein_p_1d(mu, nu, p),
        Which::Bl => Ok(bounded_lipschitz(mu, nu)?.value),
    }
}

/// Result of checking the comparison inequalities on a batch of pairs.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InequalityReport {
    pub pairs: usize,
    pub max_violation: f64,
    pub worst_pair_seed: Option<u64>,
    pub violations: usize,
}

/// Largest violation among `rho <= W_1 <= max(1, R) rho`, `W_m <= W_p` for
/// `m < p`, and `W_p <= (2R)^{(p-1)/p} W_1^{1/p}`.
pub fn inequality_violation(
    mu: &AtomicMeasure,
    nu: &AtomicMeasure,
    radius: f64,
    ps: &[u32],
) -> Result<f64> {
    let rho = bounded_lipschitz(mu, nu)?.value;
    let w1 = wasserstein_p_1d(mu, nu, 1)?;
    let mut worst = (rho - w1).max(w1 - radius.max(1.0) * rho);
    let mut ws = Vec::with_capacity(ps.len());
    for &p in ps {
        let wp = wasserstein_p_1d(mu, nu, p)?;
        let pf = p as f64;
        let bound = (2.0 * radius).powf((pf - 1.0) / pf) * w1.powf(1.0 / pf);
        worst = worst.max(wp - bound);
        ws.push((p, wp));
    }
    for &(m, wm) in &ws {
        for &(p, wp) in &ws {
            if m < p {
                worst = worst.max(wm - wp);
            }
        }
    }
    Ok(worst.max(0.0))
}

/// Random probability measure with up to `max_atoms` atoms in `[-R, R]`.
pub fn random_probability(rng: &mut impl Rng, radius: f64, max_atoms: usize) -> AtomicMeasure {
    let n = rng.gen_range(1..=max_atoms.max(1));
    let positions: Vec<f64> = (0..n).map(|_| rng.gen_range(-radius..=radius)).collect();
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    AtomicMeasure::new(1, positions, weights).expect("finite by construction")
}

/// Checks the inequalities on `count` random pairs; pair `k` is drawn from
/// seed `seed + k`, which is reported for the worst pair.
pub fn check_metric_inequalities(
    count: usize,
    radius: f64,
    ps: &[u32],
    seed: u64,
    slack: f64,
) -> Result<InequalityReport> {
    let results: Vec<Result<(u64, f64)>> = (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + k);
            let mu = random_probability(&mut rng, radius, 12);
            let nu = random_probability(&mut rng, radius, 12);
            Ok((seed + k, inequality_violation(&mu, &nu, radius, ps)?))
        })
        .collect();
    let mut report = InequalityReport {
        pairs: count,
        max_violation: 0.0,
        worst_pair_seed: None,
        violations: 0,
    };
    for r in results {
        let (s, v) = r?;
        if v > slack {
            report.violations += 1;
        }
        if report.worst_pair_seed.is_none() || v > report.max_violation {
            report.max_violation = v;
            report.worst_pair_seed = Some(s);
        }
    }
    Ok(report)
}
