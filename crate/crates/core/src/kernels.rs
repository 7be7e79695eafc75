//! Interaction functions and skew-symmetric source kernels.
//!
//! The velocity felt by a particle at `x` from a unit mass at `y` is
//! `phi(y - x)` for translation-invariant kernels. The saturated linear field
//! used in the two-atom scheme comparison ignores `y` and returns `v(x)`, so
//! integrating it against a measure gives `mu(R) v(x)`.
//!
//! Source kernels are `(q+1)`-ary functions `S(x, y_1, ..., y_q)` that change
//! sign when two designated arguments are swapped. That property makes the
//! induced source term a zero-mass signed measure.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

/// Skew-symmetry defects at or below this value pass [`validate_skew`].
pub const SKEW_TOLERANCE: f64 = 1e-12;

/// Direction smoother `arctan(|d|) d / |d|`, extended by 0 at the origin.
pub fn direction(delta: &[f64], out: &mut [f64]) {
    let norm = delta.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let scale = norm.atan() / norm;
    for (o, d) in out.iter_mut().zip(delta) {
        *o = scale * d;
    }
}

/// One-dimensional [`direction`]: `sign(d) arctan(|d|)`, which is just `arctan(d)`.
#[inline]
pub fn direction_1d(delta: f64) -> f64 {
    delta.atan()
}

#[inline]
fn sin2_profile(r: f64, radius: f64) -> f64 {
    if r > radius {
        0.0
    } else {
        let s = (PI * r / radius).sin();
        s * s
    }
}

/// Interaction function `phi` of the position dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InteractionKernel {
    /// `phi_R(d) = d/|d| sin^2(pi |d| / R)` for `|d| <= R`, zero beyond.
    Sin2 { radius: f64 },
    /// `phi = 0`.
    Zero,
    /// Field `v(x) = x` on `|x| < 1`, `sign(x)` outside, independent of the
    /// source point (one-dimensional).
    SaturatedLinear,
}

impl InteractionKernel {
    pub fn sin2(radius: f64) -> Result<Self> {
        if !(radius.is_finite() && radius > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "kernel radius must be positive, got {radius}"
            )));
        }
        Ok(Self::Sin2 { radius })
    }

    pub fn is_translation_invariant(&self) -> bool {
        !matches!(self, Self::SaturatedLinear)
    }

    /// `phi(delta)` for translation-invariant kernels. For the saturated
    /// field this evaluates `v(delta)`.
    pub fn eval(&self, delta: &[f64], out: &mut [f64]) {
        match *self {
            Self::Sin2 { radius } => {
                let r = delta.iter().map(|c| c * c).sum::<f64>().sqrt();
                if r == 0.0 || r > radius {
                    out.iter_mut().for_each(|o| *o = 0.0);
                } else {
                    let scale = sin2_profile(r, radius) / r;
                    for (o, d) in out.iter_mut().zip(delta) {
                        *o = scale * d;
                    }
                }
            }
            Self::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Self::SaturatedLinear => {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[0] = saturated(delta[0]);
            }
        }
    }

    /// Scalar `phi(delta)` on the line.
    #[inline]
    pub fn eval_1d(&self, delta: f64) -> f64 {
        match *self {
            Self::Sin2 { radius } => {
                let r = delta.abs();
                if r > radius {
                    0.0
                } else {
                    sin2_profile(r, radius).copysign(delta) * (delta != 0.0) as u8 as f64
                }
            }
            Self::Zero => 0.0,
            Self::SaturatedLinear => saturated(delta),
        }
    }

    /// Velocity contribution at `target` of a unit mass at `source`:
    /// `phi(source - target)`, or `v(target)` for the saturated field.
    pub fn pair(&self, target: &[f64], source: &[f64], scratch: &mut [f64], out: &mut [f64]) {
        match self {
            Self::SaturatedLinear => self.eval(target, out),
            _ => {
                for ((s, a), b) in scratch.iter_mut().zip(source).zip(target) {
                    *s = a - b;
                }
                self.eval(scratch, out);
            }
        }
    }

    #[inline]
    pub fn pair_1d(&self, target: f64, source: f64) -> f64 {
        match self {
            Self::SaturatedLinear => saturated(target),
            _ => self.eval_1d(source - target),
        }
    }

    /// Global Lipschitz constant. For `Sin2` this is `pi / R`: the radial
    /// derivative `(pi/R) sin(2 pi r / R)` peaks there and the tangential
    /// factor `sin^2(pi r/R)/r` stays below it.
    pub fn lipschitz_constant(&self) -> f64 {
        match *self {
            Self::Sin2 { radius } => PI / radius,
            Self::Zero => 0.0,
            Self::SaturatedLinear => 1.0,
        }
    }

    /// `|phi(0)|`.
    pub fn phi_at_zero(&self) -> f64 {
        0.0
    }

    /// `sup |phi|`.
    pub fn sup_norm(&self) -> f64 {
        match self {
            Self::Sin2 { .. } | Self::SaturatedLinear => 1.0,
            Self::Zero => 0.0,
        }
    }

    /// Interaction range, when the kernel has compact support.
    pub fn support_radius(&self) -> Option<f64> {
        match *self {
            Self::Sin2 { radius } => Some(radius),
            Self::Zero => Some(0.0),
            Self::SaturatedLinear => None,
        }
    }

    /// Largest difference quotient `|phi(u) - phi(v)| / |u - v|` over random
    /// pairs in `[-span, span]^dim`.
    pub fn sampled_lipschitz(&self, dim: usize, span: f64, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut u = vec![0.0; dim];
        let mut v = vec![0.0; dim];
        let mut fu = vec![0.0; dim];
        let mut fv = vec![0.0; dim];
        let mut best: f64 = 0.0;
        for _ in 0..samples {
            u.iter_mut().for_each(|c| *c = rng.gen_range(-span..=span));
            // Mix close and far pairs so the local slope is seen.
            let step = 10f64.powf(rng.gen_range(-6.0..0.0)) * span;
            v.iter_mut()
                .zip(&u)
                .for_each(|(c, a)| *c = a + rng.gen_range(-step..=step));
            self.eval(&u, &mut fu);
            self.eval(&v, &mut fv);
            let num = fu.iter().zip(&fv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let den = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if den > 0.0 {
                best = best.max(num / den);
            }
        }
        best
    }
}

#[inline]
fn saturated(x: f64) -> f64 {
    if x.abs() >= 1.0 {
        x.signum()
    } else {
        x
    }
}

impl fmt::Display for InteractionKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Sin2 { radius } => write!(f, "sin2({radius})"),
            Self::Zero => write!(f, "zero"),
            Self::SaturatedLinear => write!(f, "appendixB_field"),
        }
    }
}

impl FromStr for InteractionKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_call(s)?;
        match (name.as_str(), args.as_slice()) {
            ("sin2", [r]) => Self::sin2(*r),
            ("zero", []) => Ok(Self::Zero),
            ("appendixB_field", []) => Ok(Self::SaturatedLinear),
            _ => Err(Error::InvalidArgument(format!("unknown interaction kernel `{s}`"))),
        }
    }
}

/// A user-supplied source kernel.
#[derive(Clone)]
pub struct CustomSource {
    pub name: String,
    pub arity: usize,
    pub skew_pair: (usize, usize),
    pub func: Arc<dyn Fn(&[&[f64]]) -> f64 + Send + Sync>,
}

impl fmt::Debug for CustomSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomSource")
            .field("name", &self.name)
            .field("arity", &self.arity)
            .field("skew_pair", &self.skew_pair)
            .finish()
    }
}

/// Source kernel `S` of the weight dynamics.
#[derive(Debug, Clone)]
pub enum SourceKernel {
    /// Pairwise competition: `S(x, y, z) = beta <(phi(z-x) + phi(z-y))/2, dir(x-y)>`.
    M1 {
        beta: f64,
        phi: InteractionKernel,
    },
    /// `S(x, y) = x - y` on the line.
    Linear,
    Custom(CustomSource),
}

impl SourceKernel {
    pub fn m1(beta: f64, radius: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be finite".into()));
        }
        Ok(Self::M1 {
            beta,
            phi: InteractionKernel::sin2(radius)?,
        })
    }

    /// Number `q` of integrated arguments.
    pub fn arity(&self) -> usize {
        match self {
            Self::M1 { .. } => 2,
            Self::Linear => 1,
            Self::Custom(c) => c.arity,
        }
    }

    pub fn skew_pair(&self) -> (usize, usize) {
        match self {
            Self::Custom(c) => c.skew_pair,
            _ => (0, 1),
        }
    }

    pub fn is_m1(&self) -> bool {
        matches!(self, Self::M1 { .. })
    }

    /// `S(args[0], ..., args[q])`.
    pub fn eval(&self, args: &[&[f64]]) -> f64 {
        debug_assert_eq!(args.len(), self.arity() + 1);
        match self {
            Self::M1 { beta, phi } => {
                let (x, y, z) = (args[0], args[1], args[2]);
                let d = x.len();
                let mut buf = vec![0.0; 4 * d];
                let (a, rest) = buf.split_at_mut(d);
                let (b, rest) = rest.split_at_mut(d);
                let (dir, delta) = rest.split_at_mut(d);
                phi.pair(x, z, delta, a);
                phi.pair(y, z, delta, b);
                for ((o, p), q) in delta.iter_mut().zip(x).zip(y) {
                    *o = p - q;
                }
                direction(delta, dir);
                let dot: f64 = a
                    .iter()
                    .zip(b.iter())
                    .zip(dir.iter())
                    .map(|((a, b), h)| 0.5 * (a + b) * h)
                    .sum();
                beta * dot
            }
            Self::Linear => args[0][0] - args[1][0],
            Self::Custom(c) => (c.func)(args),
        }
    }

    /// Scalar fast path for one-dimensional arguments.
    #[inline]
    pub fn eval_1d(&self, args: &[f64]) -> f64 {
        match self {
            Self::M1 { beta, phi } => {
                let (x, y, z) = (args[0], args[1], args[2]);
                beta * 0.5 * (phi.pair_1d(x, z) + phi.pair_1d(y, z)) * direction_1d(x - y)
            }
            Self::Linear => args[0] - args[1],
            Self::Custom(c) => {
                let views: Vec<&[f64]> = args.iter().map(std::slice::from_ref).collect();
                (c.func)(&views)
            }
        }
    }

    /// Upper bound on `|S|` when every argument lies in a ball of the given
    /// radius (so pairwise distances are at most twice that).
    pub fn bound_on_ball(&self, radius: f64) -> f64 {
        match self {
            Self::M1 { beta, phi } => beta.abs() * phi.sup_norm() * (2.0 * radius).atan(),
            Self::Linear => 2.0 * radius,
            Self::Custom(_) => self.sampled_bound(1, radius, 20_000, 0),
        }
    }

    /// Upper bound on `|S|` when every argument lies in `[left, right]`.
    pub fn bound_on_interval(&self, left: f64, right: f64) -> f64 {
        match self {
            Self::Custom(_) => self.bound_on_ball(left.abs().max(right.abs())),
            _ => self.bound_on_ball(0.5 * (right - left)),
        }
    }

    /// Constant `L_S` with `|S(y) - S(z)| <= L_S sum_i |y_i - z_i|` on a ball.
    pub fn lipschitz_on_ball(&self, radius: f64) -> f64 {
        match self {
            Self::M1 { beta, phi } => {
                beta.abs() * (phi.lipschitz_constant() * (2.0 * radius).atan() + phi.sup_norm())
            }
            Self::Linear => 1.0,
            Self::Custom(_) => f64::NAN,
        }
    }

    /// Largest `|S|` over random tuples in the ball of radius `radius`.
    pub fn sampled_bound(&self, dim: usize, radius: f64, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = self.arity();
        let mut points = vec![vec![0.0; dim]; q + 1];
        let mut best: f64 = 0.0;
        for _ in 0..samples {
            for p in points.iter_mut() {
                sample_ball(&mut rng, radius, p);
            }
            let views: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
            best = best.max(self.eval(&views).abs());
        }
        best
    }
}

impl fmt::Display for SourceKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::M1 { beta, phi } => match phi {
                InteractionKernel::Sin2 { radius } => write!(f, "m1({beta}, {radius})"),
                other => write!(f, "m1({beta}, {other})"),
            },
            Self::Linear => write!(f, "appendixB_linear"),
            Self::Custom(c) => write!(f, "custom({})", c.name),
        }
    }
}

impl FromStr for SourceKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = parse_call(s)?;
        match (name.as_str(), args.as_slice()) {
            ("m1", [beta, radius]) => Self::m1(*beta, *radius),
            ("appendixB_linear", []) => Ok(Self::Linear),
            _ => Err(Error::InvalidArgument(format!("unknown source kernel `{s}`"))),
        }
    }
}

/// Splits `name(a, b, ...)` into the name and numeric arguments.
fn parse_call(s: &str) -> Result<(String, Vec<f64>)> {
    let s = s.trim();
    let Some(open) = s.find('(') else {
        return Ok((s.to_string(), Vec::new()));
    };
    let close = s
        .rfind(')')
        .filter(|&c| c > open && c == s.len() - 1)
        .ok_or_else(|| Error::InvalidArgument(format!("malformed preset `{s}`")))?;
    let inner = s[open + 1..close].trim();
    let args = if inner.is_empty() {
        Vec::new()
    } else {
        inner
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::InvalidArgument(format!("bad number `{a}` in `{s}`")))
            })
            .collect::<Result<_>>()?
    };
    Ok((s[..open].trim().to_string(), args))
}

fn sample_ball<R: Rng>(rng: &mut R, radius: f64, out: &mut [f64]) {
    loop {
        out.iter_mut()
            .for_each(|c| *c = rng.gen_range(-radius..=radius));
        if out.iter().map(|c| c * c).sum::<f64>() <= radius * radius {
            return;
        }
    }
}

/// Outcome of [`validate_skew`].
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SkewReport {
    pub samples: usize,
    pub max_defect: f64,
    pub passed: bool,
}

/// Largest `|S(.., y_i, .., y_j, ..) + S(.., y_j, .., y_i, ..)|` over random
/// tuples drawn in the ball of radius `radius`, for the kernel's skew pair.
pub fn validate_skew(
    source: &SourceKernel,
    dim: usize,
    samples: usize,
    radius: f64,
    seed: u64,
) -> SkewReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = source.arity();
    let (i, j) = source.skew_pair();
    let mut points = vec![vec![0.0; dim]; q + 1];
    let mut max_defect: f64 = 0.0;
    for _ in 0..samples.max(1) {
        for p in points.iter_mut() {
            sample_ball(&mut rng, radius, p);
        }
        let direct: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let mut swapped = direct.clone();
        swapped.swap(i, j);
        let defect = (source.eval(&direct) + source.eval(&swapped)).abs();
        max_defect = max_defect.max(defect);
    }
    SkewReport {
        samples: samples.max(1),
        max_defect,
        passed: max_defect <= SKEW_TOLERANCE,
    }
}
