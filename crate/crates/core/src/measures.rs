//! Finite measures on the line (and, for atoms, in `d` dimensions).
//!
//! Two representations are used throughout the crate:
//!
//! * [`AtomicMeasure`]: a finite signed sum of Dirac masses. Empirical
//!   measures of particle systems and the iterates of the atomic splitting
//!   schemes live here.
//! * [`GridMeasure`]: masses of `G` uniform cells on an interval `[a, b]`.
//!   The grid solver for the transport equation evolves these.
//!
//! Grids store masses, not densities. The density of cell `j` is
//! `mass[j] * G / (b - a)`.

use std::io::Write;

use crate::error::{Error, Result};
use crate::micro::ParticleState;

/// Two atoms closer than this (in every coordinate) are merged by
/// [`AtomicMeasure::canonicalize`].
pub const MERGE_TOLERANCE: f64 = 1e-9;

/// Number of midpoint nodes per cell used by [`cell_integrals`].
pub const QUADRATURE_POINTS: usize = 64;

/// A finite signed combination of Dirac masses in `R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicMeasure {
    dim: usize,
    positions: Vec<f64>,
    weights: Vec<f64>,
}

impl AtomicMeasure {
    /// Builds a measure from flat row-major positions (`len * dim`) and weights.
    pub fn new(dim: usize, positions: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if positions.len() != weights.len() * dim {
            return Err(Error::DimensionMismatch {
                expected: weights.len() * dim,
                got: positions.len(),
            });
        }
        if let Some(index) = positions.iter().position(|p| !p.is_finite()) {
            return Err(Error::NonFinite {
                what: "atom positions",
                index: index / dim,
            });
        }
        if let Some(index) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::NonFinite {
                what: "atom weights",
                index,
            });
        }
        Ok(Self {
            dim,
            positions,
            weights,
        })
    }

    /// One-dimensional measure from `(position, weight)` pairs.
    pub fn from_pairs(atoms: &[(f64, f64)]) -> Result<Self> {
        let (positions, weights) = atoms.iter().copied().unzip();
        Self::new(1, positions, weights)
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            positions: Vec::new(),
            weights: Vec::new(),
        }
    }

    /// Unit Dirac mass at `x` on the line.
    pub fn dirac(x: f64) -> Self {
        Self {
            dim: 1,
            positions: vec![x],
            weights: vec![1.0],
        }
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

    pub fn position(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.positions
            .chunks_exact(self.dim)
            .zip(self.weights.iter().copied())
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.weights.iter().map(|w| w.abs()).sum()
    }

    pub fn min_weight(&self) -> Option<f64> {
        self.weights.iter().copied().reduce(f64::min)
    }

    /// `sum_i w_i x_i` for a one-dimensional measure (the barycenter when the
    /// measure is a probability).
    pub fn first_moment(&self) -> f64 {
        debug_assert_eq!(self.dim, 1);
        self.positions
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| x * w)
            .sum()
    }

    /// Smallest and largest coordinate of the atoms of a 1-D measure.
    pub fn support_bounds(&self) -> Option<(f64, f64)> {
        let mut it = self.positions.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), x| (lo.min(x), hi.max(x))))
    }

    /// Largest Euclidean norm of an atom position.
    pub fn support_radius(&self) -> f64 {
        self.positions
            .chunks_exact(self.dim)
            .map(|p| p.iter().map(|c| c * c).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            dim: self.dim,
            positions: self.positions.clone(),
            weights: self.weights.iter().map(|w| w * factor).collect(),
        }
    }

    /// Atom-wise concatenation, i.e. the sum of two measures (not canonicalized).
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        let mut positions = self.positions.clone();
        positions.extend_from_slice(&other.positions);
        let mut weights = self.weights.clone();
        weights.extend_from_slice(&other.weights);
        Ok(Self {
            dim: self.dim,
            positions,
            weights,
        })
    }

    /// `self - other`, as a signed measure.
    pub fn subtract(&self, other: &Self) -> Result<Self> {
        self.add(&other.scaled(-1.0))
    }

    /// Sorts atoms lexicographically, merges atoms whose positions agree to
    /// [`MERGE_TOLERANCE`] in every coordinate, and drops atoms of zero weight.
    ///
    /// A merged atom keeps the position of the first atom of its group.
    pub fn canonicalize(&self) -> Self {
        let dim = self.dim;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.position(a)
                .iter()
                .zip(self.position(b))
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });

        let mut anchors: Vec<f64> = Vec::with_capacity(self.positions.len());
        let mut sums: Vec<f64> = Vec::with_capacity(self.len());
        for &i in &order {
            let p = self.position(i);
            // Anchors are sorted by first coordinate; only the trailing ones can match.
            let mut target = None;
            for g in (0..sums.len()).rev() {
                let anchor = &anchors[g * dim..(g + 1) * dim];
                if p[0] - anchor[0] > MERGE_TOLERANCE {
                    break;
                }
                if anchor
                    .iter()
                    .zip(p)
                    .all(|(a, b)| (a - b).abs() <= MERGE_TOLERANCE)
                {
                    target = Some(g);
                    break;
                }
            }
            match target {
                Some(g) => sums[g] += self.weights[i],
                None => {
                    anchors.extend_from_slice(p);
                    sums.push(self.weights[i]);
                }
            }
        }

        let mut positions = Vec::with_capacity(anchors.len());
        let mut weights = Vec::with_capacity(sums.len());
        for (g, &w) in sums.iter().enumerate() {
            if w != 0.0 {
                positions.extend_from_slice(&anchors[g * dim..(g + 1) * dim]);
                weights.push(w);
            }
        }
        Self {
            dim,
            positions,
            weights,
        }
    }

    /// Compares canonical forms atom by atom, positions and weights to `tol`.
    pub fn measure_equal(&self, other: &Self, tol: f64) -> bool {
        if self.dim != other.dim {
            return false;
        }
        let a = self.canonicalize();
        let b = other.canonicalize();
        a.len() == b.len()
            && a.positions
                .iter()
                .zip(&b.positions)
                .all(|(x, y)| (x - y).abs() <= tol)
            && a.weights
                .iter()
                .zip(&b.weights)
                .all(|(x, y)| (x - y).abs() <= tol)
    }

    /// Writes `position_0..position_{d-1}, weight` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim).map(|k| format!("position_{k}")).collect();
        header.push("weight".into());
        out.write_record(&header)?;
        for (p, w) in self.atoms() {
            let mut row: Vec<String> = p.iter().map(|v| v.to_string()).collect();
            row.push(w.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Cell masses of a uniform grid on `[left, right]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMeasure {
    left: f64,
    right: f64,
    mass: Vec<f64>,
}

impl GridMeasure {
    pub fn new(left: f64, right: f64, mass: Vec<f64>) -> Result<Self> {
        if !(left.is_finite() && right.is_finite() && left < right) {
            return Err(Error::InvalidArgument(format!(
                "grid domain [{left}, {right}] is not a proper interval"
            )));
        }
        if mass.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        if let Some(index) = mass.iter().position(|m| !m.is_finite()) {
            return Err(Error::NonFinite {
                what: "cell masses",
                index,
            });
        }
        Ok(Self { left, right, mass })
    }

    pub fn zeros(left: f64, right: f64, cells: usize) -> Result<Self> {
        Self::new(left, right, vec![0.0; cells])
    }

    pub fn left(&self) -> f64 {
        self.left
    }

    pub fn right(&self) -> f64 {
        self.right
    }

    pub fn cells(&self) -> usize {
        self.mass.len()
    }

    pub fn cell_width(&self) -> f64 {
        (self.right - self.left) / self.mass.len() as f64
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn into_masses(self) -> Vec<f64> {
        self.mass
    }

    pub fn center(&self, j: usize) -> f64 {
        self.left + (j as f64 + 0.5) * self.cell_width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells()).map(|j| self.center(j)).collect()
    }

    pub fn cell_bounds(&self, j: usize) -> (f64, f64) {
        let h = self.cell_width();
        (
            self.left + j as f64 * h,
            if j + 1 == self.cells() {
                self.right
            } else {
                self.left + (j + 1) as f64 * h
            },
        )
    }

    /// Mass divided by cell width.
    pub fn density(&self, j: usize) -> f64 {
        self.mass[j] / self.cell_width()
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_variation(&self) -> f64 {
        self.mass.iter().map(|m| m.abs()).sum()
    }

    pub fn min_mass(&self) -> f64 {
        self.mass.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Nonnegative cell masses summing to one within `tol`.
    pub fn is_probability(&self, tol: f64) -> bool {
        self.mass.iter().all(|&m| m >= 0.0) && (self.total_mass() - 1.0).abs() <= tol
    }

    /// Left edge of the first and right edge of the last cell with nonzero mass.
    pub fn support_bounds(&self) -> Option<(f64, f64)> {
        let first = self.mass.iter().position(|&m| m != 0.0)?;
        let last = self.mass.iter().rposition(|&m| m != 0.0)?;
        Some((self.cell_bounds(first).0, self.cell_bounds(last).1))
    }

    /// Writes `cell_left, cell_right, mass, density` rows.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["cell_left", "cell_right", "mass", "density"])?;
        for j in 0..self.cells() {
            let (l, r) = self.cell_bounds(j);
            out.write_record([
                l.to_string(),
                r.to_string(),
                self.mass[j].to_string(),
                self.density(j).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Same as [`write_csv`](Self::write_csv) with a leading `t` column; the
    /// header is written only when `header` is set so samples can be appended.
    pub fn write_csv_at<W: Write>(&self, t: f64, writer: W, header: bool) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        if header {
            out.write_record(["t", "cell_left", "cell_right", "mass", "density"])?;
        }
        for j in 0..self.cells() {
            let (l, r) = self.cell_bounds(j);
            out.write_record([
                t.to_string(),
                l.to_string(),
                r.to_string(),
                self.mass[j].to_string(),
                self.density(j).to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Generalized empirical measure `(1/M) sum_i m_i delta_{x_i}`, canonicalized.
pub fn empirical_measure(state: &ParticleState) -> Result<AtomicMeasure> {
    let total = state.total_mass();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "total mass must be positive, got {total}"
        )));
    }
    if state.is_empty() {
        return Err(Error::InvalidArgument("state has no particles".into()));
    }
    let weights = state.weights().iter().map(|m| m / total).collect();
    Ok(AtomicMeasure::new(state.dim(), state.positions().to_vec(), weights)?.canonicalize())
}

/// Piecewise-constant counting measure on `[0, 1]` with `bins` cells
/// `[(j-1)/p, j/p)`; a particle exactly at 1 goes to the last cell.
pub fn counting_measure(state: &ParticleState, bins: usize) -> Result<GridMeasure> {
    if bins == 0 {
        return Err(Error::InvalidArgument("bins must be positive".into()));
    }
    if state.dim() != 1 {
        return Err(Error::DimensionMismatch {
            expected: 1,
            got: state.dim(),
        });
    }
    let total = state.total_mass();
    let mut mass = vec![0.0; bins];
    for (i, (&x, &m)) in state.positions().iter().zip(state.weights()).enumerate() {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::OutsideDomain {
                index: i,
                position: x,
                left: 0.0,
                right: 1.0,
            });
        }
        let j = ((x * bins as f64).floor() as usize).min(bins - 1);
        mass[j] += m / total;
    }
    GridMeasure::new(0.0, 1.0, mass)
}

/// Integrals of `f` over `cells` uniform cells of `[left, right]` by composite
/// midpoint quadrature with [`QUADRATURE_POINTS`] nodes per cell.
pub fn cell_integrals<F: Fn(f64) -> f64>(
    f: F,
    left: f64,
    right: f64,
    cells: usize,
) -> Result<Vec<f64>> {
    let h = (right - left) / cells as f64;
    let sub = h / QUADRATURE_POINTS as f64;
    let mut out = Vec::with_capacity(cells);
    for j in 0..cells {
        let start = left + j as f64 * h;
        let mut acc = 0.0;
        for k in 0..QUADRATURE_POINTS {
            let x = start + (k as f64 + 0.5) * sub;
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "density samples",
                    index: j,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativeDensity { x, value: v });
            }
            acc += v;
        }
        out.push(acc * sub);
    }
    Ok(out)
}

/// Grid measure of the density `f / normalizer`, renormalized so the cell
/// masses sum to exactly one (up to the final rounding of the division).
pub fn grid_from_density<F: Fn(f64) -> f64>(
    f: F,
    normalizer: f64,
    left: f64,
    right: f64,
    cells: usize,
) -> Result<GridMeasure> {
    if cells == 0 {
        return Err(Error::InvalidArgument("cells must be positive".into()));
    }
    if !(normalizer.is_finite() && normalizer > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "normalizer must be positive, got {normalizer}"
        )));
    }
    let mut mass = cell_integrals(|x| f(x) / normalizer, left, right, cells)?;
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidArgument("density integrates to zero".into()));
    }
    mass.iter_mut().for_each(|m| *m /= total);
    GridMeasure::new(left, right, mass)
}

/// One atom per nonzero cell, placed at the cell midpoint.
pub fn atomic_from_grid(grid: &GridMeasure) -> AtomicMeasure {
    let (positions, weights) = grid
        .masses()
        .iter()
        .enumerate()
        .filter(|(_, &m)| m != 0.0)
        .map(|(j, &m)| (grid.center(j), m))
        .unzip();
    AtomicMeasure {
        dim: 1,
        positions,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn state_1d(x: &[f64], m: &[f64], total: f64) -> ParticleState {
        ParticleState::new(1, x.to_vec(), m.to_vec(), total).unwrap()
    }

    #[test]
    fn empirical_single_particle_normalizes() {
        let mu = empirical_measure(&state_1d(&[0.3], &[2.0], 2.0)).unwrap();
        assert_eq!(mu.positions(), &[0.3]);
        assert_eq!(mu.weights(), &[1.0]);
    }

    #[test]
    fn empirical_two_symmetric_particles() {
        let mu = empirical_measure(&state_1d(&[1.0, -1.0], &[1.0, 1.0], 2.0)).unwrap();
        let expected = AtomicMeasure::from_pairs(&[(1.0, 0.5), (-1.0, 0.5)]).unwrap();
        assert!(mu.measure_equal(&expected, 1e-15));
    }

    #[test]
    fn empirical_merges_colocated_particles() {
        let mu = empirical_measure(&state_1d(&[0.0, 0.0, 0.0], &[1.0, 2.0, 3.0], 6.0)).unwrap();
        assert_eq!(mu.len(), 1);
        assert_eq!(mu.positions(), &[0.0]);
        assert!((mu.weights()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empirical_rejects_bad_mass() {
        let bad = ParticleState::new(1, vec![0.0], vec![1.0], 0.0).unwrap();
        assert!(empirical_measure(&bad).is_err());
        let negative = ParticleState::new(1, vec![0.0], vec![1.0], -2.0).unwrap();
        assert!(empirical_measure(&negative).is_err());
    }

    #[test]
    fn counting_measure_examples() {
        let st = state_1d(&[0.1, 0.9], &[1.0, 1.0], 2.0);
        assert_eq!(counting_measure(&st, 2).unwrap().masses(), &[0.5, 0.5]);
        assert_eq!(counting_measure(&st, 1).unwrap().masses(), &[1.0]);
        let g = counting_measure(&st, 41).unwrap();
        assert_eq!(g.cells(), 41);
        assert!((g.total_mass() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn counting_measure_right_endpoint_goes_to_last_bin() {
        let st = state_1d(&[1.0, 0.0], &[1.0, 1.0], 2.0);
        assert_eq!(counting_measure(&st, 4).unwrap().masses(), &[0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn counting_measure_names_offending_particle() {
        let st = state_1d(&[0.2, 1.3], &[1.0, 1.0], 2.0);
        match counting_measure(&st, 4) {
            Err(Error::OutsideDomain { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uniform_density_grid() {
        let g = grid_from_density(|_| 1.0, 1.0, 0.0, 1.0, 4).unwrap();
        for &m in g.masses() {
            assert!((m - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn concentrated_density_fills_one_cell() {
        let g = grid_from_density(|x| if (0.5..0.75).contains(&x) { 7.0 } else { 0.0 }, 1.0, 0.0, 1.0, 4)
            .unwrap();
        assert_eq!(g.masses(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn negative_density_is_rejected() {
        let r = grid_from_density(|x| x - 0.5, 1.0, 0.0, 1.0, 8);
        assert!(matches!(r, Err(Error::NegativeDensity { .. })));
    }

    #[test]
    fn atomization_examples() {
        let g = GridMeasure::new(0.0, 1.0, vec![0.5, 0.5]).unwrap();
        let a = atomic_from_grid(&g);
        assert_eq!(a.positions(), &[0.25, 0.75]);
        assert_eq!(a.weights(), &[0.5, 0.5]);
        let empty = GridMeasure::zeros(0.0, 1.0, 5).unwrap();
        assert!(atomic_from_grid(&empty).is_empty());
    }

    #[test]
    fn counting_then_atomize_keeps_unit_mass() {
        let st = state_1d(&[0.05, 0.33, 0.34, 0.99], &[1.0, 2.0, 3.0, 4.0], 10.0);
        let a = atomic_from_grid(&counting_measure(&st, 41).unwrap());
        assert!((a.total_mass() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn canonicalization_merges_within_tolerance_only() {
        let mu = AtomicMeasure::from_pairs(&[(0.0, 1.0), (0.5e-9, 1.0), (2e-9, 1.0), (3.0, 0.0)])
            .unwrap()
            .canonicalize();
        assert_eq!(mu.len(), 2);
        assert_eq!(mu.weights(), &[2.0, 1.0]);
    }

    #[test]
    fn csv_layouts() {
        let mu = AtomicMeasure::new(2, vec![0.0, 1.0, 2.0, 3.0], vec![0.25, 0.75]).unwrap();
        let mut buf = Vec::new();
        mu.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("position_0,position_1,weight\n0,1,0.25\n"));

        let g = GridMeasure::new(0.0, 1.0, vec![0.5, 0.5]).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("cell_left,cell_right,mass,density\n0,0.5,0.5,1\n"));
    }

    proptest! {
        #[test]
        fn canonicalize_is_idempotent(
            atoms in prop::collection::vec((-5i32..5, -3.0f64..3.0), 0..30),
            jitter in prop::collection::vec(0.0f64..2e-9, 30),
        ) {
            let pairs: Vec<(f64, f64)> = atoms
                .iter()
                .zip(&jitter)
                .map(|(&(k, w), &j)| (k as f64 * 0.1 + j, w))
                .collect();
            let mu = AtomicMeasure::from_pairs(&pairs).unwrap();
            let once = mu.canonicalize();
            let twice = once.canonicalize();
            prop_assert_eq!(&once, &twice);
            prop_assert!((once.total_mass() - mu.total_mass()).abs() < 1e-12);
        }

        #[test]
        fn empirical_measure_has_unit_mass(
            parts in prop::collection::vec((0.0f64..1.0, 0.01f64..5.0), 1..40),
        ) {
            let x: Vec<f64> = parts.iter().map(|p| p.0).collect();
            let m: Vec<f64> = parts.iter().map(|p| p.1).collect();
            let total: f64 = m.iter().sum();
            let st = ParticleState::new(1, x, m, total).unwrap();
            let mu = empirical_measure(&st).unwrap();
            prop_assert!((mu.total_mass() - 1.0).abs() < 1e-13);
            let g = counting_measure(&st, 41).unwrap();
            prop_assert!((g.total_mass() - 1.0).abs() < 1e-13);
            prop_assert!((atomic_from_grid(&g).total_mass() - g.total_mass()).abs() < 1e-14);
        }
    }
}
