//! Atomic delay measures on `[-K, 0]`.
//!
//! Every measure used by the solvers is a finite nonnegative combination of
//! point masses sitting exactly on grid nodes. This keeps every delay read a
//! finite weighted sum and makes the discrete adjoint of each delay operator
//! an exact transpose. Atoms are stored as nonpositive node offsets.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::{SegmentView, StatePath};

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteMeasure {
    /// Node offsets, each in `[-k_steps, 0]`, strictly increasing.
    offsets: Vec<i64>,
    weights: Vec<f64>,
}

impl FiniteMeasure {
    pub fn new(mut atoms: Vec<(i64, f64)>, grid: &TimeGrid) -> Result<Self> {
        let k = grid.k_steps() as i64;
        for (off, w) in &atoms {
            if *off < -k || *off > 0 {
                return Err(Error::validation(format!(
                    "measure: atom offset {off} outside [-{k}, 0]"
                )));
            }
            if !(*w >= 0.0) || !w.is_finite() {
                return Err(Error::validation(format!(
                    "measure: weight {w} at offset {off} must be finite and >= 0"
                )));
            }
        }
        atoms.sort_by_key(|(off, _)| *off);
        // Merge duplicates so atoms stay distinct.
        let mut offsets: Vec<i64> = Vec::with_capacity(atoms.len());
        let mut weights: Vec<f64> = Vec::with_capacity(atoms.len());
        for (off, w) in atoms {
            if offsets.last() == Some(&off) {
                *weights.last_mut().unwrap() += w;
            } else {
                offsets.push(off);
                weights.push(w);
            }
        }
        Ok(FiniteMeasure { offsets, weights })
    }

    /// Point mass at offset zero (no delay).
    pub fn dirac_now() -> Self {
        FiniteMeasure {
            offsets: vec![0],
            weights: vec![1.0],
        }
    }

    /// Point mass at the full delay `-K`.
    pub fn dirac_full_delay(grid: &TimeGrid) -> Self {
        FiniteMeasure {
            offsets: vec![-(grid.k_steps() as i64)],
            weights: vec![1.0],
        }
    }

    pub fn zero() -> Self {
        FiniteMeasure {
            offsets: vec![],
            weights: vec![],
        }
    }

    /// Trapezoid stand-in for Lebesgue measure on `[-K, 0]`: `k+1` atoms with
    /// weights `dt * (1/2, 1, ..., 1, 1/2)`. Carries an O(dt^2) quadrature
    /// bias relative to the continuum integral; exact for affine integrands.
    pub fn lebesgue_trapezoid(grid: &TimeGrid) -> Result<Self> {
        let k = grid.k_steps();
        if k == 0 {
            return Err(Error::validation(
                "measure: trapezoid rule needs a positive delay window",
            ));
        }
        let dt = grid.dt();
        let mut atoms = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let off = -(i as i64);
            let w = if i == 0 || i == k { 0.5 * dt } else { dt };
            atoms.push((off, w));
        }
        FiniteMeasure::new(atoms, grid)
    }

    /// Build from `(offset_seconds, weight)` pairs that must already sit on
    /// grid nodes.
    pub fn from_times(pairs: &[(f64, f64)], grid: &TimeGrid) -> Result<Self> {
        let mut atoms = Vec::with_capacity(pairs.len());
        for (s, w) in pairs {
            let node = grid.node_at(*s, "measure atom")?;
            atoms.push((node, *w));
        }
        FiniteMeasure::new(atoms, grid)
    }

    /// Loader that snaps off-grid atom times to the nearest node (ties toward
    /// zero) and reports each snap distance alongside the measure.
    pub fn from_times_snapped(
        pairs: &[(f64, f64)],
        grid: &TimeGrid,
    ) -> Result<(Self, Vec<f64>)> {
        let mut atoms = Vec::with_capacity(pairs.len());
        let mut dists = Vec::with_capacity(pairs.len());
        for (s, w) in pairs {
            let node = grid.snap_node(*s);
            dists.push((grid.node_time(node) - s).abs());
            atoms.push((node, *w));
        }
        let m = FiniteMeasure::new(atoms, grid)?;
        Ok((m, dists))
    }

    pub fn n_atoms(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, f64)> + '_ {
        self.offsets.iter().copied().zip(self.weights.iter().copied())
    }
}

/// Weighted delay read `sum_i w_i path(t + s_i)` at node `t`.
pub fn delay_integral(path: &StatePath, mu: &FiniteMeasure, t_node: i64) -> Result<DVector<f64>> {
    let mut acc = DVector::zeros(path.dim());
    for (off, w) in mu.iter() {
        let node = t_node + off;
        if !path.contains(node) {
            return Err(Error::validation(format!(
                "delay_integral: atom at offset {off} reads node {node}, \
                 outside path span [{}, {}]",
                path.first_node(),
                path.last_node()
            )));
        }
        let v = path.at(node);
        for (a, x) in acc.iter_mut().zip(v) {
            *a += w * x;
        }
    }
    Ok(acc)
}

/// Same read through a stopped-segment view; atoms reach at most `K` back, so
/// this agrees with `delay_integral` on the raw path.
pub fn delay_integral_segment(seg: &SegmentView<'_>, mu: &FiniteMeasure, t_node: i64) -> DVector<f64> {
    seg.weighted_sum(mu.offsets(), mu.weights(), t_node)
}
