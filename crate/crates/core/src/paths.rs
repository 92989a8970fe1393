//! Grid-sampled paths and their frozen/shifted views.
//!
//! A `StatePath` stores one value per grid node over a contiguous node range.
//! The "value" is a flat `dim`-slice: state vectors use `dim = d`, operator
//! valued paths (diffusion coefficients, backward `q` processes) use
//! `dim = d * m` in column-major layout, scalars use `dim = 1`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    first: i64,
    dim: usize,
    data: Vec<f64>,
}

impl StatePath {
    pub fn zeros(first: i64, last: i64, dim: usize) -> Self {
        assert!(last >= first, "empty node range");
        let n = (last - first + 1) as usize;
        StatePath {
            first,
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_fn(first: i64, last: i64, dim: usize, mut f: impl FnMut(i64, usize) -> f64) -> Self {
        let mut p = StatePath::zeros(first, last, dim);
        for node in first..=last {
            for c in 0..dim {
                let v = f(node, c);
                p.at_mut(node)[c] = v;
            }
        }
        p
    }

    /// Scalar path from a function of the node time.
    pub fn scalar_of_time(grid: &TimeGrid, first: i64, last: i64, mut f: impl FnMut(f64) -> f64) -> Self {
        StatePath::from_fn(first, last, 1, |node, _| f(grid.node_time(node)))
    }

    pub fn constant(first: i64, last: i64, value: &[f64]) -> Self {
        StatePath::from_fn(first, last, value.len(), |_, c| value[c])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn first_node(&self) -> i64 {
        self.first
    }

    pub fn last_node(&self) -> i64 {
        self.first + (self.data.len() / self.dim) as i64 - 1
    }

    pub fn contains(&self, node: i64) -> bool {
        node >= self.first && node <= self.last_node()
    }

    #[inline]
    pub fn at(&self, node: i64) -> &[f64] {
        debug_assert!(self.contains(node), "node {node} outside path span");
        let i = (node - self.first) as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, node: i64) -> &mut [f64] {
        debug_assert!(self.contains(node), "node {node} outside path span");
        let i = (node - self.first) as usize * self.dim;
        &mut self.data[i..i + self.dim]
    }

    /// Clamped read: nodes outside the span return the nearest endpoint value.
    #[inline]
    pub fn at_clamped(&self, node: i64) -> &[f64] {
        self.at(node.clamp(self.first, self.last_node()))
    }

    pub fn vec_at(&self, node: i64) -> DVector<f64> {
        DVector::from_column_slice(self.at(node))
    }

    pub fn set_vec(&mut self, node: i64, v: &DVector<f64>) {
        self.at_mut(node).copy_from_slice(v.as_slice());
    }

    pub fn set_slice(&mut self, node: i64, v: &[f64]) {
        self.at_mut(node).copy_from_slice(v);
    }

    /// Column-major `rows x cols` view of the node value; requires
    /// `dim == rows * cols`.
    pub fn mat_at(&self, node: i64, rows: usize, cols: usize) -> DMatrix<f64> {
        assert_eq!(rows * cols, self.dim, "matrix shape mismatch");
        DMatrix::from_column_slice(rows, cols, self.at(node))
    }

    pub fn set_mat(&mut self, node: i64, m: &DMatrix<f64>) {
        self.at_mut(node).copy_from_slice(m.as_slice());
    }

    pub fn scalar_at(&self, node: i64) -> f64 {
        assert_eq!(self.dim, 1);
        self.at(node)[0]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }

    pub fn axpy(&mut self, c: f64, other: &StatePath) {
        assert_eq!(self.first, other.first);
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn max_abs_diff(&self, other: &StatePath) -> f64 {
        assert_eq!(self.first, other.first);
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Lazy view of a path stopped over `[t-K, t]`: reads outside the window are
/// frozen at the window endpoints. Used as the path argument of drift,
/// diffusion and cost coefficients.
#[derive(Clone, Copy)]
pub struct SegmentView<'a> {
    path: &'a StatePath,
    lo: i64,
    hi: i64,
}

impl<'a> SegmentView<'a> {
    pub fn new(path: &'a StatePath, t_node: i64, k_steps: usize) -> Self {
        let lo = (t_node - k_steps as i64).max(path.first_node());
        let hi = t_node.min(path.last_node());
        SegmentView { path, lo, hi }
    }

    pub fn dim(&self) -> usize {
        self.path.dim()
    }

    /// Window endpoints (nodes of the live body).
    pub fn window(&self) -> (i64, i64) {
        (self.lo, self.hi)
    }

    #[inline]
    pub fn at(&self, node: i64) -> &[f64] {
        self.path.at(node.clamp(self.lo, self.hi))
    }

    pub fn vec_at(&self, node: i64) -> DVector<f64> {
        DVector::from_column_slice(self.at(node))
    }

    /// Atomic delay read against a measure whose atoms are node offsets.
    pub fn weighted_sum(&self, offsets: &[i64], weights: &[f64], t_node: i64) -> DVector<f64> {
        let mut acc = DVector::zeros(self.dim());
        for (off, w) in offsets.iter().zip(weights) {
            let v = self.at(t_node + off);
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        }
        acc
    }
}

/// Materialized stopped path on the same span as the input: constant at
/// `path(t-K)` before the window, the path itself on `[t-K, t]`, constant at
/// `path(t)` after.
pub fn stopped_segment(path: &StatePath, grid: &TimeGrid, t_node: i64) -> StatePath {
    let view = SegmentView::new(path, t_node, grid.k_steps());
    StatePath::from_fn(path.first_node(), path.last_node(), path.dim(), |node, c| {
        view.at(node)[c]
    })
}

/// Embed a history segment on `[-K, 0]` into `[-K, T]`: the body occupies
/// `[t-K, t]`, both tails are frozen at the nearest body value.
pub fn shift_forward(zbar: &StatePath, grid: &TimeGrid, t_node: i64) -> Result<StatePath> {
    let k = grid.k_steps() as i64;
    if zbar.first_node() != -k || zbar.last_node() != 0 {
        return Err(Error::validation(format!(
            "shift_forward: history must span nodes [{}, 0], got [{}, {}]",
            -k,
            zbar.first_node(),
            zbar.last_node()
        )));
    }
    if t_node < 0 || t_node > grid.last_main_node() {
        return Err(Error::validation(format!(
            "shift_forward: t node {t_node} outside [0, {}]",
            grid.last_main_node()
        )));
    }
    Ok(StatePath::from_fn(
        -k,
        grid.last_main_node(),
        zbar.dim(),
        |node, c| {
            let s = (node - t_node).clamp(-k, 0);
            zbar.at(s)[c]
        },
    ))
}

/// Restriction `s -> Z(s + t)` to the history window `[-K, 0]`.
pub fn shift_back(z: &StatePath, grid: &TimeGrid, t_node: i64) -> Result<StatePath> {
    let k = grid.k_steps() as i64;
    if !z.contains(t_node - k) || !z.contains(t_node) {
        return Err(Error::validation(format!(
            "shift_back: path spans [{}, {}] but needs [{}, {}]",
            z.first_node(),
            z.last_node(),
            t_node - k,
            t_node
        )));
    }
    Ok(StatePath::from_fn(-k, 0, z.dim(), |node, c| {
        z.at(node + t_node)[c]
    }))
}
