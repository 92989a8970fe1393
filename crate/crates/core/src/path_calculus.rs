//! Delay operators with exact discrete duality.
//!
//! A kernel representation realizes the linear path operator
//!
//! ```text
//! L(Z)(t) = sum_i k(t, s_i) Z(t + s_i) w_i,        t in [0, T],
//! ```
//!
//! with atoms `s_i <= 0` from a `FiniteMeasure` and one `dim_f x dim_e`
//! matrix per `(t, atom)`. Its adjoint with respect to the node-sum inner
//! products `sum_t dt <.,.>` is
//!
//! ```text
//! L*(Q)(t) = sum_i k(t - s_i, s_i)^T Q(t - s_i) w_i 1[t - s_i in [0, T]],
//! ```
//!
//! for `t in [-K, T]`. Because atoms sit on grid nodes, the adjoint holds as
//! a matrix-transpose identity, not merely up to quadrature error. Both
//! implementations below are kept on purpose: the scatter form *is* the
//! transpose of the forward loop (canonical for optimization), the gather
//! form evaluates the displayed formula directly, and the two must agree to
//! round-off on every instance.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::FiniteMeasure;
use crate::paths::StatePath;
use crate::rng::keyed_uniform_sym;

#[derive(Debug, Clone)]
pub struct KernelRepresentation {
    nu0: FiniteMeasure,
    dim_e: usize,
    dim_f: usize,
    /// Dense storage: `mats[t][i]` for `t` in `0..=n_steps`, atom index `i`.
    mats: Vec<Vec<DMatrix<f64>>>,
}

impl KernelRepresentation {
    pub fn from_fn(
        grid: &TimeGrid,
        nu0: FiniteMeasure,
        dim_e: usize,
        dim_f: usize,
        mut kernel: impl FnMut(i64, usize, i64) -> DMatrix<f64>,
    ) -> Result<Self> {
        let n = grid.last_main_node();
        let mut mats = Vec::with_capacity(n as usize + 1);
        for t in 0..=n {
            let mut row = Vec::with_capacity(nu0.n_atoms());
            for (i, (off, _)) in nu0.iter().enumerate() {
                let m = kernel(t, i, off);
                if m.nrows() != dim_f || m.ncols() != dim_e {
                    return Err(Error::validation(format!(
                        "kernel at (t={t}, atom {i}): shape {}x{} != {dim_f}x{dim_e}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                row.push(m);
            }
            mats.push(row);
        }
        Ok(KernelRepresentation {
            nu0,
            dim_e,
            dim_f,
            mats,
        })
    }

    /// Time-independent scalar multiple of the identity on every atom.
    pub fn scaled_identity(grid: &TimeGrid, nu0: FiniteMeasure, dim: usize, c: f64) -> Self {
        KernelRepresentation::from_fn(grid, nu0, dim, dim, |_, _, _| {
            DMatrix::identity(dim, dim) * c
        })
        .expect("shapes are consistent by construction")
    }

    pub fn nu0(&self) -> &FiniteMeasure {
        &self.nu0
    }

    pub fn dim_e(&self) -> usize {
        self.dim_e
    }

    pub fn dim_f(&self) -> usize {
        self.dim_f
    }

    pub fn kernel(&self, t_node: i64, atom: usize) -> &DMatrix<f64> {
        &self.mats[t_node as usize][atom]
    }

    /// Forward read `L(Z)` on `[0, T]`. `Z` must span `[-K, T]`.
    pub fn apply(&self, grid: &TimeGrid, z: &StatePath) -> Result<StatePath> {
        if z.dim() != self.dim_e {
            return Err(Error::validation(format!(
                "apply: path dim {} != kernel input dim {}",
                z.dim(),
                self.dim_e
            )));
        }
        let n = grid.last_main_node();
        let k = grid.k_steps() as i64;
        if z.first_node() > -k || z.last_node() < n {
            return Err(Error::validation(format!(
                "apply: path spans [{}, {}] but needs [-{k}, {n}]",
                z.first_node(),
                z.last_node()
            )));
        }
        let mut out = StatePath::zeros(0, n, self.dim_f);
        for t in 0..=n {
            let acc = out.at_mut(t);
            for (i, (off, w)) in self.nu0.iter().enumerate() {
                let km = &self.mats[t as usize][i];
                let zv = z.at(t + off);
                // acc += w * km * zv, column-major walk.
                for col in 0..self.dim_e {
                    let x = w * zv[col];
                    if x == 0.0 {
                        continue;
                    }
                    let kcol = km.column(col);
                    for r in 0..self.dim_f {
                        acc[r] += kcol[r] * x;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Adjoint by literal transposition of the forward loop: every forward
    /// contribution `(t, i)` scatters `w_i k(t,s_i)^T Q(t)` onto node
    /// `t + s_i`. Output spans `[-K, T]`.
    pub fn apply_adjoint(&self, grid: &TimeGrid, q: &StatePath) -> Result<StatePath> {
        if q.dim() != self.dim_f {
            return Err(Error::validation(format!(
                "apply_adjoint: path dim {} != kernel output dim {}",
                q.dim(),
                self.dim_f
            )));
        }
        let n = grid.last_main_node();
        if q.first_node() > 0 || q.last_node() < n {
            return Err(Error::validation(format!(
                "apply_adjoint: path spans [{}, {}] but needs [0, {n}]",
                q.first_node(),
                q.last_node()
            )));
        }
        let k = grid.k_steps() as i64;
        let mut out = StatePath::zeros(-k, n, self.dim_e);
        for t in 0..=n {
            for (i, (off, w)) in self.nu0.iter().enumerate() {
                let km = &self.mats[t as usize][i];
                let qv = q.at(t);
                let acc = out.at_mut(t + off);
                // acc += w * km^T * qv.
                for col in 0..self.dim_e {
                    let kcol = km.column(col);
                    let mut s = 0.0;
                    for r in 0..self.dim_f {
                        s += kcol[r] * qv[r];
                    }
                    acc[col] += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint by direct quadrature of the displayed formula (gather form).
    /// Must agree with `apply_adjoint` to round-off; kept as an independent
    /// route.
    pub fn apply_adjoint_formula(&self, grid: &TimeGrid, q: &StatePath) -> Result<StatePath> {
        if q.dim() != self.dim_f {
            return Err(Error::validation("apply_adjoint_formula: path dim mismatch"));
        }
        let n = grid.last_main_node();
        if q.first_node() > 0 || q.last_node() < n {
            return Err(Error::validation(
                "apply_adjoint_formula: path must span [0, T]",
            ));
        }
        let k = grid.k_steps() as i64;
        let mut out = StatePath::zeros(-k, n, self.dim_e);
        for t in -k..=n {
            let acc = out.at_mut(t);
            for (i, (off, w)) in self.nu0.iter().enumerate() {
                let src = t - off;
                if src < 0 || src > n {
                    continue;
                }
                let km = &self.mats[src as usize][i];
                let qv = q.at(src);
                for col in 0..self.dim_e {
                    let kcol = km.column(col);
                    let mut s = 0.0;
                    for r in 0..self.dim_f {
                        s += kcol[r] * qv[r];
                    }
                    acc[col] += w * s;
                }
            }
        }
        Ok(out)
    }
}

/// Kernel of a coefficient of the form `a(t, Z_mu(t))`: the chain rule gives
/// one shared derivative matrix per time, attached to every atom of `mu`.
pub fn integral_delay_kernel(
    grid: &TimeGrid,
    mu: &FiniteMeasure,
    mut derivative_at: impl FnMut(i64) -> DMatrix<f64>,
) -> Result<KernelRepresentation> {
    let n = grid.last_main_node();
    let mut per_time: Vec<DMatrix<f64>> = Vec::with_capacity(n as usize + 1);
    for t in 0..=n {
        per_time.push(derivative_at(t));
    }
    let (dim_f, dim_e) = (per_time[0].nrows(), per_time[0].ncols());
    KernelRepresentation::from_fn(grid, mu.clone(), dim_e, dim_f, |t, _, _| {
        per_time[t as usize].clone()
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DualityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Compares `sum_t dt <L(Z)(t), Q(t)>` on `[0, T]` against
/// `sum_t dt <Z(t), L*(Q)(t)>` on `[-K, T]`, with the transpose adjoint.
/// The residual is relative to the larger side.
pub fn duality_residual(
    rep: &KernelRepresentation,
    grid: &TimeGrid,
    z: &StatePath,
    q: &StatePath,
) -> Result<DualityCheck> {
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let dt = grid.dt();
    let fwd = rep.apply(grid, z)?;
    let adj = rep.apply_adjoint(grid, q)?;
    let mut lhs = 0.0;
    for t in 0..=n {
        lhs += dt * dotsl(fwd.at(t), q.at(t));
    }
    let mut rhs = 0.0;
    for t in -k..=n {
        rhs += dt * dotsl(z.at(t), adj.at(t));
    }
    let scale = lhs.abs().max(rhs.abs()).max(1e-300);
    Ok(DualityCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / scale,
    })
}

fn dotsl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Discrete two-sided count of the pairs `(t, s_i)` with `t + s_i >= K'`:
///
/// ```text
/// sum_{t in [0,T]} dt sum_i g(t, s_i) 1[t + s_i >= K'] w_i
///   = sum_{u in [K',T]} dt sum_i g(u - s_i, s_i) 1[u - s_i <= T, s_i <= u] w_i.
/// ```
///
/// Exact for grid-aligned atoms: both sides enumerate the same index set.
pub fn change_of_variables_check(
    grid: &TimeGrid,
    nu0: &FiniteMeasure,
    k_prime_node: i64,
    mut g: impl FnMut(i64, i64) -> f64,
) -> DualityCheck {
    let n = grid.last_main_node();
    let dt = grid.dt();
    let mut lhs = 0.0;
    for t in 0..=n {
        for (off, w) in nu0.iter() {
            if t + off >= k_prime_node {
                lhs += dt * w * g(t, off);
            }
        }
    }
    let mut rhs = 0.0;
    for u in k_prime_node..=n {
        for (off, w) in nu0.iter() {
            if off <= u && u - off <= n {
                rhs += dt * w * g(u - off, off);
            }
        }
    }
    let scale = lhs.abs().max(rhs.abs()).max(1e-300);
    DualityCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / scale,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundConstants {
    /// `sup_t sum_i |k(t, s_i)| w_i` over `t in [0, T]` (spectral norms).
    pub m0: f64,
    /// `sup_t sum_i |k(t - s_i, s_i)| w_i` over admissible pairs,
    /// `t in [-K, T]`.
    pub m_adj: f64,
}

pub fn compute_bounds(rep: &KernelRepresentation, grid: &TimeGrid) -> BoundConstants {
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let mut m0: f64 = 0.0;
    for t in 0..=n {
        let mut s = 0.0;
        for (i, (_, w)) in rep.nu0.iter().enumerate() {
            s += w * spectral_norm(rep.kernel(t, i));
        }
        m0 = m0.max(s);
    }
    let mut m_adj: f64 = 0.0;
    for t in -k..=n {
        let mut s = 0.0;
        for (i, (off, w)) in rep.nu0.iter().enumerate() {
            let src = t - off;
            if src < 0 || src > n {
                continue;
            }
            s += w * spectral_norm(rep.kernel(src, i));
        }
        m_adj = m_adj.max(s);
    }
    BoundConstants { m0, m_adj }
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0f64, |a, b| a.max(*b))
}

#[derive(Debug, Clone, Copy)]
pub struct BoundGaps {
    /// `sum_{[0,T']} dt |L(Z)|^2` versus `m0 * m_adj * sum_{[-K,T']} dt |Z|^2`.
    pub forward_lhs: f64,
    pub forward_rhs: f64,
    /// `sum_{[K',T]} dt |L*(Q)|^2` versus
    /// `m_adj * m0 * sum_{[max(0,K'),T]} dt |Q|^2`.
    pub adjoint_lhs: f64,
    pub adjoint_rhs: f64,
}

impl BoundGaps {
    pub fn hold(&self, tol: f64) -> bool {
        self.forward_lhs <= self.forward_rhs * (1.0 + tol) + tol
            && self.adjoint_lhs <= self.adjoint_rhs * (1.0 + tol) + tol
    }
}

/// Evaluates both operator-norm inequalities on concrete sample paths, with
/// truncation nodes `t_prime` (forward) and `k_prime` (adjoint).
pub fn bound_gaps(
    rep: &KernelRepresentation,
    grid: &TimeGrid,
    bounds: &BoundConstants,
    z: &StatePath,
    q: &StatePath,
    t_prime_node: i64,
    k_prime_node: i64,
) -> Result<BoundGaps> {
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let dt = grid.dt();
    let fwd = rep.apply(grid, z)?;
    let adj = rep.apply_adjoint(grid, q)?;

    let mut forward_lhs = 0.0;
    for t in 0..=t_prime_node.min(n) {
        forward_lhs += dt * dotsl(fwd.at(t), fwd.at(t));
    }
    let mut z_body = 0.0;
    for t in -k..=t_prime_node.min(n) {
        z_body += dt * dotsl(z.at(t), z.at(t));
    }
    let mut adjoint_lhs = 0.0;
    for t in k_prime_node.max(-k)..=n {
        adjoint_lhs += dt * dotsl(adj.at(t), adj.at(t));
    }
    let mut q_body = 0.0;
    for t in k_prime_node.max(0)..=n {
        q_body += dt * dotsl(q.at(t), q.at(t));
    }
    Ok(BoundGaps {
        forward_lhs,
        forward_rhs: bounds.m0 * bounds.m_adj * z_body,
        adjoint_lhs,
        adjoint_rhs: bounds.m_adj * bounds.m0 * q_body,
    })
}

/// Seeded random instance generator shared by the identity test suites.
pub struct RandomInstance {
    pub rep: KernelRepresentation,
    pub z: StatePath,
    pub q: StatePath,
}

pub fn random_instance(
    grid: &TimeGrid,
    dim_e: usize,
    dim_f: usize,
    seed: u64,
) -> Result<RandomInstance> {
    let k = grid.k_steps() as i64;
    let n = grid.last_main_node();
    // Between one and three atoms, always inside the window.
    let n_atoms = 1 + (crate::rng::keyed_u64(seed, 0, 0, 0, 0) % 3.min(k as u64 + 1)) as usize;
    let mut atoms = Vec::new();
    for i in 0..n_atoms {
        let off = -((crate::rng::keyed_u64(seed, 1, i as u64, 0, 0) % (k as u64 + 1)) as i64);
        let w = 0.1 + keyed_uniform_sym(seed, 2, i as u64, 0, 0).abs();
        atoms.push((off, w));
    }
    let nu0 = FiniteMeasure::new(atoms, grid)?;
    let rep = KernelRepresentation::from_fn(grid, nu0, dim_e, dim_f, |t, i, _| {
        DMatrix::from_fn(dim_f, dim_e, |r, c| {
            keyed_uniform_sym(seed, 3 + t as u64, i as u64, (r * dim_e + c) as u64, 0)
        })
    })?;
    let z = StatePath::from_fn(-k, n, dim_e, |node, c| {
        keyed_uniform_sym(seed, 4, (node + k) as u64, c as u64, 0)
    });
    let q = StatePath::from_fn(0, n, dim_f, |node, c| {
        keyed_uniform_sym(seed, 5, node as u64, c as u64, 0)
    });
    Ok(RandomInstance { rep, z, q })
}
