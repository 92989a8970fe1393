//! Unbounded-operator pair of the linear part of the dynamics.
//!
//! `A(t)` maps `V` to `V*` (a `d x d` matrix in coordinates) and enters the
//! time stepping implicitly; the diffusion operator `B(t)` maps `V` to the
//! Hilbert-Schmidt class and is stored as one `d x d` matrix per noise mode,
//! `(B(t)x) e_j = B_j(t) x`. The pair carries its structure constants: the
//! coercivity margin `alpha`, the compensating rate `lambda` in
//!
//! ```text
//! 2 <A(t)u, u> + sum_j lambda_j |B_j(t)u|^2 <= -alpha |u|_V^2 + lambda |u|_H^2,
//! ```
//!
//! and the bound `|A(t)u|_* <= k1 |u|_V`. Declared constants are audited, not
//! trusted: `check_coercivity` sweeps basis and random unit vectors over all
//! grid times and reports the worst violation instead of failing.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::grid::TimeGrid;
use crate::rng::keyed_uniform_sym;
use crate::spaces::{pair, GelfandTriple, QWienerConfig};

pub type OpMat = Arc<dyn Fn(i64) -> DMatrix<f64> + Send + Sync>;
pub type ModeMats = Arc<dyn Fn(i64) -> Vec<DMatrix<f64>> + Send + Sync>;

#[derive(Clone)]
pub struct OperatorPair {
    pub a: OpMat,
    pub b: ModeMats,
    pub alpha: f64,
    pub lambda: f64,
    pub k1: f64,
}

impl OperatorPair {
    pub fn constant(a: DMatrix<f64>, b: Vec<DMatrix<f64>>, alpha: f64, lambda: f64, k1: f64) -> Self {
        OperatorPair {
            a: Arc::new(move |_| a.clone()),
            b: Arc::new(move |_| b.clone()),
            alpha,
            lambda,
            k1,
        }
    }

    /// Zero operators with `m` noise modes; trivially coercive with margin 0.
    pub fn zero(d: usize, m: usize) -> Self {
        OperatorPair::constant(
            DMatrix::zeros(d, d),
            vec![DMatrix::zeros(d, d); m],
            0.0,
            0.0,
            0.0,
        )
    }
}

impl std::fmt::Debug for OperatorPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OperatorPair")
            .field("alpha", &self.alpha)
            .field("lambda", &self.lambda)
            .field("k1", &self.k1)
            .finish()
    }
}

#[derive(Debug, Clone)]
pub struct CoercivityReport {
    /// Worst value of `2<Au,u> + |Bu|^2 + alpha|u|_V^2 - lambda|u|_H^2` over
    /// all probes; nonpositive (up to round-off) means the declared margin
    /// holds.
    pub max_violation: f64,
    /// Probe achieving it: (time node, probe label).
    pub worst_probe: Option<(i64, String)>,
    /// Worst value of `|Au|_* - k1 |u|_V` over all probes.
    pub max_bound_violation: f64,
    pub n_probes: usize,
}

impl CoercivityReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_violation <= tol && self.max_bound_violation <= tol
    }
}

pub fn check_coercivity(
    ops: &OperatorPair,
    triple: &GelfandTriple,
    qw: &QWienerConfig,
    grid: &TimeGrid,
    n_random: usize,
    seed: u64,
) -> CoercivityReport {
    let d = triple.dim();
    let mut probes: Vec<(String, DVector<f64>)> = Vec::new();
    for j in 0..d {
        let mut e = DVector::zeros(d);
        e[j] = 1.0;
        probes.push((format!("basis e_{j}"), e));
    }
    for r in 0..n_random {
        let mut v = DVector::zeros(d);
        for j in 0..d {
            v[j] = keyed_uniform_sym(seed, r as u64, j as u64, 0, 0);
        }
        let n = v.norm();
        if n > 1e-12 {
            v /= n;
        } else {
            v[0] = 1.0;
        }
        probes.push((format!("random {r}"), v));
    }

    let lambdas = qw.eigenvalues();
    let mut report = CoercivityReport {
        max_violation: f64::NEG_INFINITY,
        worst_probe: None,
        max_bound_violation: f64::NEG_INFINITY,
        n_probes: 0,
    };
    for node in 0..=grid.last_main_node() {
        let a = (ops.a)(node);
        let b = (ops.b)(node);
        for (label, u) in &probes {
            report.n_probes += 1;
            let au = &a * u;
            let us = u.as_slice();
            let mut lhs = 2.0 * pair(au.as_slice(), us);
            for (bj, lj) in b.iter().zip(lambdas) {
                if *lj == 0.0 {
                    continue;
                }
                lhs += lj * (bj * u).norm_squared();
            }
            let viol =
                lhs + ops.alpha * triple.norm_v_sq(us) - ops.lambda * triple.norm_h_sq(us);
            if viol > report.max_violation {
                report.max_violation = viol;
                report.worst_probe = Some((node, label.clone()));
            }
            let bound_viol = triple.norm_dual(au.as_slice()) - ops.k1 * triple.norm_v(us);
            if bound_viol > report.max_bound_violation {
                report.max_bound_violation = bound_viol;
            }
        }
    }
    report
}
