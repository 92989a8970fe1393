//! Monte Carlo time stepping for the delayed state equation.
//!
//! Scheme per path, drift-implicit in the stiff linear part:
//!
//! ```text
//! (I - dt A(t_{n+1})) x_{n+1}
//!   = x_n + dt b(t_n, reads, u_read(t_n))
//!     + sum_j sqrt(lam_j) [B_j(t_n) x_n + sig_j(t_n, reads, u_read(t_n))] dW^j_n,
//! ```
//!
//! where `reads` are the state values at the declared delay atoms (left
//! endpoint, adapted) and `u_read` is the control averaged by the control
//! delay measure. The nonlinear and delay parts stay explicit so no
//! nonlinear solves are needed; `A` alone is treated implicitly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::{delay_integral, FiniteMeasure};
use crate::noise::NoiseEnsemble;
use crate::operators::OperatorPair;
use crate::paths::StatePath;
use crate::spaces::ModelSpace;

pub type CoefFn = Arc<dyn Fn(i64, &[DVector<f64>], &DVector<f64>) -> DVector<f64> + Send + Sync>;
pub type CoefMatFn =
    Arc<dyn Fn(i64, &[DVector<f64>], &DVector<f64>) -> DMatrix<f64> + Send + Sync>;
pub type JacAtomsFn =
    Arc<dyn Fn(i64, &[DVector<f64>], &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type JacAtomsModesFn =
    Arc<dyn Fn(i64, &[DVector<f64>], &DVector<f64>) -> Vec<Vec<DMatrix<f64>>> + Send + Sync>;

/// Drift and diffusion nonlinearities plus their exact derivative data.
///
/// The functions receive the raw state values at the atoms of
/// `state_atoms` (oldest first, weights NOT applied) and the delayed
/// control read. Derivative callbacks return Jacobians with respect to
/// each atom read, weight factors included, so linearizations need no
/// extra bookkeeping.
#[derive(Clone)]
pub struct CoefficientSet {
    pub dim: usize,
    pub n_modes: usize,
    pub control_dim: usize,
    /// Atoms through which `b` and `sigma` read the trailing path.
    pub state_atoms: FiniteMeasure,
    pub b: CoefFn,
    /// `d x n_modes`; column `j` rides mode `j`.
    pub sigma: CoefMatFn,
    /// Per atom: `d x d` Jacobian of `b` w.r.t. that read.
    pub db_dx: JacAtomsFn,
    /// `d x control_dim`.
    pub db_dv: CoefMatFn,
    /// `[atom][mode]`: `d x d` Jacobian of `sigma` column `mode`.
    pub dsigma_dx: JacAtomsModesFn,
    /// Per mode: `d x control_dim` Jacobian of `sigma` column `mode`.
    pub dsigma_dv: Arc<dyn Fn(i64, &[DVector<f64>], &DVector<f64>) -> Vec<DMatrix<f64>> + Send + Sync>,
    /// Declared squared-increment Lipschitz constant; see `certify_lipschitz`.
    pub lipschitz: f64,
}

impl std::fmt::Debug for CoefficientSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("dim", &self.dim)
            .field("n_modes", &self.n_modes)
            .field("control_dim", &self.control_dim)
            .field("state_atoms", &self.state_atoms)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl CoefficientSet {
    /// `b = sigma = 0` with a single read at the current time.
    pub fn zero(dim: usize, n_modes: usize, control_dim: usize) -> Self {
        let d = dim;
        CoefficientSet {
            dim,
            n_modes,
            control_dim,
            state_atoms: FiniteMeasure::dirac_now(),
            b: Arc::new(move |_, _, _| DVector::zeros(d)),
            sigma: Arc::new(move |_, _, _| DMatrix::zeros(d, n_modes)),
            db_dx: Arc::new(move |_, _, _| vec![DMatrix::zeros(d, d)]),
            db_dv: Arc::new(move |_, _, _| DMatrix::zeros(d, control_dim)),
            dsigma_dx: Arc::new(move |_, _, _| vec![vec![DMatrix::zeros(d, d); n_modes]]),
            dsigma_dv: Arc::new(move |_, _, _| vec![DMatrix::zeros(d, control_dim); n_modes]),
            lipschitz: 0.0,
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.state_atoms.n_atoms()
    }
}

/// Everything fixed about the dynamics; controls, initial paths, and noise
/// vary per solve.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub space: ModelSpace,
    pub ops: OperatorPair,
    pub coeffs: CoefficientSet,
    /// Control delay measure.
    pub mu1: FiniteMeasure,
}

#[derive(Debug, Clone)]
pub struct ForwardSolution {
    /// One state path per Monte Carlo path, each spanning `[-K, T]`.
    pub paths: Vec<StatePath>,
    pub dt: f64,
}

impl ForwardSolution {
    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    /// Mean over paths of `sup_n |x_n|_H^2 + sum_n |x_n|_V^2 dt`, nodes
    /// `0..=N`.
    pub fn state_norm_sq(&self, model: &ForwardModel) -> f64 {
        let grid = &model.space.grid;
        let triple = &model.space.triple;
        let mut acc = 0.0;
        for p in &self.paths {
            let mut sup = 0.0f64;
            let mut l2v = 0.0;
            for n in 0..=grid.last_main_node() {
                let x = p.at(n);
                sup = sup.max(triple.norm_h_sq(x));
                l2v += triple.norm_v_sq(x) * grid.dt();
            }
            acc += sup + l2v;
        }
        acc / self.paths.len() as f64
    }

    pub fn diff_norm_sq(&self, other: &ForwardSolution, model: &ForwardModel) -> Result<f64> {
        if self.paths.len() != other.paths.len() {
            return Err(Error::validation("diff_norm_sq: path count mismatch"));
        }
        let grid = &model.space.grid;
        let triple = &model.space.triple;
        let mut acc = 0.0;
        let mut buf = vec![0.0; model.coeffs.dim];
        for (a, b) in self.paths.iter().zip(&other.paths) {
            let mut sup = 0.0f64;
            let mut l2v = 0.0;
            for n in 0..=grid.last_main_node() {
                let xa = a.at(n);
                let xb = b.at(n);
                for i in 0..buf.len() {
                    buf[i] = xa[i] - xb[i];
                }
                sup = sup.max(triple.norm_h_sq(&buf));
                l2v += triple.norm_v_sq(&buf) * grid.dt();
            }
            acc += sup + l2v;
        }
        Ok(acc / self.paths.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &ForwardSolution) -> f64 {
        self.paths
            .iter()
            .zip(&other.paths)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    pub fn mean_terminal(&self, grid: &TimeGrid) -> DVector<f64> {
        let n = grid.last_main_node();
        let d = self.paths[0].dim();
        let mut acc = DVector::zeros(d);
        for p in &self.paths {
            acc += DVector::from_column_slice(p.at(n));
        }
        acc / self.paths.len() as f64
    }
}

pub(crate) fn gather_reads(path: &StatePath, atoms: &FiniteMeasure, t_node: i64) -> Vec<DVector<f64>> {
    atoms
        .offsets()
        .iter()
        .map(|off| DVector::from_column_slice(path.at(t_node + off)))
        .collect()
}

/// LU factors of `(I - dt Op(t_{n+1}))` for `n = 0..N-1`, shared per solve.
pub(crate) struct ImplicitFactors {
    factors: Vec<LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
}

impl ImplicitFactors {
    pub(crate) fn build(op: &crate::operators::OpMat, grid: &TimeGrid, dim: usize) -> Result<Self> {
        let mut factors = Vec::with_capacity(grid.n_steps());
        for n in 0..grid.n_steps() as i64 {
            let a = op(n + 1);
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::validation(format!(
                    "drift operator at node {} is {}x{}, expected {dim}x{dim}",
                    n + 1,
                    a.nrows(),
                    a.ncols()
                )));
            }
            let m = DMatrix::identity(dim, dim) - a * grid.dt();
            let lu = m.lu();
            if lu.determinant().abs() < 1e-300 {
                return Err(Error::numerical(format!(
                    "implicit matrix I - dt*A singular at node {}; reduce dt",
                    n + 1
                )));
            }
            factors.push(lu);
        }
        Ok(ImplicitFactors { factors })
    }

    /// Solve the implicit system for the step landing on node `n + 1`.
    pub(crate) fn solve(&self, n: usize, rhs: DVector<f64>) -> DVector<f64> {
        self.factors[n].solve(&rhs).expect("checked non-singular")
    }
}

fn validate_inputs(
    model: &ForwardModel,
    u: &StatePath,
    gamma: &StatePath,
    ens: &NoiseEnsemble,
) -> Result<()> {
    let grid = &model.space.grid;
    let k = grid.k_steps() as i64;
    if gamma.dim() != model.coeffs.dim || gamma.first_node() > -k || gamma.last_node() < 0 {
        return Err(Error::validation(format!(
            "initial path must span [-{k}, 0] with dim {}",
            model.coeffs.dim
        )));
    }
    if u.dim() != model.coeffs.control_dim
        || u.first_node() > -k
        || u.last_node() < grid.last_main_node()
    {
        return Err(Error::validation(format!(
            "control must span [-{k}, {}] with dim {}",
            grid.last_main_node(),
            model.coeffs.control_dim
        )));
    }
    if ens.n_steps() != grid.n_steps() || ens.n_modes() != model.space.qw.n_modes() {
        return Err(Error::validation(
            "noise ensemble does not match grid steps / noise modes",
        ));
    }
    if (ens.dt() - grid.dt()).abs() > 1e-12 * grid.dt() {
        return Err(Error::validation("noise ensemble dt does not match grid"));
    }
    Ok(())
}

pub fn solve_forward(
    model: &ForwardModel,
    u: &StatePath,
    gamma: &StatePath,
    ens: &NoiseEnsemble,
) -> Result<ForwardSolution> {
    validate_inputs(model, u, gamma, ens)?;
    let grid = &model.space.grid;
    let d = model.coeffs.dim;
    let n_steps = grid.n_steps();
    let k = grid.k_steps() as i64;
    let factors = ImplicitFactors::build(&model.ops.a, grid, d)?;
    let u_reads = control_reads(model, u)?;
    let sqrt_lam = model.space.qw.sqrt_eigenvalues();

    let mut paths = Vec::with_capacity(ens.n_paths());
    for p in 0..ens.n_paths() {
        let mut x = StatePath::zeros(-k, grid.last_main_node(), d);
        for node in -k..=0 {
            x.set_slice(node, gamma.at(node));
        }
        for n in 0..n_steps {
            let tn = n as i64;
            let reads = gather_reads(&x, &model.coeffs.state_atoms, tn);
            let ur = &u_reads[n];
            let bv = (model.coeffs.b)(tn, &reads, ur);
            let sig = (model.coeffs.sigma)(tn, &reads, ur);
            if bv.len() != d || sig.nrows() != d || sig.ncols() != model.coeffs.n_modes {
                return Err(Error::validation(format!(
                    "coefficient shapes at node {tn}: b len {}, sigma {}x{}",
                    bv.len(),
                    sig.nrows(),
                    sig.ncols()
                )));
            }
            let bmats = (model.ops.b)(tn);
            if bmats.len() != model.coeffs.n_modes {
                return Err(Error::validation(format!(
                    "diffusion operator returns {} modes, expected {}",
                    bmats.len(),
                    model.coeffs.n_modes
                )));
            }
            let xn = DVector::from_column_slice(x.at(tn));
            let dw = ens.increments(p, n);
            let mut rhs = &xn + bv * grid.dt();
            for j in 0..model.coeffs.n_modes {
                let sl = sqrt_lam[j];
                if sl == 0.0 {
                    continue;
                }
                let w = sl * dw[j];
                rhs += (&bmats[j] * &xn + sig.column(j)) * w;
            }
            let next = factors.solve(n, rhs);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite state at path {p}, step {n}; reduce dt or check coefficients"
                )));
            }
            x.set_slice(tn + 1, next.as_slice());
        }
        paths.push(x);
    }
    Ok(ForwardSolution {
        paths,
        dt: grid.dt(),
    })
}

/// Delayed control reads at the left endpoints `t_0..t_{N-1}`.
pub(crate) fn control_reads(model: &ForwardModel, u: &StatePath) -> Result<Vec<DVector<f64>>> {
    let grid = &model.space.grid;
    (0..grid.n_steps() as i64)
        .map(|n| delay_integral(u, &model.mu1, n))
        .collect()
}

#[derive(Debug)]
pub struct PicardReport {
    pub iterates: Vec<ForwardSolution>,
    /// `r_k = |x_{k+1} - x_k| / |x_k - x_{k-1}|` in the state norm,
    /// starting from the second difference.
    pub ratios: Vec<f64>,
    pub final_diff: f64,
}

/// Fixed-point iteration: each sweep solves the linear equation whose delay
/// reads are frozen at the previous iterate. The zeroth iterate extends the
/// initial path by freezing its value at time zero.
pub fn picard_iterate(
    model: &ForwardModel,
    u: &StatePath,
    gamma: &StatePath,
    ens: &NoiseEnsemble,
    n_iter: usize,
) -> Result<PicardReport> {
    validate_inputs(model, u, gamma, ens)?;
    let grid = &model.space.grid;
    let d = model.coeffs.dim;
    let k = grid.k_steps() as i64;
    let n_steps = grid.n_steps();
    let factors = ImplicitFactors::build(&model.ops.a, grid, d)?;
    let u_reads = control_reads(model, u)?;
    let sqrt_lam = model.space.qw.sqrt_eigenvalues();

    let frozen = {
        let mut x = StatePath::zeros(-k, grid.last_main_node(), d);
        for node in -k..=grid.last_main_node() {
            x.set_slice(node, gamma.at(node.min(0)));
        }
        x
    };
    let mut current = ForwardSolution {
        paths: vec![frozen; ens.n_paths()],
        dt: grid.dt(),
    };
    let mut iterates = vec![current.clone()];
    let mut ratios = Vec::new();
    let mut prev_diff: Option<f64> = None;
    let mut final_diff = f64::NAN;
    let mut blowups = 0;

    for _ in 0..n_iter {
        let mut paths = Vec::with_capacity(ens.n_paths());
        for p in 0..ens.n_paths() {
            let prev = &current.paths[p];
            let mut x = StatePath::zeros(-k, grid.last_main_node(), d);
            for node in -k..=0 {
                x.set_slice(node, gamma.at(node));
            }
            for n in 0..n_steps {
                let tn = n as i64;
                let reads = gather_reads(prev, &model.coeffs.state_atoms, tn);
                let ur = &u_reads[n];
                let bv = (model.coeffs.b)(tn, &reads, ur);
                let sig = (model.coeffs.sigma)(tn, &reads, ur);
                let bmats = (model.ops.b)(tn);
                let xn = DVector::from_column_slice(x.at(tn));
                let dw = ens.increments(p, n);
                let mut rhs = &xn + bv * grid.dt();
                for j in 0..model.coeffs.n_modes {
                    let sl = sqrt_lam[j];
                    if sl == 0.0 {
                        continue;
                    }
                    rhs += (&bmats[j] * &xn + sig.column(j)) * (sl * dw[j]);
                }
                let next = factors.solve(n, rhs);
                if next.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical(format!(
                        "non-finite iterate at path {p}, step {n}"
                    )));
                }
                x.set_slice(tn + 1, next.as_slice());
            }
            paths.push(x);
        }
        let next = ForwardSolution {
            paths,
            dt: grid.dt(),
        };
        let diff = next.diff_norm_sq(&current, model)?.sqrt();
        if let Some(prev) = prev_diff {
            let r = if prev > 0.0 { diff / prev } else { 0.0 };
            ratios.push(r);
            if r > 10.0 {
                blowups += 1;
                if blowups >= 2 {
                    return Err(Error::numerical(
                        "fixed-point iteration diverging (ratio > 10 twice); \
                         solve on a shorter time window",
                    ));
                }
            }
        }
        prev_diff = Some(diff);
        final_diff = diff;
        iterates.push(next.clone());
        current = next;
    }
    Ok(PicardReport {
        iterates,
        ratios,
        final_diff,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct AprioriReport {
    /// Mean of `sup |x - x'|_H^2 + int |x - x'|_V^2`.
    pub lhs: f64,
    /// Mean of `sup |gamma - gamma'|_H^2` plus the integrated coefficient
    /// deltas evaluated along the second solution.
    pub rhs_data: f64,
    pub ratio: f64,
}

/// Stability diagnostic: how much of the solution difference the data
/// difference explains. Both solves must share the noise ensemble.
#[allow(clippy::too_many_arguments)]
pub fn apriori_diagnostic(
    model_a: &ForwardModel,
    u_a: &StatePath,
    gamma_a: &StatePath,
    sol_a: &ForwardSolution,
    model_b: &ForwardModel,
    u_b: &StatePath,
    gamma_b: &StatePath,
    sol_b: &ForwardSolution,
) -> Result<AprioriReport> {
    if sol_a.n_paths() != sol_b.n_paths() {
        return Err(Error::validation("apriori: ensembles of different sizes"));
    }
    let grid = &model_a.space.grid;
    let triple = &model_a.space.triple;
    let qw = &model_a.space.qw;
    let d = model_a.coeffs.dim;
    let k = grid.k_steps() as i64;
    let lhs = sol_a.diff_norm_sq(sol_b, model_a)?;

    let mut gamma_sup = 0.0f64;
    let mut buf = vec![0.0; d];
    for node in -k..=0 {
        let ga = gamma_a.at(node);
        let gb = gamma_b.at(node);
        for i in 0..d {
            buf[i] = ga[i] - gb[i];
        }
        gamma_sup = gamma_sup.max(triple.norm_h_sq(&buf));
    }

    let ur_a = control_reads(model_a, u_a)?;
    let ur_b = control_reads(model_b, u_b)?;
    let mut coef = 0.0;
    for p in 0..sol_b.n_paths() {
        let xb = &sol_b.paths[p];
        for n in 0..grid.n_steps() {
            let tn = n as i64;
            let reads_a = gather_reads(xb, &model_a.coeffs.state_atoms, tn);
            let reads_b = gather_reads(xb, &model_b.coeffs.state_atoms, tn);
            let db = (model_a.coeffs.b)(tn, &reads_a, &ur_a[n])
                - (model_b.coeffs.b)(tn, &reads_b, &ur_b[n]);
            let ds = (model_a.coeffs.sigma)(tn, &reads_a, &ur_a[n])
                - (model_b.coeffs.sigma)(tn, &reads_b, &ur_b[n]);
            coef += (triple.norm_h_sq(db.as_slice()) + qw.hs_norm_sq(&ds)) * grid.dt();
        }
    }
    coef /= sol_b.n_paths() as f64;
    let rhs_data = gamma_sup + coef;
    let ratio = if rhs_data > 0.0 { lhs / rhs_data } else { 0.0 };
    Ok(AprioriReport {
        lhs,
        rhs_data,
        ratio,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LipschitzReport {
    pub declared: f64,
    pub max_observed: f64,
}

impl LipschitzReport {
    pub fn passes(&self) -> bool {
        self.max_observed <= self.declared * (1.0 + 1e-9) + 1e-12
    }
}

/// Samples random read pairs at shared controls and measures
/// `(|b - b'|^2 + |sigma - sigma'|_{L20}^2) / sup_i |read_i - read_i'|^2`
/// against the declared constant. Also probes finiteness at the origin.
pub fn certify_lipschitz(
    coeffs: &CoefficientSet,
    grid: &TimeGrid,
    qw: &crate::spaces::QWienerConfig,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    let d = coeffs.dim;
    let na = coeffs.n_atoms();
    let zero_reads = vec![DVector::zeros(d); na];
    let zero_v = DVector::zeros(coeffs.control_dim);
    for t in 0..=grid.last_main_node() {
        let b0 = (coeffs.b)(t, &zero_reads, &zero_v);
        let s0 = (coeffs.sigma)(t, &zero_reads, &zero_v);
        if b0.iter().any(|v| !v.is_finite()) || s0.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(format!(
                "coefficients non-finite at zero state, node {t}"
            )));
        }
    }
    let mut max_observed = 0.0f64;
    for s in 0..n_samples {
        let t = (crate::rng::keyed_u64(seed, 0, s as u64, 0, 0)
            % (grid.last_main_node() as u64 + 1)) as i64;
        let draw = |a: u64, b: u64, lane: u64| crate::rng::keyed_uniform_sym(seed, a, s as u64 * 97 + b, lane, 1);
        let mk = |tag: u64| -> Vec<DVector<f64>> {
            (0..na)
                .map(|i| DVector::from_fn(d, |r, _| 2.0 * draw(tag, i as u64, r as u64)))
                .collect()
        };
        let ra = mk(1);
        let rb = mk(2);
        let v = DVector::from_fn(coeffs.control_dim, |r, _| draw(3, 0, r as u64));
        let den = ra
            .iter()
            .zip(&rb)
            .map(|(a, b)| (a - b).norm_squared())
            .fold(0.0f64, f64::max);
        if den < 1e-14 {
            continue;
        }
        let db = (coeffs.b)(t, &ra, &v) - (coeffs.b)(t, &rb, &v);
        let ds = (coeffs.sigma)(t, &ra, &v) - (coeffs.sigma)(t, &rb, &v);
        let num = db.norm_squared() + qw.hs_norm_sq(&ds);
        max_observed = max_observed.max(num / den);
    }
    Ok(LipschitzReport {
        declared: coeffs.lipschitz,
        max_observed,
    })
}
