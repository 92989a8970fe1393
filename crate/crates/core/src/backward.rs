//! Backward solvers: the anticipated adjoint equation with a running
//! terminal, the recursive-cost equation, and the scalar cost-adjoint
//! process, plus the translation transform and a discrete energy identity.
//!
//! The backward step is the literal transpose of the forward scheme. With
//! `S_n = (I - dt M(t_{n+1}))^{-1}` the recursion per path is
//!
//! ```text
//! psi_n    = S_n [ p_{n+1} + zeta(t_{n+1}) dF_{n+1} ]
//! q_n[:,l] = CondExp_n[ psi_n dW^l_n / (sqrt(lam_l) dt) ]
//! p_n      = CondExp_n[ psi_n + dt (sum_l lam_l N_l(t_n) q_n[:,l]
//!                                    + g(n, psi-view, q-view)) ]
//! ```
//!
//! so jumps of the running terminal ride inside the implicit solve (they
//! are applied at the right endpoint of their step; the stored value at a
//! jump node excludes its own jump), while generator and q-coupling terms
//! stay outside it. Generators read FUTURE values through views that
//! expose the post-solve `psi` on `[n, T-dt]` and the terminal data on
//! `[T, T+K]`; keeping `psi` rather than `p` in the view is what makes the
//! composed forward/backward pair an exact adjoint in the deterministic
//! case.

use std::sync::Arc;

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::forward::{ForwardSolution, ImplicitFactors};
use crate::grid::TimeGrid;
use crate::noise::NoiseEnsemble;
use crate::operators::{ModeMats, OpMat};
use crate::paths::StatePath;
use crate::regression::{CondExp, Conditioner};
use crate::spaces::ModelSpace;

/// The scalar bounded-variation weight of the running terminal: `inc[n]`
/// is the F-increment over `(t_n, t_{n+1}]`, jumps included.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningTerminal {
    inc: Vec<f64>,
}

impl RunningTerminal {
    pub fn none(n_steps: usize) -> Self {
        RunningTerminal {
            inc: vec![0.0; n_steps],
        }
    }

    /// Pure jumps at interior nodes in `(0, T]`.
    pub fn from_jumps(grid: &TimeGrid, jumps: &[(i64, f64)]) -> Result<Self> {
        let mut inc = vec![0.0; grid.n_steps()];
        for (node, size) in jumps {
            if *node < 1 || *node > grid.last_main_node() {
                return Err(Error::validation(format!(
                    "running-terminal jump node {node} outside (0, {}]",
                    grid.last_main_node()
                )));
            }
            inc[(*node - 1) as usize] += size;
        }
        Ok(RunningTerminal { inc })
    }

    pub fn from_increments(inc: Vec<f64>, grid: &TimeGrid) -> Result<Self> {
        if inc.len() != grid.n_steps() {
            return Err(Error::validation(format!(
                "running terminal needs {} increments, got {}",
                grid.n_steps(),
                inc.len()
            )));
        }
        Ok(RunningTerminal { inc })
    }

    /// Increment of the step ending at `node` (`1..=N`).
    pub fn increment_ending_at(&self, node: i64) -> f64 {
        self.inc[(node - 1) as usize]
    }

    pub fn total_variation(&self) -> f64 {
        self.inc.iter().map(|v| v.abs()).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.inc.iter().all(|v| *v == 0.0)
    }

    /// Nonzero increments as `(node, size)` pairs.
    pub fn jumps(&self) -> Vec<(i64, f64)> {
        self.inc
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as i64 + 1, *v))
            .collect()
    }
}

/// Read-only window onto the future of a backward solve. `at` clamps the
/// node below to the current step (the `p_{s+}(r) = p(s v r)` convention)
/// and above to the end of the stored data. Nodes before the terminal
/// region resolve to the post-solve propagated values; nodes from `T` on
/// resolve to the terminal data.
pub struct FutureView<'a> {
    early: &'a StatePath,
    late: &'a StatePath,
    switch: i64,
    floor: i64,
    offset: Option<&'a StatePath>,
}

impl<'a> FutureView<'a> {
    pub(crate) fn new(early: &'a StatePath, late: &'a StatePath, switch: i64, floor: i64) -> Self {
        FutureView {
            early,
            late,
            switch,
            floor,
            offset: None,
        }
    }

    pub fn floor_node(&self) -> i64 {
        self.floor
    }

    pub fn at(&self, node: i64) -> DVector<f64> {
        let r = node.max(self.floor);
        let base = if r < self.switch {
            self.early.at(r)
        } else {
            self.late.at(r.min(self.late.last_node()))
        };
        let mut v = DVector::from_column_slice(base);
        if let Some(o) = self.offset {
            let or = r.clamp(o.first_node(), o.last_node());
            let os = o.at(or);
            for i in 0..v.len() {
                v[i] -= os[i];
            }
        }
        v
    }

    /// Same window with an additive correction subtracted from every read;
    /// used by the translation transform.
    pub fn with_offset<'b>(&'b self, off: &'b StatePath) -> FutureView<'b> {
        debug_assert!(self.offset.is_none(), "offsets do not nest");
        FutureView {
            early: self.early,
            late: self.late,
            switch: self.switch,
            floor: self.floor,
            offset: Some(off),
        }
    }
}

/// `g(path, n, psi_view, q_view) -> d`-vector, evaluated once per path and
/// step; must only read nodes `>= n` from the views.
pub type GeneratorFn =
    Arc<dyn Fn(usize, i64, &FutureView<'_>, &FutureView<'_>) -> DVector<f64> + Send + Sync>;

#[derive(Clone)]
pub struct BackwardProblem {
    pub dim: usize,
    pub n_modes: usize,
    /// Implicit drift operator, evaluated at the right node of each step.
    pub m_op: OpMat,
    /// Per-mode matrices applied to the q columns with lambda weights,
    /// evaluated at the left node (mirroring the forward scheme's explicit
    /// noise operator). An adjoint assembler passes the transposed forward
    /// operators here.
    pub n_mode_mats: ModeMats,
    pub generator: GeneratorFn,
    pub running: RunningTerminal,
    /// Declared squared-increment Lipschitz constant of the generator.
    pub lipschitz: f64,
}

impl std::fmt::Debug for BackwardProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackwardProblem")
            .field("dim", &self.dim)
            .field("n_modes", &self.n_modes)
            .field("running", &self.running)
            .field("lipschitz", &self.lipschitz)
            .finish_non_exhaustive()
    }
}

impl BackwardProblem {
    /// Zero generator, zero operators, no running terminal.
    pub fn trivial(grid: &TimeGrid, dim: usize, n_modes: usize) -> Self {
        let d = dim;
        BackwardProblem {
            dim,
            n_modes,
            m_op: Arc::new(move |_| nalgebra::DMatrix::zeros(d, d)),
            n_mode_mats: Arc::new(move |_| vec![nalgebra::DMatrix::zeros(d, d); n_modes]),
            generator: Arc::new(move |_, _, _, _| DVector::zeros(d)),
            running: RunningTerminal::none(grid.n_steps()),
            lipschitz: 0.0,
        }
    }

    /// Operator pair view for coercivity auditing: the backward drift
    /// operator together with the adjoints of the q-weights, which for an
    /// adjoint-assembled problem recovers a forward-type pair.
    pub fn coercivity_pair(&self, alpha: f64, lambda: f64, k1: f64) -> crate::operators::OperatorPair {
        let mats = self.n_mode_mats.clone();
        crate::operators::OperatorPair {
            a: self.m_op.clone(),
            b: Arc::new(move |t| mats(t).iter().map(|m| m.transpose()).collect()),
            alpha,
            lambda,
            k1,
        }
    }
}

/// Per-path terminal and running data.
#[derive(Debug, Clone)]
pub struct BackwardData {
    /// Terminal values on `[T, T+K]`, dim `d`.
    pub xi: Vec<StatePath>,
    /// Terminal q-data on `[T, T+K]`, dim `d * n_modes`; the value AT `T`
    /// is ignored (the scheme stores zero there).
    pub eta: Vec<StatePath>,
    /// Running datum read at the right endpoints `1..=N`; required when
    /// the running terminal is nonzero.
    pub zeta: Option<Vec<StatePath>>,
}

impl BackwardData {
    /// Deterministic data replicated over `n_paths`.
    pub fn deterministic(
        n_paths: usize,
        xi: StatePath,
        eta: StatePath,
        zeta: Option<StatePath>,
    ) -> Self {
        BackwardData {
            xi: vec![xi; n_paths],
            eta: vec![eta; n_paths],
            zeta: zeta.map(|z| vec![z; n_paths]),
        }
    }

    /// Constant scalar-per-coordinate terminal `xi = c`, zero `eta`.
    pub fn constant_terminal(grid: &TimeGrid, n_paths: usize, dim: usize, n_modes: usize, c: &[f64]) -> Self {
        let n = grid.last_main_node();
        let k = grid.k_steps() as i64;
        BackwardData::deterministic(
            n_paths,
            StatePath::constant(n, n + k, c),
            StatePath::zeros(n, n + k, dim * n_modes),
            None,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// Stored solution on `[0, T+K]`; `(T, T+K]` is the terminal data.
    pub p: Vec<StatePath>,
    /// Martingale coefficient on `[0, T+K]`, dim `d * n_modes`; zero at
    /// `T`, eta beyond.
    pub q: Vec<StatePath>,
    /// Post-solve propagated values `psi_n` on `[0, T-dt]`; the exact
    /// adjoint weights for left-endpoint drift reads.
    pub psi: Vec<StatePath>,
}

impl BackwardSolution {
    pub fn n_paths(&self) -> usize {
        self.p.len()
    }

    pub fn mean_initial(&self) -> DVector<f64> {
        let d = self.p[0].dim();
        let mut acc = DVector::zeros(d);
        for p in &self.p {
            acc += p.vec_at(0);
        }
        acc / self.p.len() as f64
    }

    pub fn max_abs_diff(&self, other: &BackwardSolution) -> f64 {
        let dp = self
            .p
            .iter()
            .zip(&other.p)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f64, f64::max);
        let dq = self
            .q
            .iter()
            .zip(&other.q)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0f64, f64::max);
        dp.max(dq)
    }
}

/// Regression features per step and path; `feats[n][path]` conditions
/// targets measurable at `t_{n+1}` onto time-`t_n` information.
#[derive(Debug, Clone)]
pub struct FeatureSet {
    pub feats: Vec<Vec<DVector<f64>>>,
}

/// Polynomial feature inputs from a forward solution: the state at `t_n`,
/// optionally concatenated with the state at `t_n - K`.
pub fn state_features(
    fwd: &ForwardSolution,
    grid: &TimeGrid,
    include_delayed: bool,
) -> FeatureSet {
    let k = grid.k_steps() as i64;
    let mut feats = Vec::with_capacity(grid.n_steps());
    for n in 0..grid.n_steps() as i64 {
        let mut per_path = Vec::with_capacity(fwd.paths.len());
        for p in &fwd.paths {
            let cur = p.at(n);
            if include_delayed {
                let del = p.at(n - k);
                let mut v = DVector::zeros(cur.len() + del.len());
                v.as_mut_slice()[..cur.len()].copy_from_slice(cur);
                v.as_mut_slice()[cur.len()..].copy_from_slice(del);
                per_path.push(v);
            } else {
                per_path.push(DVector::from_column_slice(cur));
            }
        }
        feats.push(per_path);
    }
    FeatureSet { feats }
}

pub(crate) fn step_conditioner(
    mode: &CondExp,
    features: Option<&FeatureSet>,
    n: usize,
    n_paths: usize,
) -> Result<Conditioner> {
    match mode {
        CondExp::Identity => Ok(Conditioner::Identity(n_paths)),
        CondExp::Mean => Ok(Conditioner::Mean(n_paths)),
        CondExp::LeastSquares(_) => {
            let fs = features.ok_or_else(|| {
                Error::validation("least-squares conditioning needs a feature set")
            })?;
            Conditioner::new(mode, &fs.feats[n])
        }
    }
}

fn validate_backward(
    prob: &BackwardProblem,
    space: &ModelSpace,
    data: &BackwardData,
    ens: &NoiseEnsemble,
) -> Result<()> {
    let grid = &space.grid;
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let m = ens.n_paths();
    if data.xi.len() != m || data.eta.len() != m {
        return Err(Error::validation(format!(
            "terminal data for {} paths, ensemble has {m}",
            data.xi.len()
        )));
    }
    for xi in &data.xi {
        if xi.dim() != prob.dim || xi.first_node() > n || xi.last_node() < n + k {
            return Err(Error::validation(format!(
                "terminal p-data must span [{n}, {}] with dim {}",
                n + k,
                prob.dim
            )));
        }
    }
    for eta in &data.eta {
        if eta.dim() != prob.dim * prob.n_modes
            || eta.first_node() > n
            || eta.last_node() < n + k
        {
            return Err(Error::validation(format!(
                "terminal q-data must span [{n}, {}] with dim {}",
                n + k,
                prob.dim * prob.n_modes
            )));
        }
    }
    if !prob.running.is_zero() {
        let zeta = data
            .zeta
            .as_ref()
            .ok_or_else(|| Error::validation("nonzero running terminal needs zeta data"))?;
        if zeta.len() != m {
            return Err(Error::validation("zeta path count mismatch"));
        }
        for z in zeta {
            if z.dim() != prob.dim || z.first_node() > 1 || z.last_node() < n {
                return Err(Error::validation(format!(
                    "zeta must span [1, {n}] with dim {}",
                    prob.dim
                )));
            }
        }
    }
    if ens.n_steps() != grid.n_steps() || ens.n_modes() != space.qw.n_modes() {
        return Err(Error::validation("ensemble does not match grid/noise modes"));
    }
    if prob.n_modes != space.qw.n_modes() {
        return Err(Error::validation("problem mode count != noise mode count"));
    }
    Ok(())
}

pub fn solve_absee(
    prob: &BackwardProblem,
    space: &ModelSpace,
    data: &BackwardData,
    mode: &CondExp,
    features: Option<&FeatureSet>,
    ens: &NoiseEnsemble,
) -> Result<BackwardSolution> {
    validate_backward(prob, space, data, ens)?;
    mode.validate()?;
    let grid = &space.grid;
    let d = prob.dim;
    let nm = prob.n_modes;
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let dt = grid.dt();
    let m_paths = ens.n_paths();
    let factors = ImplicitFactors::build(&prob.m_op, grid, d)?;
    let sqrt_lam = space.qw.sqrt_eigenvalues().to_vec();
    let lam = space.qw.eigenvalues().to_vec();

    let mut p_store: Vec<StatePath> = Vec::with_capacity(m_paths);
    let mut q_store: Vec<StatePath> = Vec::with_capacity(m_paths);
    let mut psi_store: Vec<StatePath> = vec![StatePath::zeros(0, (n - 1).max(0), d); m_paths];
    for pi in 0..m_paths {
        let mut p = StatePath::zeros(0, n + k, d);
        let mut q = StatePath::zeros(0, n + k, d * nm);
        for node in n..=n + k {
            p.set_slice(node, data.xi[pi].at(node));
        }
        for node in (n + 1)..=(n + k) {
            q.set_slice(node, data.eta[pi].at(node));
        }
        p_store.push(p);
        q_store.push(q);
    }

    let mut bracket = vec![DVector::zeros(d); m_paths];
    let mut targets = vec![0.0; m_paths];
    for step in (0..grid.n_steps()).rev() {
        let tn = step as i64;
        let cond = step_conditioner(mode, features, step, m_paths)?;
        let inc = prob.running.increment_ending_at(tn + 1);

        // Propagate through the implicit operator, jump riding along.
        for pi in 0..m_paths {
            let mut target = p_store[pi].vec_at(tn + 1);
            if inc != 0.0 {
                let z = data.zeta.as_ref().expect("validated")[pi].vec_at(tn + 1);
                target += z * inc;
            }
            let psi = factors.solve(step, target);
            psi_store[pi].set_vec(tn, &psi);
        }

        // Martingale coefficient by increment regression, dead modes zero.
        for l in 0..nm {
            if lam[l] == 0.0 {
                continue;
            }
            let scale = 1.0 / (sqrt_lam[l] * dt);
            for r in 0..d {
                for (pi, t) in targets.iter_mut().enumerate() {
                    *t = psi_store[pi].at(tn)[r] * ens.increments(pi, step)[l] * scale;
                }
                let fitted = cond.apply(&targets)?;
                for pi in 0..m_paths {
                    q_store[pi].at_mut(tn)[r + l * d] = fitted[pi];
                }
            }
        }

        // Generator and q-coupling, outside the implicit solve.
        let nmats = (prob.n_mode_mats)(tn);
        if nmats.len() != nm {
            return Err(Error::validation(format!(
                "q-coupling returns {} modes, expected {nm}",
                nmats.len()
            )));
        }
        for pi in 0..m_paths {
            let vpsi = FutureView::new(&psi_store[pi], &p_store[pi], n, tn);
            let vq = FutureView::new(&q_store[pi], &q_store[pi], n, tn);
            let g = (prob.generator)(pi, tn, &vpsi, &vq);
            if g.len() != d {
                return Err(Error::validation(format!(
                    "generator returned length {}, expected {d}",
                    g.len()
                )));
            }
            let mut acc = psi_store[pi].vec_at(tn);
            for l in 0..nm {
                if lam[l] == 0.0 {
                    continue;
                }
                let qcol = DVector::from_column_slice(&q_store[pi].at(tn)[l * d..(l + 1) * d]);
                acc += &nmats[l] * qcol * (lam[l] * dt);
            }
            acc += g * dt;
            bracket[pi] = acc;
        }
        for r in 0..d {
            for (pi, t) in targets.iter_mut().enumerate() {
                *t = bracket[pi][r];
            }
            let fitted = cond.apply(&targets)?;
            for pi in 0..m_paths {
                let v = fitted[pi];
                if !v.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite backward value at path {pi}, node {tn}"
                    )));
                }
                p_store[pi].at_mut(tn)[r] = v;
            }
        }
    }

    Ok(BackwardSolution {
        p: p_store,
        q: q_store,
        psi: psi_store,
    })
}

/// Recursive-cost data: running cost `f(t, x-reads, y, z, v)` and terminal
/// `h` of the measure-averaged terminal state, with exact derivatives.
#[derive(Clone)]
pub struct CostSpec {
    pub control_dim: usize,
    pub n_modes: usize,
    /// Atoms through which `f` reads the state segment.
    pub x_atoms: crate::measure::FiniteMeasure,
    pub f: Arc<dyn Fn(i64, &[DVector<f64>], f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
    pub h: Arc<dyn Fn(&DVector<f64>) -> f64 + Send + Sync>,
    /// Per atom: gradient of `f` w.r.t. that read.
    pub df_dx: Arc<
        dyn Fn(i64, &[DVector<f64>], f64, &DVector<f64>, &DVector<f64>) -> Vec<DVector<f64>>
            + Send
            + Sync,
    >,
    pub df_dy:
        Arc<dyn Fn(i64, &[DVector<f64>], f64, &DVector<f64>, &DVector<f64>) -> f64 + Send + Sync>,
    /// Plain componentwise slopes in z, one per mode.
    pub df_dz: Arc<
        dyn Fn(i64, &[DVector<f64>], f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync,
    >,
    pub df_dv: Arc<
        dyn Fn(i64, &[DVector<f64>], f64, &DVector<f64>, &DVector<f64>) -> DVector<f64>
            + Send
            + Sync,
    >,
    pub dh_dx: Arc<dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync>,
}

impl std::fmt::Debug for CostSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CostSpec")
            .field("control_dim", &self.control_dim)
            .field("n_modes", &self.n_modes)
            .field("x_atoms", &self.x_atoms)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// Scalar value process on `[0, T]`.
    pub y: Vec<StatePath>,
    /// Mode-row process on `[0, T]`; zero at `T`.
    pub z: Vec<StatePath>,
    /// Mean of `y(0)`.
    pub j_value: f64,
}

/// Backward sweep for the cost pair `(y, z)` along a forward solution.
/// The driver's `y` argument is the right-endpoint value (explicit), `z`
/// the just-regressed coefficient at the left endpoint.
#[allow(clippy::too_many_arguments)]
pub fn solve_bsde(
    cost: &CostSpec,
    fwd: &ForwardSolution,
    u: &StatePath,
    mu1: &crate::measure::FiniteMeasure,
    mu2: &crate::measure::FiniteMeasure,
    space: &ModelSpace,
    mode: &CondExp,
    features: Option<&FeatureSet>,
    ens: &NoiseEnsemble,
) -> Result<BsdeSolution> {
    mode.validate()?;
    let grid = &space.grid;
    let n = grid.last_main_node();
    let nm = cost.n_modes;
    let dt = grid.dt();
    let m_paths = ens.n_paths();
    if fwd.paths.len() != m_paths {
        return Err(Error::validation("forward solution / ensemble size mismatch"));
    }
    if nm != space.qw.n_modes() {
        return Err(Error::validation("cost mode count != noise mode count"));
    }
    let lam = space.qw.eigenvalues().to_vec();
    let sqrt_lam = space.qw.sqrt_eigenvalues().to_vec();

    let mut y: Vec<StatePath> = vec![StatePath::zeros(0, n, 1); m_paths];
    let mut z: Vec<StatePath> = vec![StatePath::zeros(0, n, nm); m_paths];
    for pi in 0..m_paths {
        let xt = crate::measure::delay_integral(&fwd.paths[pi], mu2, n)?;
        y[pi].at_mut(n)[0] = (cost.h)(&xt);
    }

    let mut targets = vec![0.0; m_paths];
    for step in (0..grid.n_steps()).rev() {
        let tn = step as i64;
        let cond = step_conditioner(mode, features, step, m_paths)?;
        let ur = crate::measure::delay_integral(u, mu1, tn)?;
        for l in 0..nm {
            if lam[l] == 0.0 {
                continue;
            }
            let scale = 1.0 / (sqrt_lam[l] * dt);
            for (pi, t) in targets.iter_mut().enumerate() {
                *t = y[pi].at(tn + 1)[0] * ens.increments(pi, step)[l] * scale;
            }
            let fitted = cond.apply(&targets)?;
            for pi in 0..m_paths {
                z[pi].at_mut(tn)[l] = fitted[pi];
            }
        }
        for (pi, t) in targets.iter_mut().enumerate() {
            let reads = crate::forward::gather_reads(&fwd.paths[pi], &cost.x_atoms, tn);
            let ynext = y[pi].at(tn + 1)[0];
            let zrow = z[pi].vec_at(tn);
            *t = ynext + dt * (cost.f)(tn, &reads, ynext, &zrow, &ur);
        }
        let fitted = cond.apply(&targets)?;
        for pi in 0..m_paths {
            if !fitted[pi].is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite cost value at path {pi}, node {tn}"
                )));
            }
            y[pi].at_mut(tn)[0] = fitted[pi];
        }
    }
    let j_value = y.iter().map(|p| p.at(0)[0]).sum::<f64>() / m_paths as f64;
    Ok(BsdeSolution { y, z, j_value })
}

/// Forward Euler for the scalar cost-adjoint process:
/// `k(0) = -1`, `dk = df_dy k dt + k <df_dz, dW>`.
///
/// `dzf` holds the plain componentwise slopes of the driver in z. The
/// noise pairing divides by each mode scale, which makes the weight the
/// exact transpose of the cost recursion's z-extraction (z is itself the
/// increment regression divided by the mode scale). Dead modes are
/// skipped.
pub fn solve_cost_adjoint_k(
    dyf: &[StatePath],
    dzf: &[StatePath],
    space: &ModelSpace,
    ens: &NoiseEnsemble,
) -> Result<Vec<StatePath>> {
    let grid = &space.grid;
    let n = grid.last_main_node();
    let dt = grid.dt();
    let m_paths = ens.n_paths();
    if dyf.len() != m_paths || dzf.len() != m_paths {
        return Err(Error::validation("derivative path count mismatch"));
    }
    let sqrt_lam = space.qw.sqrt_eigenvalues();
    let mut out = Vec::with_capacity(m_paths);
    for pi in 0..m_paths {
        let mut k_path = StatePath::zeros(0, n, 1);
        k_path.at_mut(0)[0] = -1.0;
        for step in 0..grid.n_steps() {
            let tn = step as i64;
            let kn = k_path.at(tn)[0];
            let a = dyf[pi].at(tn)[0];
            let dz = dzf[pi].at(tn);
            let dw = ens.increments(pi, step);
            let mut noise = 0.0;
            for (l, sl) in sqrt_lam.iter().enumerate() {
                if *sl > 0.0 {
                    noise += dz[l] * dw[l] / sl;
                }
            }
            let next = kn + dt * a * kn + kn * noise;
            if !next.is_finite() {
                return Err(Error::numerical(format!(
                    "non-finite cost-adjoint at path {pi}, step {step}"
                )));
            }
            k_path.at_mut(tn + 1)[0] = next;
        }
        out.push(k_path);
    }
    Ok(out)
}

/// The translated problem, its data, and the maps back.
pub struct Translation {
    pub problem: BackwardProblem,
    pub data: BackwardData,
    /// Accumulated running terminal per path on `[0, T]`.
    pub alpha: Vec<StatePath>,
    /// Implicit-solved accumulations `beta_n = S_n alpha_n` on `[0, T-dt]`.
    pub beta: Vec<StatePath>,
}

impl Translation {
    /// Maps a solution of the translated problem back to the original
    /// unknowns: `p = p_bar - alpha`, `psi = psi_bar - beta`.
    pub fn back(&self, sol: &BackwardSolution, grid: &TimeGrid) -> BackwardSolution {
        let n = grid.last_main_node();
        let mut out = sol.clone();
        for pi in 0..out.p.len() {
            let alpha = &self.alpha[pi];
            for node in 0..=out.p[pi].last_node() {
                let a = alpha.at(node.min(n)).to_vec();
                let slot = out.p[pi].at_mut(node);
                for i in 0..slot.len() {
                    slot[i] -= a[i];
                }
            }
            let beta = &self.beta[pi];
            for node in 0..=out.psi[pi].last_node() {
                let b = beta.at(node).to_vec();
                let slot = out.psi[pi].at_mut(node);
                for i in 0..slot.len() {
                    slot[i] -= b[i];
                }
            }
        }
        out
    }
}

/// Removes the running terminal by shifting the unknown: with
/// `alpha(t) = sum_{s <= t} zeta(s) dF(s)` the shifted process
/// `p_bar = p + alpha` solves the same equation with terminal
/// `xi + alpha(T)`, no running part, and generator
/// `g(.., view - correction, ..) - M(t_{n+1}) beta_n`, where
/// `beta_n = (I - dt M(t_{n+1}))^{-1} alpha_n`. Using the implicit-solved
/// `beta` in both corrections makes the discrete round trip exact, not
/// merely first-order.
pub fn translate_running_terminal(
    prob: &BackwardProblem,
    space: &ModelSpace,
    data: &BackwardData,
    n_paths: usize,
) -> Result<Translation> {
    let grid = &space.grid;
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let d = prob.dim;
    let factors = ImplicitFactors::build(&prob.m_op, grid, d)?;

    let zeros = StatePath::zeros(1, n, d);
    let mut alpha = Vec::with_capacity(n_paths);
    let mut beta = Vec::with_capacity(n_paths);
    let mut offsets = Vec::with_capacity(n_paths);
    for pi in 0..n_paths {
        let zeta = match &data.zeta {
            Some(z) => &z[pi],
            None => &zeros,
        };
        let mut a = StatePath::zeros(0, n, d);
        for node in 1..=n {
            let mut v = a.vec_at(node - 1);
            let inc = prob.running.increment_ending_at(node);
            if inc != 0.0 {
                v += zeta.vec_at(node) * inc;
            }
            a.set_vec(node, &v);
        }
        let mut b = StatePath::zeros(0, (n - 1).max(0), d);
        for node in 0..n {
            let solved = factors.solve(node as usize, a.vec_at(node));
            b.set_vec(node, &solved);
        }
        // Generator reads subtract beta before T and alpha(T) after.
        let mut ofs = StatePath::zeros(0, n + k, d);
        for node in 0..n {
            ofs.set_slice(node, b.at(node));
        }
        for node in n..=n + k {
            ofs.set_slice(node, a.at(n));
        }
        alpha.push(a);
        beta.push(b);
        offsets.push(ofs);
    }

    let mut xi = Vec::with_capacity(n_paths);
    for pi in 0..n_paths {
        let mut x = data.xi[pi].clone();
        let shift = alpha[pi].vec_at(n);
        for node in x.first_node()..=x.last_node() {
            let slot = x.at_mut(node);
            for i in 0..d {
                slot[i] += shift[i];
            }
        }
        xi.push(x);
    }

    let orig_gen = prob.generator.clone();
    let m_op = prob.m_op.clone();
    let offsets = Arc::new(offsets);
    let betas_shared = Arc::new(beta.clone());
    let gen_offsets = offsets.clone();
    let generator: GeneratorFn = Arc::new(move |pi, tn, vpsi, vq| {
        let shifted = vpsi.with_offset(&gen_offsets[pi]);
        let mut g = orig_gen(pi, tn, &shifted, vq);
        g -= m_op(tn + 1) * betas_shared[pi].vec_at(tn);
        g
    });

    Ok(Translation {
        problem: BackwardProblem {
            dim: prob.dim,
            n_modes: prob.n_modes,
            m_op: prob.m_op.clone(),
            n_mode_mats: prob.n_mode_mats.clone(),
            generator,
            running: RunningTerminal::none(grid.n_steps()),
            lipschitz: prob.lipschitz,
        },
        data: BackwardData {
            xi,
            eta: data.eta.clone(),
            zeta: None,
        },
        alpha,
        beta,
    })
}

/// One-path decomposition for the energy identity:
/// `h_{n+1} = h_n + dt drift_n + (jumps ending at n+1) + mart_n`.
#[derive(Debug, Clone)]
pub struct EnergyParts {
    pub h0: DVector<f64>,
    pub drift: Vec<DVector<f64>>,
    /// `(node, zeta, dF)` with node in `(0, N]`.
    pub jumps: Vec<(i64, DVector<f64>, f64)>,
    pub mart: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Discrete energy identity: `|h(T)|^2` against `|h(0)|^2` plus
/// left-endpoint drift pairing, post-jump jump pairing with the
/// `-|zeta|^2 dF^2` correction, martingale pairing, and the realized
/// bracket. Pure jumps balance exactly; smooth parts leave an `O(dt)`
/// residual from the squared drift increments.
pub fn energy_identity_check(parts: &EnergyParts, grid: &TimeGrid) -> Result<EnergyReport> {
    let n_steps = grid.n_steps();
    if parts.drift.len() != n_steps || parts.mart.len() != n_steps {
        return Err(Error::validation(format!(
            "energy parts need {n_steps} drift/martingale increments"
        )));
    }
    let d = parts.h0.len();
    let dt = grid.dt();
    let mut jump_at: Vec<Vec<(DVector<f64>, f64)>> = vec![Vec::new(); n_steps + 1];
    for (node, z, df) in &parts.jumps {
        if *node < 1 || *node > n_steps as i64 {
            return Err(Error::validation(format!("jump node {node} outside (0, N]")));
        }
        if z.len() != d {
            return Err(Error::validation("jump dimension mismatch"));
        }
        jump_at[*node as usize].push((z.clone(), *df));
    }

    let mut h = parts.h0.clone();
    let mut rhs = h.norm_squared();
    for n in 0..n_steps {
        let hn = h.clone();
        // Left-endpoint drift pairing and martingale terms.
        rhs += 2.0 * dt * parts.drift[n].dot(&hn);
        rhs += 2.0 * hn.dot(&parts.mart[n]) + parts.mart[n].norm_squared();
        h += &parts.drift[n] * dt;
        h += &parts.mart[n];
        for (z, df) in &jump_at[n + 1] {
            h += z * *df;
            // Post-jump pairing, exact by the square expansion.
            rhs += 2.0 * h.dot(z) * df - z.norm_squared() * df * df;
        }
    }
    let lhs = h.norm_squared();
    Ok(EnergyReport {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLipschitzReport {
    pub declared: f64,
    pub max_observed: f64,
}

impl GeneratorLipschitzReport {
    pub fn passes(&self) -> bool {
        self.max_observed <= self.declared * (1.0 + 1e-9) + 1e-12
    }
}

/// Samples random future-path pairs and measures the generator's squared
/// increment against the declared constant.
pub fn certify_generator(
    prob: &BackwardProblem,
    grid: &TimeGrid,
    n_samples: usize,
    seed: u64,
) -> Result<GeneratorLipschitzReport> {
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let d = prob.dim;
    let dm = prob.dim * prob.n_modes;
    let mut max_observed = 0.0f64;
    for s in 0..n_samples {
        let su = s as u64;
        let mk = |tag: u64, dim: usize| {
            StatePath::from_fn(0, n + k, dim, |node, c| {
                crate::rng::keyed_uniform_sym(seed, tag, su, node as u64 * 31 + c as u64, 0)
            })
        };
        let pa = mk(1, d);
        let pb = mk(2, d);
        let qa = mk(3, dm);
        let qb = mk(4, dm);
        let tn = (crate::rng::keyed_u64(seed, 5, su, 0, 0) % grid.n_steps() as u64) as i64;
        let va = FutureView::new(&pa, &pa, n + k + 1, tn);
        let vb = FutureView::new(&pb, &pb, n + k + 1, tn);
        let wa = FutureView::new(&qa, &qa, n + k + 1, tn);
        let wb = FutureView::new(&qb, &qb, n + k + 1, tn);
        let ga = (prob.generator)(0, tn, &va, &wa);
        let gb = (prob.generator)(0, tn, &vb, &wb);
        let mut den = 0.0f64;
        for node in tn..=n + k {
            let dp = pa.vec_at(node) - pb.vec_at(node);
            let dq = qa.vec_at(node) - qb.vec_at(node);
            den = den.max(dp.norm_squared() + dq.norm_squared());
        }
        if den < 1e-14 {
            continue;
        }
        max_observed = max_observed.max((ga - gb).norm_squared() / den);
    }
    Ok(GeneratorLipschitzReport {
        declared: prob.lipschitz,
        max_observed,
    })
}
