//! Control optimization: variational sensitivities, the Hamiltonian, the
//! adjoint assembly, the maximum-principle gradient, projected gradient
//! descent, and an empirical sufficiency certificate.
//!
//! The gradient of the objective with respect to the control value at a
//! node aggregates the Hamiltonian's control derivative over every later
//! time whose delayed read pulls that node:
//!
//! ```text
//! G(t_n) = CondExp_n[ sum_j w_j dvH(t_{n - s_j}) 1[n - s_j <= N-1] ]
//! ```
//!
//! where `dvH` pairs the control Jacobians of drift and diffusion with the
//! adjoint pair and the cost's control slope with the cost-adjoint weight.
//! The drift slot is paired with the implicit-solved `psi`, not the stored
//! adjoint value; together with the exact-transpose backward scheme this
//! makes `G` the exact gradient of the discrete objective whenever the
//! conditioning is the identity or the problem is deterministic.

use std::sync::Arc;

use nalgebra::DVector;

use crate::backward::{
    solve_absee, solve_bsde, solve_cost_adjoint_k, state_features, step_conditioner, BackwardData,
    BackwardProblem, BackwardSolution, BsdeSolution, CostSpec, FeatureSet, GeneratorFn,
    RunningTerminal,
};
use crate::error::{Error, Result};
use crate::forward::{control_reads, gather_reads, solve_forward, ForwardModel, ForwardSolution, ImplicitFactors};
use crate::measure::{delay_integral, FiniteMeasure};
use crate::noise::NoiseEnsemble;
use crate::paths::StatePath;
use crate::regression::CondExp;

/// Admissible control set with an exact projection.
#[derive(Debug, Clone)]
pub enum ControlConstraint {
    All,
    /// Componentwise interval constraints; projection is the clamp.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Euclidean ball; projection is the radial pull-back.
    Ball { center: Vec<f64>, radius: f64 },
}

impl ControlConstraint {
    pub fn validate(&self, control_dim: usize) -> Result<()> {
        match self {
            ControlConstraint::All => Ok(()),
            ControlConstraint::Box { lower, upper } => {
                if lower.len() != control_dim || upper.len() != control_dim {
                    return Err(Error::validation(format!(
                        "box bounds must have {control_dim} components"
                    )));
                }
                for (l, u) in lower.iter().zip(upper) {
                    if !(l <= u) {
                        return Err(Error::validation(format!(
                            "box bound pair ({l}, {u}) is empty"
                        )));
                    }
                }
                Ok(())
            }
            ControlConstraint::Ball { center, radius } => {
                if center.len() != control_dim {
                    return Err(Error::validation(format!(
                        "ball center must have {control_dim} components"
                    )));
                }
                if !(*radius >= 0.0) {
                    return Err(Error::validation("ball radius must be >= 0"));
                }
                Ok(())
            }
        }
    }

    pub fn project_vec(&self, v: &mut [f64]) {
        match self {
            ControlConstraint::All => {}
            ControlConstraint::Box { lower, upper } => {
                for i in 0..v.len() {
                    v[i] = v[i].clamp(lower[i], upper[i]);
                }
            }
            ControlConstraint::Ball { center, radius } => {
                let mut dist_sq = 0.0;
                for i in 0..v.len() {
                    let d = v[i] - center[i];
                    dist_sq += d * d;
                }
                let dist = dist_sq.sqrt();
                if dist > *radius {
                    let scale = radius / dist;
                    for i in 0..v.len() {
                        v[i] = center[i] + (v[i] - center[i]) * scale;
                    }
                }
            }
        }
    }

    /// Projects the optimizable nodes `0..N-1`, leaving the history and
    /// the dead final node untouched.
    pub fn project_control(&self, u: &StatePath, n_steps: usize) -> StatePath {
        let mut out = u.clone();
        for n in 0..n_steps as i64 {
            self.project_vec(out.at_mut(n));
        }
        out
    }
}

/// The full optimization instance: dynamics, cost, delay structure for
/// cost reads, initial data, and the admissible set. The control path
/// carries its own history on `[-K, 0)`; nodes `0..N-1` are optimized and
/// node `N` is never read by the left-endpoint scheme.
pub struct ControlProblem {
    pub model: ForwardModel,
    pub cost: CostSpec,
    /// Measure aggregating the terminal state inside `h`.
    pub mu2: FiniteMeasure,
    /// State history on `[-K, 0]`.
    pub gamma: StatePath,
    pub constraint: ControlConstraint,
}

impl ControlProblem {
    pub fn validate(&self) -> Result<()> {
        self.constraint.validate(self.cost.control_dim)?;
        if self.cost.n_modes != self.model.space.qw.n_modes() {
            return Err(Error::validation("cost / noise mode count mismatch"));
        }
        Ok(())
    }

    fn grid(&self) -> &crate::grid::TimeGrid {
        &self.model.space.grid
    }
}

/// Everything solved at one control on one ensemble.
pub struct Candidate {
    pub u: StatePath,
    pub fwd: ForwardSolution,
    pub bsde: BsdeSolution,
    /// Cost-adjoint weight per path on `[0, T]`.
    pub k: Vec<StatePath>,
    /// Regression features along the forward paths, present for
    /// least-squares conditioning.
    pub features: Option<FeatureSet>,
}

impl Candidate {
    pub fn j_value(&self) -> f64 {
        self.bsde.j_value
    }
}

fn build_features(
    mode: &CondExp,
    fwd: &ForwardSolution,
    grid: &crate::grid::TimeGrid,
) -> Option<FeatureSet> {
    match mode {
        CondExp::LeastSquares(_) => Some(state_features(fwd, grid, mode.wants_delayed_feature())),
        _ => None,
    }
}

/// Forward solve, cost pair, and cost-adjoint weight at the control `u`.
pub fn solve_candidate(
    prob: &ControlProblem,
    u: &StatePath,
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<Candidate> {
    prob.validate()?;
    let grid = prob.grid();
    let fwd = solve_forward(&prob.model, u, &prob.gamma, ens)?;
    let features = build_features(mode, &fwd, grid);
    let bsde = solve_bsde(
        &prob.cost,
        &fwd,
        u,
        &prob.model.mu1,
        &prob.mu2,
        &prob.model.space,
        mode,
        features.as_ref(),
        ens,
    )?;
    let (dyf, dzf) = cost_slope_paths(prob, u, &fwd, &bsde)?;
    let k = solve_cost_adjoint_k(&dyf, &dzf, &prob.model.space, ens)?;
    Ok(Candidate {
        u: u.clone(),
        fwd,
        bsde,
        k,
        features,
    })
}

/// The y- and z-slopes of the running cost along a candidate, evaluated
/// with the same staggering as the cost recursion (y at the right
/// endpoint, z at the left).
fn cost_slope_paths(
    prob: &ControlProblem,
    u: &StatePath,
    fwd: &ForwardSolution,
    bsde: &BsdeSolution,
) -> Result<(Vec<StatePath>, Vec<StatePath>)> {
    let grid = prob.grid();
    let n = grid.last_main_node();
    let nm = prob.cost.n_modes;
    let m_paths = fwd.paths.len();
    let ur: Vec<DVector<f64>> = (0..grid.n_steps() as i64)
        .map(|step| delay_integral(u, &prob.model.mu1, step))
        .collect::<Result<_>>()?;
    let mut dyf = vec![StatePath::zeros(0, n, 1); m_paths];
    let mut dzf = vec![StatePath::zeros(0, n, nm); m_paths];
    for pi in 0..m_paths {
        for step in 0..grid.n_steps() {
            let tn = step as i64;
            let reads = gather_reads(&fwd.paths[pi], &prob.cost.x_atoms, tn);
            let ynext = bsde.y[pi].at(tn + 1)[0];
            let zrow = bsde.z[pi].vec_at(tn);
            dyf[pi].at_mut(tn)[0] = (prob.cost.df_dy)(tn, &reads, ynext, &zrow, &ur[step]);
            let dz = (prob.cost.df_dz)(tn, &reads, ynext, &zrow, &ur[step]);
            dzf[pi].set_vec(tn, &dz);
        }
    }
    Ok((dyf, dzf))
}

/// Linearized state and cost sensitivities along a direction.
pub struct Variational {
    /// Linearized state per path on `[-K, T]`, zero history.
    pub xhat: Vec<StatePath>,
    pub yhat: Vec<StatePath>,
    pub zhat: Vec<StatePath>,
    /// Mean of `yhat(0)`: the directional derivative of the objective.
    pub y0: f64,
}

/// Solves the linearized forward system and its linear cost recursion
/// along `direction` (a control perturbation with zero history).
pub fn solve_variational(
    prob: &ControlProblem,
    cand: &Candidate,
    direction: &StatePath,
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<Variational> {
    let grid = prob.grid();
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let d = prob.model.coeffs.dim;
    let nm = prob.model.coeffs.n_modes;
    let dt = grid.dt();
    let m_paths = cand.fwd.paths.len();
    let coeffs = &prob.model.coeffs;
    let atoms = &coeffs.state_atoms;
    let factors = ImplicitFactors::build(&prob.model.ops.a, grid, d)?;
    let sqrt_lam = prob.model.space.qw.sqrt_eigenvalues().to_vec();
    let ur = control_reads(&prob.model, &cand.u)?;
    let dr: Vec<DVector<f64>> = (0..grid.n_steps() as i64)
        .map(|step| delay_integral(direction, &prob.model.mu1, step))
        .collect::<Result<_>>()?;

    let mut xhat = vec![StatePath::zeros(-k, n, d); m_paths];
    for pi in 0..m_paths {
        for step in 0..grid.n_steps() {
            let tn = step as i64;
            let base_reads = gather_reads(&cand.fwd.paths[pi], atoms, tn);
            let jac_b = (coeffs.db_dx)(tn, &base_reads, &ur[step]);
            let bv = (coeffs.db_dv)(tn, &base_reads, &ur[step]);
            let jac_s = (coeffs.dsigma_dx)(tn, &base_reads, &ur[step]);
            let sv = (coeffs.dsigma_dv)(tn, &base_reads, &ur[step]);
            let hat_reads = gather_reads(&xhat[pi], atoms, tn);

            let mut rhs = xhat[pi].vec_at(tn);
            let mut drift = &bv * &dr[step];
            for (j, hr) in hat_reads.iter().enumerate() {
                drift += &jac_b[j] * hr;
            }
            rhs += drift * dt;
            let bmats = (prob.model.ops.b)(tn);
            let dw = ens.increments(pi, step);
            for l in 0..nm {
                if sqrt_lam[l] == 0.0 {
                    continue;
                }
                let mut noise = &bmats[l] * xhat[pi].vec_at(tn) + &sv[l] * &dr[step];
                for (j, hr) in hat_reads.iter().enumerate() {
                    noise += &jac_s[j][l] * hr;
                }
                rhs += noise * (sqrt_lam[l] * dw[l]);
            }
            let next = factors.solve(step, rhs);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::numerical(format!(
                    "non-finite linearized state at path {pi}, step {step}"
                )));
            }
            xhat[pi].set_vec(tn + 1, &next);
        }
    }

    // Linear cost recursion with the same staggering as the cost solver.
    let lam = prob.model.space.qw.eigenvalues().to_vec();
    let cost = &prob.cost;
    let mut yhat = vec![StatePath::zeros(0, n, 1); m_paths];
    let mut zhat = vec![StatePath::zeros(0, n, nm); m_paths];
    for pi in 0..m_paths {
        let xbar_t = delay_integral(&cand.fwd.paths[pi], &prob.mu2, n)?;
        let xhat_t = delay_integral(&xhat[pi], &prob.mu2, n)?;
        yhat[pi].at_mut(n)[0] = (cost.dh_dx)(&xbar_t).dot(&xhat_t);
    }
    let mut targets = vec![0.0; m_paths];
    for step in (0..grid.n_steps()).rev() {
        let tn = step as i64;
        let cond = step_conditioner(mode, cand.features.as_ref(), step, m_paths)?;
        for l in 0..nm {
            if lam[l] == 0.0 {
                continue;
            }
            let scale = 1.0 / (sqrt_lam[l] * dt);
            for (pi, t) in targets.iter_mut().enumerate() {
                *t = yhat[pi].at(tn + 1)[0] * ens.increments(pi, step)[l] * scale;
            }
            let fitted = cond.apply(&targets)?;
            for pi in 0..m_paths {
                zhat[pi].at_mut(tn)[l] = fitted[pi];
            }
        }
        for (pi, t) in targets.iter_mut().enumerate() {
            let base_reads = gather_reads(&cand.fwd.paths[pi], &cost.x_atoms, tn);
            let ynext = cand.bsde.y[pi].at(tn + 1)[0];
            let zrow = cand.bsde.z[pi].vec_at(tn);
            let uread = &ur[step];
            let fx = (cost.df_dx)(tn, &base_reads, ynext, &zrow, uread);
            let fy = (cost.df_dy)(tn, &base_reads, ynext, &zrow, uread);
            let fz = (cost.df_dz)(tn, &base_reads, ynext, &zrow, uread);
            let fv = (cost.df_dv)(tn, &base_reads, ynext, &zrow, uread);
            let hat_reads = gather_reads(&xhat[pi], &cost.x_atoms, tn);
            let mut df = fy * yhat[pi].at(tn + 1)[0] + fz.dot(&zhat[pi].vec_at(tn)) + fv.dot(&dr[step]);
            for (j, hr) in hat_reads.iter().enumerate() {
                df += fx[j].dot(hr);
            }
            *t = yhat[pi].at(tn + 1)[0] + dt * df;
        }
        let fitted = cond.apply(&targets)?;
        for pi in 0..m_paths {
            yhat[pi].at_mut(tn)[0] = fitted[pi];
        }
    }
    let y0 = yhat.iter().map(|p| p.at(0)[0]).sum::<f64>() / m_paths as f64;
    Ok(Variational {
        xhat,
        yhat,
        zhat,
        y0,
    })
}

/// Hamiltonian value at one node of one path: drift paired with `p` in
/// the state space, diffusion paired with `q` under the noise weights,
/// minus cost times the cost-adjoint weight. `x_now` feeds the linear
/// operator parts; `x_reads` and `cost_reads` are the segment reads of
/// the coefficient atoms and the cost atoms respectively.
#[allow(clippy::too_many_arguments)]
pub fn hamiltonian(
    model: &ForwardModel,
    cost: &CostSpec,
    t: i64,
    x_now: &DVector<f64>,
    x_reads: &[DVector<f64>],
    cost_reads: &[DVector<f64>],
    y: f64,
    z: &DVector<f64>,
    v: &DVector<f64>,
    p: &DVector<f64>,
    q_flat: &[f64],
    k_weight: f64,
) -> f64 {
    let d = model.coeffs.dim;
    let lam = model.space.qw.eigenvalues();
    let drift = (model.ops.a)(t) * x_now + (model.coeffs.b)(t, x_reads, v);
    let mut h = drift.dot(p);
    let sig = (model.coeffs.sigma)(t, x_reads, v);
    let bmats = (model.ops.b)(t);
    for l in 0..model.coeffs.n_modes {
        if lam[l] == 0.0 {
            continue;
        }
        let full = &bmats[l] * x_now + sig.column(l);
        let qcol = DVector::from_column_slice(&q_flat[l * d..(l + 1) * d]);
        h += lam[l] * full.dot(&qcol);
    }
    h - (cost.f)(t, cost_reads, y, z, v) * k_weight
}

/// Control slope of the Hamiltonian at one node of one path. The `p_slot`
/// argument receives the implicit-solved adjoint value for discrete
/// exactness; passing the stored adjoint instead changes the result by
/// one step-size order.
#[allow(clippy::too_many_arguments)]
pub fn dv_hamiltonian(
    model: &ForwardModel,
    cost: &CostSpec,
    t: i64,
    x_reads: &[DVector<f64>],
    cost_reads: &[DVector<f64>],
    y: f64,
    z: &DVector<f64>,
    v: &DVector<f64>,
    p_slot: &DVector<f64>,
    q_flat: &[f64],
    k_weight: f64,
) -> DVector<f64> {
    let d = model.coeffs.dim;
    let lam = model.space.qw.eigenvalues();
    let bv = (model.coeffs.db_dv)(t, x_reads, v);
    let mut g = bv.transpose() * p_slot;
    let sv = (model.coeffs.dsigma_dv)(t, x_reads, v);
    for l in 0..model.coeffs.n_modes {
        if lam[l] == 0.0 {
            continue;
        }
        let qcol = DVector::from_column_slice(&q_flat[l * d..(l + 1) * d]);
        g += sv[l].transpose() * qcol * lam[l];
    }
    g -= (cost.df_dv)(t, cost_reads, y, z, v) * k_weight;
    g
}

/// Backward problem and data realizing the adjoint of the linearized
/// dynamics at a candidate: transposed operators, a generator scattering
/// the state Jacobians against the future adjoint values, and a terminal
/// built from the cost's terminal slope weighted by the cost adjoint.
/// The terminal-measure atom at offset zero lands directly in the
/// terminal value; interior atoms become running-terminal jumps.
pub fn assemble_adjoint(
    prob: &ControlProblem,
    cand: &Candidate,
) -> Result<(BackwardProblem, BackwardData)> {
    let grid = prob.grid();
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let d = prob.model.coeffs.dim;
    let nm = prob.model.coeffs.n_modes;
    let m_paths = cand.fwd.paths.len();
    let last_step = n - 1;

    let a_op = prob.model.ops.a.clone();
    let m_op: crate::operators::OpMat = Arc::new(move |t| a_op(t).transpose());
    let b_op = prob.model.ops.b.clone();
    let n_mode_mats: crate::operators::ModeMats =
        Arc::new(move |t| b_op(t).iter().map(|m| m.transpose()).collect());

    let fwd_paths = Arc::new(cand.fwd.paths.clone());
    let u_path = Arc::new(cand.u.clone());
    let k_paths = Arc::new(cand.k.clone());
    let y_paths = Arc::new(cand.bsde.y.clone());
    let z_paths = Arc::new(cand.bsde.z.clone());
    let mu1 = prob.model.mu1.clone();
    let state_atoms = prob.model.coeffs.state_atoms.clone();
    let cost_atoms = prob.cost.x_atoms.clone();
    let db_dx = prob.model.coeffs.db_dx.clone();
    let dsigma_dx = prob.model.coeffs.dsigma_dx.clone();
    let df_dx = prob.cost.df_dx.clone();
    let lam = prob.model.space.qw.eigenvalues().to_vec();
    let dd = d;

    let generator: GeneratorFn = Arc::new(move |pi, tn, vpsi, vq| {
        let mut g = DVector::zeros(dd);
        let u_read =
            |m: i64| delay_integral(&u_path, &mu1, m).expect("control reads validated upstream");
        for (j, off) in state_atoms.offsets().iter().enumerate() {
            let m = tn - off;
            if m > last_step {
                continue;
            }
            let reads = gather_reads(&fwd_paths[pi], &state_atoms, m);
            let um = u_read(m);
            let psi_m = vpsi.at(m);
            g += (db_dx)(m, &reads, &um)[j].transpose() * &psi_m;
            let js = (dsigma_dx)(m, &reads, &um);
            let q_m = vq.at(m);
            for (l, lam_l) in lam.iter().enumerate() {
                if *lam_l == 0.0 {
                    continue;
                }
                let qcol = DVector::from_column_slice(&q_m.as_slice()[l * dd..(l + 1) * dd]);
                g += js[j][l].transpose() * qcol * *lam_l;
            }
        }
        for (j, off) in cost_atoms.offsets().iter().enumerate() {
            let m = tn - off;
            if m > last_step {
                continue;
            }
            let reads = gather_reads(&fwd_paths[pi], &cost_atoms, m);
            let um = u_read(m);
            let ynext = y_paths[pi].at(m + 1)[0];
            let zrow = z_paths[pi].vec_at(m);
            let fx = (df_dx)(m, &reads, ynext, &zrow, &um);
            g += &fx[j] * (-k_paths[pi].at(m)[0]);
        }
        g
    });

    // Terminal slope weighted by the cost adjoint; the zero-offset atom
    // of the terminal measure collapses into the terminal value itself.
    let mut running_jumps = Vec::new();
    let mut zero_weight = 0.0;
    for (off, w) in prob.mu2.iter() {
        if off == 0 {
            zero_weight += w;
        } else if w != 0.0 {
            running_jumps.push((n + off, w));
        }
    }
    let running = RunningTerminal::from_jumps(grid, &running_jumps)?;
    let need_zeta = !running.is_zero();

    let mut xi = Vec::with_capacity(m_paths);
    let mut zeta = Vec::with_capacity(m_paths);
    for pi in 0..m_paths {
        let xbar_t = delay_integral(&cand.fwd.paths[pi], &prob.mu2, n)?;
        let slope = (prob.cost.dh_dx)(&xbar_t) * (-cand.k[pi].at(n)[0]);
        let mut x = StatePath::zeros(n, n + k, d);
        x.set_vec(n, &(&slope * zero_weight));
        xi.push(x);
        if need_zeta {
            let mut zp = StatePath::zeros(1, n, d);
            for node in 1..=n {
                zp.set_vec(node, &slope);
            }
            zeta.push(zp);
        }
    }

    Ok((
        BackwardProblem {
            dim: d,
            n_modes: nm,
            m_op,
            n_mode_mats,
            generator,
            running,
            lipschitz: prob.model.coeffs.lipschitz,
        },
        BackwardData {
            xi,
            eta: vec![StatePath::zeros(n, n + k, d * nm); m_paths],
            zeta: if need_zeta { Some(zeta) } else { None },
        },
    ))
}

/// Assembles and solves the adjoint pair at a candidate.
pub fn solve_adjoint(
    prob: &ControlProblem,
    cand: &Candidate,
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<BackwardSolution> {
    let (bp, bd) = assemble_adjoint(prob, cand)?;
    solve_absee(
        &bp,
        &prob.model.space,
        &bd,
        mode,
        cand.features.as_ref(),
        ens,
    )
}

/// The maximum-principle gradient and its stationarity residual.
pub struct GradientReport {
    /// Conditioned gradient per path on `[0, T]`; the final node is dead
    /// and stays zero.
    pub g: Vec<StatePath>,
    /// Cross-path mean, the open-loop descent direction.
    pub mean: StatePath,
    /// Stationarity of the mean gradient, which is the gradient of the
    /// sampled objective over deterministic controls. Unconstrained:
    /// time-integrated norm of the mean path. Constrained: norm of the
    /// projected-step displacement under the mean step. Per-path spread
    /// stays visible through `g` but does not enter the residual, since
    /// no deterministic control can cancel the martingale part.
    pub residual: f64,
}

pub fn smp_gradient(
    prob: &ControlProblem,
    cand: &Candidate,
    adj: &BackwardSolution,
    mode: &CondExp,
) -> Result<GradientReport> {
    let grid = prob.grid();
    let n = grid.last_main_node();
    let dt = grid.dt();
    let m_paths = cand.fwd.paths.len();
    let mu = prob.cost.control_dim;
    let last_step = n - 1;
    let ur = control_reads(&prob.model, &cand.u)?;

    // Pathwise aggregation over the delayed reads, then conditioning.
    let mut raw = vec![StatePath::zeros(0, n, mu); m_paths];
    for pi in 0..m_paths {
        for node in 0..=last_step {
            let mut acc = DVector::zeros(mu);
            for (off, w) in prob.model.mu1.iter() {
                let m = node - off;
                if m > last_step {
                    continue;
                }
                let cost_reads = gather_reads(&cand.fwd.paths[pi], &prob.cost.x_atoms, m);
                let coef_reads =
                    gather_reads(&cand.fwd.paths[pi], &prob.model.coeffs.state_atoms, m);
                let ynext = cand.bsde.y[pi].at(m + 1)[0];
                let zrow = cand.bsde.z[pi].vec_at(m);
                let dvh = dv_hamiltonian(
                    &prob.model,
                    &prob.cost,
                    m,
                    &coef_reads,
                    &cost_reads,
                    ynext,
                    &zrow,
                    &ur[m as usize],
                    &adj.psi[pi].vec_at(m),
                    adj.q[pi].at(m),
                    cand.k[pi].at(m)[0],
                );
                acc += dvh * w;
            }
            raw[pi].set_vec(node, &acc);
        }
    }

    let mut g = vec![StatePath::zeros(0, n, mu); m_paths];
    let mut targets = vec![0.0; m_paths];
    for node in 0..=last_step {
        let cond = step_conditioner(mode, cand.features.as_ref(), node as usize, m_paths)?;
        for c in 0..mu {
            for (pi, t) in targets.iter_mut().enumerate() {
                *t = raw[pi].at(node)[c];
            }
            let fitted = cond.apply(&targets)?;
            for pi in 0..m_paths {
                g[pi].at_mut(node)[c] = fitted[pi];
            }
        }
    }

    let mut mean = StatePath::zeros(0, n, mu);
    for node in 0..=last_step {
        let mut acc = DVector::zeros(mu);
        for gp in &g {
            acc += gp.vec_at(node);
        }
        mean.set_vec(node, &(acc / m_paths as f64));
    }

    let residual = stationarity_residual(prob, &cand.u, &mean, dt, last_step);
    Ok(GradientReport { g, mean, residual })
}

fn stationarity_residual(
    prob: &ControlProblem,
    u: &StatePath,
    mean: &StatePath,
    dt: f64,
    last_step: i64,
) -> f64 {
    let mut acc = 0.0;
    for node in 0..=last_step {
        match &prob.constraint {
            ControlConstraint::All => {
                acc += mean.vec_at(node).norm_squared() * dt;
            }
            c => {
                let mut stepped: Vec<f64> = u
                    .at(node)
                    .iter()
                    .zip(mean.at(node))
                    .map(|(uv, gv)| uv - gv)
                    .collect();
                c.project_vec(&mut stepped);
                let diff: f64 = u
                    .at(node)
                    .iter()
                    .zip(&stepped)
                    .map(|(uv, sv)| (uv - sv) * (uv - sv))
                    .sum();
                acc += diff * dt;
            }
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone, Copy)]
pub struct FdRow {
    pub rho: f64,
    pub fd_slope: f64,
}

/// Three-way derivative comparison along one direction: finite
/// differences of the objective, the variational value, and the gradient
/// pairing.
#[derive(Debug)]
pub struct FdReport {
    pub rows: Vec<FdRow>,
    /// Variational directional derivative, `yhat(0)` averaged.
    pub variational: f64,
    /// Time-integrated gradient pairing with the direction.
    pub pairing: f64,
    /// Two-point extrapolation of the finite-difference slopes to zero
    /// step, exact for objectives quadratic in the control.
    pub extrapolated: f64,
}

pub fn fd_gradient_check(
    prob: &ControlProblem,
    u: &StatePath,
    direction: &StatePath,
    rhos: &[f64],
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<FdReport> {
    if rhos.is_empty() {
        return Err(Error::validation("need at least one step size"));
    }
    let grid = prob.grid();
    let cand = solve_candidate(prob, u, mode, ens)?;
    let j0 = cand.j_value();
    let variational = solve_variational(prob, &cand, direction, mode, ens)?.y0;
    let adj = solve_adjoint(prob, &cand, mode, ens)?;
    let grad = smp_gradient(prob, &cand, &adj, mode)?;

    let dt = grid.dt();
    let mut pairing = 0.0;
    for node in 0..grid.last_main_node() {
        pairing += grad.mean.vec_at(node).dot(&direction.vec_at(node)) * dt;
    }

    let mut rows = Vec::with_capacity(rhos.len());
    for &rho in rhos {
        if !(rho > 0.0) {
            return Err(Error::validation("step sizes must be positive"));
        }
        let mut u_rho = u.clone();
        for node in 0..grid.last_main_node() {
            let dvec = direction.vec_at(node) * rho;
            let slot = u_rho.at_mut(node);
            for i in 0..slot.len() {
                slot[i] += dvec[i];
            }
        }
        let j_rho = solve_candidate(prob, &u_rho, mode, ens)?.j_value();
        rows.push(FdRow {
            rho,
            fd_slope: (j_rho - j0) / rho,
        });
    }

    let mut sorted = rows.clone();
    sorted.sort_by(|a, b| a.rho.total_cmp(&b.rho));
    let extrapolated = if sorted.len() >= 2 {
        let (r1, f1) = (sorted[0].rho, sorted[0].fd_slope);
        let (r2, f2) = (sorted[1].rho, sorted[1].fd_slope);
        (r2 * f1 - r1 * f2) / (r2 - r1)
    } else {
        sorted[0].fd_slope
    };

    Ok(FdReport {
        rows,
        variational,
        pairing,
        extrapolated,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct DescentStep {
    pub iter: u32,
    pub j: f64,
    pub residual: f64,
    /// Accepted step length; zero on the final report-only row.
    pub step: f64,
}

pub struct DescentTrace {
    pub steps: Vec<DescentStep>,
    pub u: StatePath,
    pub j: f64,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct DescentOpts {
    pub step0: f64,
    pub armijo: f64,
    /// Halvings allowed per line search.
    pub budget: u32,
    pub max_iter: u32,
    /// Stop when the residual falls under this fraction of the initial
    /// residual,
    pub tol_rel: f64,
    /// or under this absolute floor.
    pub tol_abs: f64,
}

impl Default for DescentOpts {
    fn default() -> Self {
        DescentOpts {
            step0: 1.0,
            armijo: 1e-4,
            budget: 30,
            max_iter: 40,
            tol_rel: 1e-3,
            tol_abs: 1e-10,
        }
    }
}

/// Projected gradient descent on the open-loop control with backtracking
/// line search under common random numbers.
pub fn projected_gradient_descent(
    prob: &ControlProblem,
    u0: &StatePath,
    opts: &DescentOpts,
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<DescentTrace> {
    let grid = prob.grid();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let mut u = prob.constraint.project_control(u0, n_steps);
    let mut steps = Vec::new();
    let mut res0 = f64::NAN;
    let mut last_step = 0.0;

    for iter in 0..=opts.max_iter {
        let cand = solve_candidate(prob, &u, mode, ens)?;
        let adj = solve_adjoint(prob, &cand, mode, ens)?;
        let grad = smp_gradient(prob, &cand, &adj, mode)?;
        let j = cand.j_value();
        if iter == 0 {
            res0 = grad.residual;
        }
        steps.push(DescentStep {
            iter,
            j,
            residual: grad.residual,
            step: last_step,
        });
        let done = grad.residual <= opts.tol_rel * res0 || grad.residual <= opts.tol_abs;
        if done || iter == opts.max_iter {
            return Ok(DescentTrace {
                steps,
                u,
                j,
                residual: grad.residual,
                converged: done,
            });
        }

        let mut eta = opts.step0;
        let mut accepted = false;
        for _ in 0..=opts.budget {
            let mut u_try = u.clone();
            for node in 0..n_steps as i64 {
                let gvec = grad.mean.vec_at(node);
                let slot = u_try.at_mut(node);
                for i in 0..slot.len() {
                    slot[i] -= eta * gvec[i];
                }
            }
            let u_try = prob.constraint.project_control(&u_try, n_steps);
            // Predicted decrease from the projected displacement; equals
            // eta * |G|^2 time-integrated in the unconstrained case.
            let mut pred = 0.0;
            for node in 0..n_steps as i64 {
                let disp = u.vec_at(node) - u_try.vec_at(node);
                pred += grad.mean.vec_at(node).dot(&disp) * dt;
            }
            let j_try = solve_candidate(prob, &u_try, mode, ens)?.j_value();
            if j_try <= j - opts.armijo * pred.max(0.0) && j_try < j {
                u = u_try;
                last_step = eta;
                accepted = true;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            // The search direction no longer yields decrease; with biased
            // conditioning this is the attainable floor, so stop honestly
            // at the current iterate instead of erroring out.
            return Ok(DescentTrace {
                steps,
                u,
                j,
                residual: grad.residual,
                converged: false,
            });
        }
    }
    unreachable!("loop returns at max_iter");
}

/// Empirical optimality certificate at a stationary control.
#[derive(Debug, Clone)]
pub struct Certificate {
    pub terminal_cost_convex: bool,
    pub hamiltonian_convex: bool,
    pub cost_adjoint_nonpositive: bool,
    /// No sampled admissible perturbation beat the candidate by more than
    /// three standard errors of the paired difference.
    pub perturbations_dominated: bool,
    /// Most negative paired margin `J(pert) - J(base)` observed, in
    /// standard-error units (positive when dominated).
    pub worst_margin_se: f64,
    pub j_base: f64,
}

impl Certificate {
    pub fn passes(&self) -> bool {
        self.terminal_cost_convex
            && self.hamiltonian_convex
            && self.cost_adjoint_nonpositive
            && self.perturbations_dominated
    }
}

/// Midpoint-inequality samples for the terminal cost and the Hamiltonian,
/// a sign check on the cost adjoint, and a paired Monte Carlo comparison
/// against random admissible perturbations. The comparison runs the cost
/// recursion pathwise so paired differences carry an honest standard
/// error.
pub fn sufficiency_certificate(
    prob: &ControlProblem,
    cand: &Candidate,
    adj: &BackwardSolution,
    n_perturb: usize,
    seed: u64,
    ens: &NoiseEnsemble,
) -> Result<Certificate> {
    let grid = prob.grid();
    let n = grid.last_main_node();
    let d = prob.model.coeffs.dim;
    let nm = prob.model.coeffs.n_modes;
    let mu = prob.cost.control_dim;
    let m_paths = cand.fwd.paths.len();
    let tol = 1e-9;

    // (a) terminal cost midpoint inequality on random pairs.
    let mut terminal_cost_convex = true;
    for s in 0..200u64 {
        let a = DVector::from_fn(d, |i, _| {
            2.0 * crate::rng::keyed_uniform_sym(seed, 11, s, i as u64, 0)
        });
        let b = DVector::from_fn(d, |i, _| {
            2.0 * crate::rng::keyed_uniform_sym(seed, 12, s, i as u64, 0)
        });
        let mid = (&a + &b) * 0.5;
        let gap = (prob.cost.h)(&mid) - 0.5 * ((prob.cost.h)(&a) + (prob.cost.h)(&b));
        if gap > tol {
            terminal_cost_convex = false;
            break;
        }
    }

    // (b) Hamiltonian midpoint inequality in (reads, y, z, v) with the
    // adjoint weights frozen at sampled candidate nodes. Convexity of the
    // cost flips into convexity of H through the negative adjoint weight.
    let n_coef_atoms = prob.model.coeffs.state_atoms.n_atoms();
    let n_cost_atoms = prob.cost.x_atoms.n_atoms();
    let mut hamiltonian_convex = true;
    'outer: for s in 0..200u64 {
        let pi = (crate::rng::keyed_u64(seed, 21, s, 0, 0) % m_paths as u64) as usize;
        let m = (crate::rng::keyed_u64(seed, 22, s, 0, 0) % n as u64) as i64;
        let psi = adj.psi[pi].vec_at(m);
        let q = adj.q[pi].at(m);
        let kw = cand.k[pi].at(m)[0];
        let sample = |side: u64| {
            let mk_reads = |tag: u64, count: usize| -> Vec<DVector<f64>> {
                (0..count)
                    .map(|j| {
                        DVector::from_fn(d, |i, _| {
                            2.0 * crate::rng::keyed_uniform_sym(
                                seed,
                                tag,
                                s * 64 + side,
                                (j * d + i) as u64,
                                0,
                            )
                        })
                    })
                    .collect()
            };
            let y = crate::rng::keyed_uniform_sym(seed, 33, s * 64 + side, 1000, 1);
            let z = DVector::from_fn(nm, |i, _| {
                crate::rng::keyed_uniform_sym(seed, 33, s * 64 + side, 2000 + i as u64, 1)
            });
            let v = DVector::from_fn(mu, |i, _| {
                2.0 * crate::rng::keyed_uniform_sym(seed, 33, s * 64 + side, 3000 + i as u64, 1)
            });
            (mk_reads(31, n_coef_atoms), mk_reads(32, n_cost_atoms), y, z, v)
        };
        let (xa, ca, ya, za, va) = sample(0);
        let (xb, cb, yb, zb, vb) = sample(1);
        let midv = |a: &[DVector<f64>], b: &[DVector<f64>]| -> Vec<DVector<f64>> {
            a.iter().zip(b).map(|(x, w)| (x + w) * 0.5).collect()
        };
        let x_now = DVector::zeros(d);
        let hval = |xr: &[DVector<f64>], cr: &[DVector<f64>], y: f64, z: &DVector<f64>, v: &DVector<f64>| {
            hamiltonian(
                &prob.model,
                &prob.cost,
                m,
                &x_now,
                xr,
                cr,
                y,
                z,
                v,
                &psi,
                q,
                kw,
            )
        };
        let hm = hval(
            &midv(&xa, &xb),
            &midv(&ca, &cb),
            0.5 * (ya + yb),
            &((&za + &zb) * 0.5),
            &((&va + &vb) * 0.5),
        );
        let gap = hm - 0.5 * (hval(&xa, &ca, ya, &za, &va) + hval(&xb, &cb, yb, &zb, &vb));
        if gap > tol {
            hamiltonian_convex = false;
            break 'outer;
        }
    }

    // (c) terminal cost-adjoint sign.
    let cost_adjoint_nonpositive = cand.k.iter().all(|kp| kp.at(n)[0] <= 0.0);

    // (d) paired comparison against random admissible perturbations.
    let base = pathwise_costs(prob, &cand.u, ens)?;
    let j_base = base.iter().sum::<f64>() / m_paths as f64;
    let mut perturbations_dominated = true;
    let mut worst_margin_se = f64::INFINITY;
    for s in 0..n_perturb as u64 {
        let amp = 0.5 * crate::rng::keyed_uniform_open(seed, 41, s, 0, 0);
        let mut u_pert = cand.u.clone();
        for node in 0..n {
            let slot = u_pert.at_mut(node);
            for (i, v) in slot.iter_mut().enumerate() {
                *v += amp
                    * crate::rng::keyed_uniform_sym(seed, 42, s, node as u64 * 97 + i as u64, 0);
            }
        }
        let u_pert = prob.constraint.project_control(&u_pert, grid.n_steps());
        let pert = pathwise_costs(prob, &u_pert, ens)?;
        let diffs: Vec<f64> = pert.iter().zip(&base).map(|(a, b)| a - b).collect();
        let mean = diffs.iter().sum::<f64>() / m_paths as f64;
        let var = diffs
            .iter()
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / (m_paths.max(2) - 1) as f64;
        let se = (var / m_paths as f64).sqrt();
        let margin = if se > 0.0 { mean / se } else if mean >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
        worst_margin_se = worst_margin_se.min(margin);
        if margin < -3.0 {
            perturbations_dominated = false;
        }
    }

    Ok(Certificate {
        terminal_cost_convex,
        hamiltonian_convex,
        cost_adjoint_nonpositive,
        perturbations_dominated,
        worst_margin_se,
        j_base,
    })
}

/// Per-path objective samples from a pathwise (identity-conditioned)
/// cost recursion; their mean is the usual estimator and paired
/// differences across controls share the ensemble.
fn pathwise_costs(prob: &ControlProblem, u: &StatePath, ens: &NoiseEnsemble) -> Result<Vec<f64>> {
    let fwd = solve_forward(&prob.model, u, &prob.gamma, ens)?;
    let bsde = solve_bsde(
        &prob.cost,
        &fwd,
        u,
        &prob.model.mu1,
        &prob.mu2,
        &prob.model.space,
        &CondExp::Identity,
        None,
        ens,
    )?;
    Ok(bsde.y.iter().map(|p| p.at(0)[0]).collect())
}
