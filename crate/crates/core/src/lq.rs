//! Linear-quadratic instances and their independent solvers.
//!
//! An instance couples linear dynamics with delayed state and control reads,
//!
//! ```text
//! dx = [ A(t) x + (L1 x_seg)(t) + C(t) u_mu1 ] dt
//!      + sum_l sqrt(lambda_l) [ B_l(t) x + (M_l x_seg)(t) + D_l(t) u_mu1 ] dW_l
//! ```
//!
//! with a quadratic cost driven through the backward recursion,
//!
//! ```text
//! f = <F(t) x(t), x(t)> + g1(t) y + <g2(t), z> + <N(t) v, v>,
//! h = <Phi x1, x1>,   x1 = x_mu2(T).
//! ```
//!
//! `lq_to_problem` lowers an instance onto the generic control problem, so
//! the descent loop needs no LQ-specific code. Two independent solvers
//! cross-check it: `lq_bruteforce_deterministic` stacks the noiseless
//! discrete system into one quadratic program and solves it exactly, and
//! `lq_closed_form_control` evaluates the stationarity formula
//! `u(t) = 1/2 N(t)^{-1} E_t[ sum_i w_i ( C(r_i)* psi(r_i)
//! + sum_l lambda_l D_l(r_i)* q_l(r_i) ) ] / E_t[ sum_i w_i k(r_i) ]`,
//! `r_i = t - off_i`, restricted to read times at most `T - dt`. The drift
//! slot takes the propagated weight `psi`, not the stored `p`, and the
//! divisor carries the running cost weight `k` -- identically `-1` when the
//! stage cost ignores the value and its noise loadings, which recovers the
//! familiar `-1/2 N^{-1}` prefactor. With both in place the formula is the
//! exact zero of the conditioned discrete gradient; an argmin of the
//! quadratic program is a fixed point of it to solver precision, not merely
//! up to a step-size error.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward::{BackwardSolution, CostSpec, FeatureSet};
use crate::error::{Error, Result};
use crate::forward::{CoefficientSet, ForwardModel, ImplicitFactors};
use crate::measure::{delay_integral, FiniteMeasure};
use crate::noise::NoiseEnsemble;
use crate::operators::{check_coercivity, CoercivityReport, OperatorPair};
use crate::path_calculus::KernelRepresentation;
use crate::paths::StatePath;
use crate::regression::CondExp;
use crate::smp::{
    solve_adjoint, solve_candidate, ControlConstraint, ControlProblem,
};
use crate::spaces::ModelSpace;

pub type MatFn = Arc<dyn Fn(i64) -> DMatrix<f64> + Send + Sync>;
pub type MatsFn = Arc<dyn Fn(i64) -> Vec<DMatrix<f64>> + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(i64) -> f64 + Send + Sync>;
pub type VecFn = Arc<dyn Fn(i64) -> DVector<f64> + Send + Sync>;

/// One linear-quadratic control instance.
#[derive(Clone)]
pub struct LqInstance {
    pub space: ModelSpace,
    /// Undelayed operator parts; `ops.a` rides the implicit side of the
    /// forward scheme.
    pub ops: OperatorPair,
    /// Delayed drift reads `L1`; square kernels over the state dimension.
    pub a1: KernelRepresentation,
    /// Delayed diffusion reads `M_l`, one kernel per noise mode, sharing
    /// `a1`'s atoms.
    pub b1: Vec<KernelRepresentation>,
    /// `d x m` control-to-drift map `C`.
    pub c_mat: MatFn,
    /// Per mode `d x m` control-to-diffusion maps `D_l`.
    pub d_mats: MatsFn,
    /// Stage state weight `F`, symmetric positive semidefinite.
    pub f_mat: MatFn,
    /// Linear cost load on `y`.
    pub g1: ScalarFn,
    /// Linear cost load on `z`, one slope per mode.
    pub g2: VecFn,
    /// Control weight `N`, symmetric positive definite.
    pub n_mat: MatFn,
    /// Terminal weight on the aggregated read, symmetric positive
    /// semidefinite.
    pub phi: DMatrix<f64>,
    pub control_dim: usize,
    /// Control delay measure.
    pub mu1: FiniteMeasure,
    /// Terminal aggregation measure.
    pub mu2: FiniteMeasure,
    /// State history on `[-K, 0]`.
    pub gamma: StatePath,
    /// Starting control on `[-K, T]`; the part before time zero is frozen
    /// history.
    pub u0: StatePath,
}

impl LqInstance {
    pub fn dim(&self) -> usize {
        self.space.triple.dim()
    }

    pub fn n_modes(&self) -> usize {
        self.space.qw.n_modes()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        let m = self.control_dim;
        let grid = &self.space.grid;
        if m == 0 {
            return Err(Error::validation("lq: control dimension must be positive"));
        }
        if self.a1.dim_e() != d || self.a1.dim_f() != d {
            return Err(Error::validation(format!(
                "lq: drift kernel maps {} -> {}, state dim is {d}",
                self.a1.dim_e(),
                self.a1.dim_f()
            )));
        }
        if self.b1.len() != self.n_modes() {
            return Err(Error::validation(format!(
                "lq: {} diffusion kernels for {} noise modes",
                self.b1.len(),
                self.n_modes()
            )));
        }
        for (l, k) in self.b1.iter().enumerate() {
            if k.dim_e() != d || k.dim_f() != d {
                return Err(Error::validation(format!(
                    "lq: diffusion kernel {l} maps {} -> {}, state dim is {d}",
                    k.dim_e(),
                    k.dim_f()
                )));
            }
            if k.nu0().offsets() != self.a1.nu0().offsets()
                || k.nu0().weights() != self.a1.nu0().weights()
            {
                return Err(Error::validation(format!(
                    "lq: diffusion kernel {l} must share the drift kernel's atoms"
                )));
            }
        }
        for t in 0..=grid.last_main_node() {
            let c = (self.c_mat)(t);
            if c.nrows() != d || c.ncols() != m {
                return Err(Error::validation(format!(
                    "lq: C({t}) is {}x{}, want {d}x{m}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            let ds = (self.d_mats)(t);
            if ds.len() != self.n_modes() {
                return Err(Error::validation(format!(
                    "lq: D({t}) has {} mode maps, want {}",
                    ds.len(),
                    self.n_modes()
                )));
            }
            for (l, dm) in ds.iter().enumerate() {
                if dm.nrows() != d || dm.ncols() != m {
                    return Err(Error::validation(format!(
                        "lq: D_{l}({t}) is {}x{}, want {d}x{m}",
                        dm.nrows(),
                        dm.ncols()
                    )));
                }
            }
            let f = (self.f_mat)(t);
            if f.nrows() != d || f.ncols() != d {
                return Err(Error::validation(format!("lq: F({t}) must be {d}x{d}")));
            }
            let n = (self.n_mat)(t);
            if n.nrows() != m || n.ncols() != m {
                return Err(Error::validation(format!("lq: N({t}) must be {m}x{m}")));
            }
            let g2 = (self.g2)(t);
            if g2.len() != self.n_modes() {
                return Err(Error::validation(format!(
                    "lq: g2({t}) has {} slopes for {} modes",
                    g2.len(),
                    self.n_modes()
                )));
            }
        }
        if self.phi.nrows() != d || self.phi.ncols() != d {
            return Err(Error::validation(format!("lq: Phi must be {d}x{d}")));
        }
        if self.gamma.dim() != d
            || self.gamma.first_node() != grid.first_node()
            || self.gamma.last_node() != 0
        {
            return Err(Error::validation("lq: history must span [-K, 0]"));
        }
        if self.u0.dim() != m
            || self.u0.first_node() != grid.first_node()
            || self.u0.last_node() != grid.last_main_node()
        {
            return Err(Error::validation("lq: starting control must span [-K, T]"));
        }
        Ok(())
    }
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn min_sym_eig(m: &DMatrix<f64>) -> f64 {
    sym(m)
        .symmetric_eigen()
        .eigenvalues
        .min()
}

/// Convexity and well-posedness summary for one instance.
#[derive(Debug, Clone)]
pub struct LqCertificate {
    pub coercivity: CoercivityReport,
    /// Smallest eigenvalue of the control weight over stage nodes; must be
    /// strictly positive.
    pub n_min_eig: f64,
    pub f_min_eig: f64,
    pub phi_min_eig: f64,
}

impl LqCertificate {
    /// Strict convexity margin in the control: the reported lower bound on
    /// `N`.
    pub fn epsilon(&self) -> f64 {
        self.n_min_eig
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.coercivity.passes(tol)
            && self.n_min_eig > 0.0
            && self.f_min_eig >= -tol
            && self.phi_min_eig >= -tol
    }
}

pub fn lq_certificate(inst: &LqInstance, n_random: usize, seed: u64) -> Result<LqCertificate> {
    inst.validate()?;
    let grid = &inst.space.grid;
    let coercivity = check_coercivity(
        &inst.ops,
        &inst.space.triple,
        &inst.space.qw,
        grid,
        n_random,
        seed,
    );
    let mut n_min = f64::INFINITY;
    let mut f_min = f64::INFINITY;
    for t in 0..grid.last_main_node() {
        n_min = n_min.min(min_sym_eig(&(inst.n_mat)(t)));
        f_min = f_min.min(min_sym_eig(&(inst.f_mat)(t)));
    }
    Ok(LqCertificate {
        coercivity,
        n_min_eig: n_min,
        f_min_eig: f_min,
        phi_min_eig: min_sym_eig(&inst.phi),
    })
}

/// Frobenius-norm bound on the squared read-to-coefficient gain, used as the
/// declared Lipschitz constant of the lowered coefficients.
fn kernel_gain_bound(inst: &LqInstance) -> f64 {
    let grid = &inst.space.grid;
    let lam = inst.space.qw.eigenvalues();
    let weights = inst.a1.nu0().weights().to_vec();
    let mut worst = 0.0f64;
    for t in 0..=grid.last_main_node() {
        let mut drift = 0.0;
        for (j, w) in weights.iter().enumerate() {
            drift += w * inst.a1.kernel(t, j).norm();
        }
        let mut total = drift * drift;
        for (l, &ll) in lam.iter().enumerate() {
            let mut diff = 0.0;
            for (j, w) in weights.iter().enumerate() {
                diff += w * inst.b1[l].kernel(t, j).norm();
            }
            total += ll * diff * diff;
        }
        worst = worst.max(total);
    }
    worst
}

/// Lower an instance onto the generic control problem. The kernels' atom
/// weights ride inside the coefficient Jacobians, matching the convention of
/// the kernel `apply`.
pub fn lq_to_problem(inst: &LqInstance) -> Result<ControlProblem> {
    inst.validate()?;
    let d = inst.dim();
    let n_modes = inst.n_modes();
    let m = inst.control_dim;
    let atoms = inst.a1.nu0().clone();
    let n_atoms = atoms.offsets().len();

    let a1 = inst.a1.clone();
    let b1 = inst.b1.clone();
    let c_mat = inst.c_mat.clone();
    let d_mats = inst.d_mats.clone();

    let aw: Vec<f64> = atoms.weights().to_vec();

    let b = {
        let a1 = a1.clone();
        let c_mat = c_mat.clone();
        let aw = aw.clone();
        Arc::new(
            move |t: i64, reads: &[DVector<f64>], v: &DVector<f64>| {
                let mut acc = (c_mat)(t) * v;
                for (j, w) in aw.iter().enumerate() {
                    acc += a1.kernel(t, j) * &reads[j] * *w;
                }
                acc
            },
        )
    };
    let db_dx = {
        let a1 = a1.clone();
        let aw = aw.clone();
        Arc::new(move |t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| {
            (0..n_atoms).map(|j| a1.kernel(t, j) * aw[j]).collect::<Vec<_>>()
        })
    };
    let db_dv = {
        let c_mat = c_mat.clone();
        Arc::new(move |t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| (c_mat)(t))
    };
    let sigma = {
        let b1 = b1.clone();
        let d_mats = d_mats.clone();
        let aw = aw.clone();
        Arc::new(
            move |t: i64, reads: &[DVector<f64>], v: &DVector<f64>| {
                let ds = (d_mats)(t);
                let mut out = DMatrix::zeros(d, n_modes);
                for l in 0..n_modes {
                    let mut col = &ds[l] * v;
                    for (j, w) in aw.iter().enumerate() {
                        col += b1[l].kernel(t, j) * &reads[j] * *w;
                    }
                    out.set_column(l, &col);
                }
                out
            },
        )
    };
    let dsigma_dx = {
        let b1 = b1.clone();
        let aw = aw.clone();
        Arc::new(move |t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| {
            (0..n_atoms)
                .map(|j| {
                    (0..n_modes)
                        .map(|l| b1[l].kernel(t, j) * aw[j])
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        })
    };
    let dsigma_dv = {
        let d_mats = d_mats.clone();
        Arc::new(move |t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| (d_mats)(t))
    };

    let coeffs = CoefficientSet {
        dim: d,
        n_modes,
        control_dim: m,
        state_atoms: atoms,
        b,
        sigma,
        db_dx,
        db_dv,
        dsigma_dx,
        dsigma_dv,
        lipschitz: kernel_gain_bound(inst),
    };

    let f_mat = inst.f_mat.clone();
    let n_mat = inst.n_mat.clone();
    let g1 = inst.g1.clone();
    let g2 = inst.g2.clone();
    let phi = inst.phi.clone();

    let f = {
        let f_mat = f_mat.clone();
        let n_mat = n_mat.clone();
        let g1 = g1.clone();
        let g2 = g2.clone();
        Arc::new(
            move |t: i64, reads: &[DVector<f64>], y: f64, z: &DVector<f64>, v: &DVector<f64>| {
                let x = &reads[0];
                ((f_mat)(t) * x).dot(x) + (g1)(t) * y + (g2)(t).dot(z) + ((n_mat)(t) * v).dot(v)
            },
        )
    };
    let df_dx = {
        let f_mat = f_mat.clone();
        Arc::new(
            move |t: i64, reads: &[DVector<f64>], _y: f64, _z: &DVector<f64>, _v: &DVector<f64>| {
                vec![sym(&(f_mat)(t)) * &reads[0] * 2.0]
            },
        )
    };
    let df_dy = {
        let g1 = g1.clone();
        Arc::new(
            move |t: i64, _r: &[DVector<f64>], _y: f64, _z: &DVector<f64>, _v: &DVector<f64>| {
                (g1)(t)
            },
        )
    };
    let df_dz = {
        let g2 = g2.clone();
        Arc::new(
            move |t: i64, _r: &[DVector<f64>], _y: f64, _z: &DVector<f64>, _v: &DVector<f64>| {
                (g2)(t)
            },
        )
    };
    let df_dv = {
        let n_mat = n_mat.clone();
        Arc::new(
            move |t: i64, _r: &[DVector<f64>], _y: f64, _z: &DVector<f64>, v: &DVector<f64>| {
                sym(&(n_mat)(t)) * v * 2.0
            },
        )
    };
    let h = {
        let phi = phi.clone();
        Arc::new(move |x1: &DVector<f64>| (&phi * x1).dot(x1))
    };
    let dh_dx = {
        let phis = sym(&phi);
        Arc::new(move |x1: &DVector<f64>| &phis * x1 * 2.0)
    };

    let cost = CostSpec {
        control_dim: m,
        n_modes,
        x_atoms: FiniteMeasure::dirac_now(),
        f,
        h,
        df_dx,
        df_dy,
        df_dz,
        df_dv,
        dh_dx,
    };

    Ok(ControlProblem {
        model: ForwardModel {
            space: inst.space.clone(),
            ops: inst.ops.clone(),
            coeffs,
            mu1: inst.mu1.clone(),
        },
        cost,
        mu2: inst.mu2.clone(),
        gamma: inst.gamma.clone(),
        constraint: ControlConstraint::All,
    })
}

/// Control built from the stationarity formula, per path and averaged.
#[derive(Debug, Clone)]
pub struct ClosedFormControl {
    /// One full-span control per path; history and the final node are copied
    /// from the template.
    pub per_path: Vec<StatePath>,
    pub mean: StatePath,
}

/// Evaluate the stationarity formula at an adjoint solution. `template`
/// supplies the frozen history and the value at the final node, which no
/// stage reads. `k` is the running cost weight per path from the candidate
/// solve; each read divides by its conditioned value so the formula stays
/// the gradient zero when the stage cost couples to the running value or
/// its noise loadings.
pub fn lq_closed_form_control(
    inst: &LqInstance,
    template: &StatePath,
    adj: &BackwardSolution,
    k: &[StatePath],
    mode: &CondExp,
    features: Option<&FeatureSet>,
) -> Result<ClosedFormControl> {
    inst.validate()?;
    let grid = &inst.space.grid;
    let n = grid.last_main_node();
    let last_step = n - 1;
    let d = inst.dim();
    let m = inst.control_dim;
    let n_modes = inst.n_modes();
    let lam = inst.space.qw.eigenvalues().to_vec();
    let n_paths = adj.p.len();
    if n_paths == 0 {
        return Err(Error::validation("closed form: empty adjoint ensemble"));
    }
    if k.len() != n_paths {
        return Err(Error::validation(format!(
            "closed form: {} cost-weight paths for {} adjoint paths",
            k.len(),
            n_paths
        )));
    }

    // Pathwise aggregation over the delayed control reads, together with
    // the matching aggregate of the cost weight at the same read nodes.
    let mut raw = vec![StatePath::zeros(0, last_step, m); n_paths];
    let mut kraw = vec![vec![0.0; (last_step + 1) as usize]; n_paths];
    for pi in 0..n_paths {
        for node in 0..=last_step {
            let mut acc = DVector::zeros(m);
            let mut kacc = 0.0;
            for (off, w) in inst.mu1.iter() {
                let r = node - off;
                if r > last_step {
                    continue;
                }
                acc += (inst.c_mat)(r).transpose() * adj.psi[pi].vec_at(r) * w;
                kacc += w * k[pi].at(r)[0];
                let ds = (inst.d_mats)(r);
                let qmat = adj.q[pi].mat_at(r, d, n_modes);
                for (l, &ll) in lam.iter().enumerate() {
                    if ll == 0.0 {
                        continue;
                    }
                    acc += ds[l].transpose() * qmat.column(l) * (w * ll);
                }
            }
            raw[pi].set_vec(node, &acc);
            kraw[pi][node as usize] = kacc;
        }
    }

    // Condition, then solve against the control weight and divide by the
    // conditioned cost weight. Nodes no stage reads have a zero weight and
    // keep the plain solve, which is zero there anyway.
    let mut per_path = vec![template.clone(); n_paths];
    let mut targets = vec![0.0; n_paths];
    for node in 0..=last_step {
        let cond = crate::backward::step_conditioner(mode, features, node as usize, n_paths)?;
        let mut fitted = vec![DVector::zeros(m); n_paths];
        for c in 0..m {
            for (pi, t) in targets.iter_mut().enumerate() {
                *t = raw[pi].at(node)[c];
            }
            let vals = cond.apply(&targets)?;
            for pi in 0..n_paths {
                fitted[pi][c] = vals[pi];
            }
        }
        for (pi, t) in targets.iter_mut().enumerate() {
            *t = kraw[pi][node as usize];
        }
        let kbar = cond.apply(&targets)?;
        let nlu = (inst.n_mat)(node).lu();
        for pi in 0..n_paths {
            let sol = nlu.solve(&fitted[pi]).ok_or_else(|| {
                Error::numerical(format!("closed form: singular control weight at node {node}"))
            })?;
            let scale = if kbar[pi].abs() < 1e-12 {
                -0.5
            } else {
                0.5 / kbar[pi]
            };
            per_path[pi].set_vec(node, &(sol * scale));
        }
    }

    let mut mean = template.clone();
    for node in 0..=last_step {
        let mut acc = DVector::zeros(m);
        for p in &per_path {
            acc += p.vec_at(node);
        }
        mean.set_vec(node, &(acc / n_paths as f64));
    }
    Ok(ClosedFormControl { per_path, mean })
}

/// Damped sweep of candidate -> adjoint -> stationarity formula, stopping
/// when successive controls agree to `tol` in the sup norm.
pub struct FixedPointTrace {
    pub u: StatePath,
    pub sweeps: usize,
    pub last_diff: f64,
}

pub fn lq_fixed_point(
    inst: &LqInstance,
    u_start: &StatePath,
    damping: f64,
    max_sweeps: usize,
    tol: f64,
    mode: &CondExp,
    ens: &NoiseEnsemble,
) -> Result<FixedPointTrace> {
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::validation("fixed point: damping must be in (0, 1]"));
    }
    let prob = lq_to_problem(inst)?;
    let mut u = u_start.clone();
    let mut last_diff = f64::INFINITY;
    for sweep in 1..=max_sweeps {
        let cand = solve_candidate(&prob, &u, mode, ens)?;
        let adj = solve_adjoint(&prob, &cand, mode, ens)?;
        let next =
            lq_closed_form_control(inst, &u, &adj, &cand.k, mode, cand.features.as_ref())?.mean;
        let mut blended = u.clone();
        blended.scale(1.0 - damping);
        blended.axpy(damping, &next);
        last_diff = blended.max_abs_diff(&u);
        u = blended;
        if last_diff <= tol {
            return Ok(FixedPointTrace {
                u,
                sweeps: sweep,
                last_diff,
            });
        }
    }
    Ok(FixedPointTrace {
        u,
        sweeps: max_sweeps,
        last_diff,
    })
}

/// Exact solution of a noiseless instance as a stacked quadratic program.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u: StatePath,
    /// Objective at `u`, evaluated through the forward and cost pipeline.
    pub value: f64,
    /// Objective predicted by the assembled quadratic form; agreement with
    /// `value` checks the assembly.
    pub predicted_value: f64,
    /// Smallest eigenvalue of the quadratic form restricted to read control
    /// nodes; strictly positive means the discrete problem is strictly
    /// convex there.
    pub hessian_min_eig: f64,
    /// Control nodes no stage reads, kept at their starting values.
    pub dead_nodes: Vec<i64>,
}

fn require_noiseless(inst: &LqInstance) -> Result<()> {
    let grid = &inst.space.grid;
    let lam = inst.space.qw.eigenvalues();
    for (l, &ll) in lam.iter().enumerate() {
        if ll == 0.0 {
            continue;
        }
        for t in 0..=grid.last_main_node() {
            let bloc = (inst.ops.b)(t);
            if bloc[l].norm() != 0.0
                || (inst.d_mats)(t)[l].norm() != 0.0
                || (inst.g2)(t)[l] != 0.0
            {
                return Err(Error::validation(format!(
                    "bruteforce: mode {l} is live and enters the dynamics or cost"
                )));
            }
            for j in 0..inst.a1.nu0().offsets().len() {
                if inst.b1[l].kernel(t, j).norm() != 0.0 {
                    return Err(Error::validation(format!(
                        "bruteforce: mode {l} is live and has delayed diffusion reads"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Solve a deterministic instance exactly by stacking all control nodes into
/// one quadratic program over the affine state propagation.
///
/// Requires: every live noise mode decoupled (no local, delayed, control or
/// cost loading) and `n_steps * control_dim <= 2000`.
pub fn lq_bruteforce_deterministic(inst: &LqInstance) -> Result<QpSolution> {
    inst.validate()?;
    require_noiseless(inst)?;
    let grid = &inst.space.grid;
    let n = grid.last_main_node();
    let n_steps = grid.n_steps();
    let d = inst.dim();
    let m = inst.control_dim;
    let dt = grid.dt();
    if n_steps * m > 2000 {
        return Err(Error::validation(format!(
            "bruteforce: {} stacked unknowns exceed the 2000 limit",
            n_steps * m
        )));
    }
    let nu = n_steps * m;

    // Baseline trajectory: zero control on [0, T), frozen history before.
    let mut u_hist = inst.u0.clone();
    for node in 0..=n {
        u_hist.at_mut(node).fill(0.0);
    }
    let prob = lq_to_problem(inst)?;
    let ens0 = NoiseEnsemble::zeros(grid, inst.n_modes(), 1);
    let x0 = crate::forward::solve_forward(&prob.model, &u_hist, &inst.gamma, &ens0)?
        .paths
        .remove(0);

    // Sensitivity of each state node to the stacked control vector.
    let factors = ImplicitFactors::build(&inst.ops.a, grid, d)?;
    let aw: Vec<(i64, f64)> = inst.a1.nu0().iter().collect();
    let m1: Vec<(i64, f64)> = inst.mu1.iter().collect();
    let mut xs: Vec<DMatrix<f64>> = Vec::with_capacity(n_steps + 1);
    xs.push(DMatrix::zeros(d, nu));
    for node in 0..n {
        let mut rhs = xs[node as usize].clone();
        for (j, (off, w)) in aw.iter().enumerate() {
            let src = node + off;
            if src >= 0 {
                rhs += inst.a1.kernel(node, j) * &xs[src as usize] * (*w * dt);
            }
        }
        let c_now = (inst.c_mat)(node);
        for (off, w) in &m1 {
            let r = node + off;
            if (0..n).contains(&r) {
                let base = r as usize * m;
                let block = &c_now * (*w * dt);
                for a in 0..d {
                    for b in 0..m {
                        rhs[(a, base + b)] += block[(a, b)];
                    }
                }
            }
        }
        let mut next = DMatrix::zeros(d, nu);
        for c in 0..nu {
            let col = factors.solve(node as usize, DVector::from_column_slice(rhs.column(c).as_slice()));
            next.set_column(c, &col);
        }
        xs.push(next);
    }

    // Stage weights compound the linear y-load exactly as the cost recursion
    // does.
    let mut omega = vec![1.0f64; n_steps + 1];
    for node in 0..n {
        omega[node as usize + 1] = omega[node as usize] * (1.0 + dt * (inst.g1)(node));
    }

    let mut hq = DMatrix::zeros(nu, nu);
    let mut gq = DVector::zeros(nu);
    let mut c0 = 0.0f64;
    for node in 0..n {
        let om = omega[node as usize] * dt;
        let x0n = x0.vec_at(node);
        let fmat = (inst.f_mat)(node);
        let fs = sym(&fmat);
        let fx = &fs * &xs[node as usize];
        hq += xs[node as usize].transpose() * &fx * om;
        gq += fx.transpose() * &x0n * om;
        c0 += (fmat * &x0n).dot(&x0n) * om;

        let nmat = (inst.n_mat)(node);
        let ns = sym(&nmat);
        let ubar0 = delay_integral(&u_hist, &inst.mu1, node)?;
        let nsu = &ns * &ubar0;
        c0 += (&nmat * &ubar0).dot(&ubar0) * om;
        let live: Vec<(usize, f64)> = m1
            .iter()
            .filter_map(|(off, w)| {
                let r = node + off;
                (0..n).contains(&r).then_some((r as usize, *w))
            })
            .collect();
        for &(ra, wa) in &live {
            for c in 0..m {
                gq[ra * m + c] += om * wa * nsu[c];
            }
            for &(rb, wb) in &live {
                for a in 0..m {
                    for b in 0..m {
                        hq[(ra * m + a, rb * m + b)] += om * wa * wb * ns[(a, b)];
                    }
                }
            }
        }
    }
    let mut x1s = DMatrix::zeros(d, nu);
    for (off, w) in inst.mu2.iter() {
        let src = n + off;
        if src >= 0 {
            x1s += &xs[src as usize] * w;
        }
    }
    let x10 = delay_integral(&x0, &inst.mu2, n)?;
    let phis = sym(&inst.phi);
    let om_t = omega[n_steps];
    let px1 = &phis * &x1s;
    hq += x1s.transpose() * &px1 * om_t;
    gq += px1.transpose() * &x10 * om_t;
    c0 += (&inst.phi * &x10).dot(&x10) * om_t;

    // Stage reads decide which control nodes matter; the rest are pinned.
    let alive: Vec<bool> = (0..n)
        .map(|r| m1.iter().any(|(off, _)| (0..n).contains(&(r - off))))
        .collect();
    let dead_nodes: Vec<i64> = (0..n).filter(|&r| !alive[r as usize]).collect();
    let idx: Vec<usize> = (0..n)
        .filter(|&r| alive[r as usize])
        .flat_map(|r| (0..m).map(move |c| r as usize * m + c))
        .collect();
    if idx.is_empty() {
        return Err(Error::validation(
            "bruteforce: no control node is read by any stage",
        ));
    }
    let nr = idx.len();
    let mut h_red = DMatrix::zeros(nr, nr);
    let mut g_red = DVector::zeros(nr);
    for (a, &ia) in idx.iter().enumerate() {
        g_red[a] = gq[ia];
        for (b, &ib) in idx.iter().enumerate() {
            h_red[(a, b)] = hq[(ia, ib)];
        }
    }
    let min_eig = h_red.clone().symmetric_eigen().eigenvalues.min();
    let chol = h_red.clone().cholesky().ok_or_else(|| {
        Error::numerical(format!(
            "bruteforce: quadratic form not positive definite on read nodes \
             (smallest eigenvalue {min_eig:.3e})"
        ))
    })?;
    let sol = chol.solve(&(-&g_red));

    let mut ustar = DVector::zeros(nu);
    for (a, &ia) in idx.iter().enumerate() {
        ustar[ia] = sol[a];
    }
    let predicted = c0 + 2.0 * gq.dot(&ustar) + (&hq * &ustar).dot(&ustar);

    let mut u = inst.u0.clone();
    for r in 0..n {
        if alive[r as usize] {
            let base = r as usize * m;
            u.set_slice(r, ustar.as_slice()[base..base + m].as_ref());
        }
    }
    let cand = solve_candidate(&prob, &u, &CondExp::Identity, &ens0)?;
    Ok(QpSolution {
        u,
        value: cand.bsde.j_value,
        predicted_value: predicted,
        hessian_min_eig: min_eig,
        dead_nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::gather_reads;
    use crate::grid::build_grid;
    use crate::smp::{projected_gradient_descent, smp_gradient, DescentOpts};
    use crate::spaces::{GelfandTriple, QWienerConfig};

    struct Knobs {
        n_steps: usize,
        delay: f64,
        a_loc: f64,
        a1_gain: f64,
        a1_off: i64,
        c_gain: f64,
        f_w: f64,
        n_w: f64,
        phi_w: f64,
        g1: f64,
        mu1: Vec<(i64, f64)>,
        mu2: Vec<(i64, f64)>,
        u_hist: f64,
    }

    impl Default for Knobs {
        fn default() -> Self {
            Knobs {
                n_steps: 16,
                delay: 0.0,
                a_loc: 0.0,
                a1_gain: 0.0,
                a1_off: 0,
                c_gain: 1.0,
                f_w: 1.0,
                n_w: 1.0,
                phi_w: 0.0,
                g1: 0.0,
                mu1: vec![(0, 1.0)],
                mu2: vec![(0, 1.0)],
                u_hist: 0.0,
            }
        }
    }

    fn scalar_instance(k: &Knobs) -> LqInstance {
        let grid = build_grid(1.0, k.delay, k.n_steps).unwrap();
        let first = grid.first_node();
        let n = grid.last_main_node();
        let triple = GelfandTriple::trivial(1);
        let qw = QWienerConfig::new(vec![0.0]).unwrap();
        let space = ModelSpace {
            grid: grid.clone(),
            triple,
            qw,
        };
        let ops = OperatorPair::constant(
            DMatrix::from_element(1, 1, k.a_loc),
            vec![DMatrix::zeros(1, 1)],
            0.1,
            30.0,
            30.0,
        );
        let atoms = FiniteMeasure::new(vec![(k.a1_off, 1.0)], &grid).unwrap();
        let a1g = k.a1_gain;
        let a1 = KernelRepresentation::from_fn(&grid, atoms.clone(), 1, 1, |_, _, _| {
            DMatrix::from_element(1, 1, a1g)
        })
        .unwrap();
        let b1 = vec![KernelRepresentation::from_fn(&grid, atoms, 1, 1, |_, _, _| {
            DMatrix::zeros(1, 1)
        })
        .unwrap()];
        let cg = k.c_gain;
        let fw = k.f_w;
        let nw = k.n_w;
        let g1v = k.g1;
        let mut u0 = StatePath::zeros(first, n, 1);
        for node in first..0 {
            u0.at_mut(node)[0] = k.u_hist;
        }
        LqInstance {
            space,
            ops,
            a1,
            b1,
            c_mat: Arc::new(move |_| DMatrix::from_element(1, 1, cg)),
            d_mats: Arc::new(|_| vec![DMatrix::zeros(1, 1)]),
            f_mat: Arc::new(move |_| DMatrix::from_element(1, 1, fw)),
            g1: Arc::new(move |_| g1v),
            g2: Arc::new(|_| DVector::zeros(1)),
            n_mat: Arc::new(move |_| DMatrix::from_element(1, 1, nw)),
            phi: DMatrix::from_element(1, 1, k.phi_w),
            control_dim: 1,
            mu1: FiniteMeasure::new(k.mu1.clone(), &grid).unwrap(),
            mu2: FiniteMeasure::new(k.mu2.clone(), &grid).unwrap(),
            gamma: StatePath::constant(first, 0, &[1.0]),
            u0,
        }
    }

    fn det_ens(inst: &LqInstance) -> NoiseEnsemble {
        NoiseEnsemble::zeros(&inst.space.grid, inst.n_modes(), 1)
    }

    fn sup_diff_main(a: &StatePath, b: &StatePath, last: i64) -> f64 {
        (0..=last)
            .map(|node| (a.at(node)[0] - b.at(node)[0]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn lowered_coefficients_match_kernel_apply() {
        let grid = build_grid(1.0, 0.5, 8).unwrap();
        let first = grid.first_node();
        let n = grid.last_main_node();
        let atoms = FiniteMeasure::new(vec![(-4, 0.7), (0, 0.4)], &grid).unwrap();
        let a1 = KernelRepresentation::from_fn(&grid, atoms.clone(), 2, 2, |t, j, _| {
            DMatrix::from_fn(2, 2, |r, c| {
                0.3 + 0.1 * t as f64 + 0.2 * j as f64 + 0.05 * (r * 2 + c) as f64
            })
        })
        .unwrap();
        let b1 = vec![KernelRepresentation::from_fn(&grid, atoms.clone(), 2, 2, |t, j, _| {
            DMatrix::from_fn(2, 2, |r, c| {
                -0.2 + 0.07 * t as f64 - 0.1 * j as f64 + 0.04 * (r + c) as f64
            })
        })
        .unwrap()];
        let inst = LqInstance {
            space: ModelSpace {
                grid: grid.clone(),
                triple: GelfandTriple::trivial(2),
                qw: QWienerConfig::new(vec![0.5]).unwrap(),
            },
            ops: OperatorPair::constant(
                DMatrix::zeros(2, 2),
                vec![DMatrix::zeros(2, 2)],
                0.1,
                30.0,
                30.0,
            ),
            a1: a1.clone(),
            b1: b1.clone(),
            c_mat: Arc::new(|_| DMatrix::from_row_slice(2, 1, &[0.9, -0.3])),
            d_mats: Arc::new(|_| vec![DMatrix::from_row_slice(2, 1, &[0.2, 0.1])]),
            f_mat: Arc::new(|_| DMatrix::identity(2, 2)),
            g1: Arc::new(|_| 0.0),
            g2: Arc::new(|_| DVector::zeros(1)),
            n_mat: Arc::new(|_| DMatrix::identity(1, 1)),
            phi: DMatrix::zeros(2, 2),
            control_dim: 1,
            mu1: FiniteMeasure::dirac_now(),
            mu2: FiniteMeasure::dirac_now(),
            gamma: StatePath::zeros(first, 0, 2),
            u0: StatePath::zeros(first, n, 1),
        };
        let prob = lq_to_problem(&inst).unwrap();
        let z = StatePath::from_fn(first, n, 2, |node, c| {
            (0.3 * node as f64 + 0.9 * c as f64).sin()
        });
        let drift = a1.apply(&grid, &z).unwrap();
        let diff = b1[0].apply(&grid, &z).unwrap();
        let v = DVector::from_element(1, 0.0);
        for t in 0..=n {
            let reads = gather_reads(&z, &prob.model.coeffs.state_atoms, t);
            let b = (prob.model.coeffs.b)(t, &reads, &v);
            assert!((b - drift.vec_at(t)).norm() < 1e-13);
            let s = (prob.model.coeffs.sigma)(t, &reads, &v);
            assert!((DVector::from_column_slice(s.column(0).as_slice()) - diff.vec_at(t)).norm() < 1e-13);
        }
    }

    #[test]
    fn cost_values_and_slopes_by_hand() {
        let mut k = Knobs::default();
        k.f_w = 0.5;
        k.n_w = 2.0;
        k.g1 = 0.3;
        let inst = scalar_instance(&k);
        let prob = lq_to_problem(&inst).unwrap();
        let reads = vec![DVector::from_element(1, 3.0)];
        let z = DVector::from_element(1, 0.25);
        let v = DVector::from_element(1, -1.0);
        // 0.5*9 + 0.3*2 + 2*1 = 7.1 with g2 = 0.
        let fval = (prob.cost.f)(0, &reads, 2.0, &z, &v);
        assert!((fval - 7.1).abs() < 1e-14);
        let dv = (prob.cost.df_dv)(0, &reads, 2.0, &z, &v);
        assert!((dv[0] - (-4.0)).abs() < 1e-14);
        let dx = (prob.cost.df_dx)(0, &reads, 2.0, &z, &v);
        assert!((dx[0][0] - 3.0).abs() < 1e-14);
        assert!(((prob.cost.df_dy)(0, &reads, 2.0, &z, &v) - 0.3).abs() < 1e-14);
    }

    #[test]
    fn qp_zero_cost_returns_zero_control() {
        let mut k = Knobs::default();
        k.f_w = 0.0;
        k.phi_w = 0.0;
        k.a1_gain = 0.5;
        k.a1_off = 0;
        let inst = scalar_instance(&k);
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        for node in 0..inst.space.grid.last_main_node() {
            assert_eq!(qp.u.at(node)[0], 0.0);
        }
        assert!(qp.value.abs() < 1e-15);
        assert!(qp.predicted_value.abs() < 1e-15);
        assert!(qp.hessian_min_eig > 0.0);
    }

    #[test]
    fn qp_value_approaches_tanh_benchmark() {
        let mut k = Knobs::default();
        k.n_steps = 64;
        let inst = scalar_instance(&k);
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        let target = 1.0f64.tanh();
        assert!(
            (qp.value - target).abs() < 0.02,
            "value {} vs {}",
            qp.value,
            target
        );
        assert!((qp.value - qp.predicted_value).abs() < 1e-10 * (1.0 + qp.value.abs()));

        let mut k32 = Knobs::default();
        k32.n_steps = 32;
        let coarse = lq_bruteforce_deterministic(&scalar_instance(&k32)).unwrap();
        assert!((qp.value - target).abs() < (coarse.value - target).abs());
    }

    #[test]
    fn qp_descent_and_formula_agree_without_delay() {
        let k = Knobs::default();
        let inst = scalar_instance(&k);
        let n = inst.space.grid.last_main_node();
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        let prob = lq_to_problem(&inst).unwrap();
        let ens = det_ens(&inst);

        let opts = DescentOpts {
            max_iter: 800,
            tol_rel: 1e-6,
            tol_abs: 1e-10,
            ..Default::default()
        };
        let trace =
            projected_gradient_descent(&prob, &inst.u0, &opts, &CondExp::Identity, &ens).unwrap();
        let scale = 1.0 + sup_diff_main(&qp.u, &StatePath::zeros(qp.u.first_node(), n, 1), n);
        assert!(
            sup_diff_main(&trace.u, &qp.u, n - 1) <= 1e-4 * scale,
            "descent vs qp: {}",
            sup_diff_main(&trace.u, &qp.u, n - 1)
        );
        assert!((trace.j - qp.value).abs() < 1e-6 * (1.0 + qp.value.abs()));

        // The QP argmin is a fixed point of the stationarity formula.
        let cand = solve_candidate(&prob, &qp.u, &CondExp::Identity, &ens).unwrap();
        let adj = solve_adjoint(&prob, &cand, &CondExp::Identity, &ens).unwrap();
        let grad = smp_gradient(&prob, &cand, &adj, &CondExp::Identity).unwrap();
        assert!(grad.residual < 1e-9, "residual {}", grad.residual);
        let cf =
            lq_closed_form_control(&inst, &qp.u, &adj, &cand.k, &CondExp::Identity, None).unwrap();
        assert!(
            sup_diff_main(&cf.mean, &qp.u, n - 1) < 1e-9,
            "formula vs qp: {}",
            sup_diff_main(&cf.mean, &qp.u, n - 1)
        );

        // And the damped sweep finds it from zero.
        let fp = lq_fixed_point(&inst, &inst.u0, 0.5, 80, 1e-12, &CondExp::Identity, &ens).unwrap();
        assert!(
            sup_diff_main(&fp.u, &qp.u, n - 1) < 1e-6,
            "sweep vs qp: {}",
            sup_diff_main(&fp.u, &qp.u, n - 1)
        );
    }

    #[test]
    fn qp_handles_delayed_control_and_history() {
        let mut k = Knobs::default();
        k.delay = 0.25;
        k.mu1 = vec![(-4, 1.0)];
        k.a_loc = -0.3;
        k.u_hist = 0.3;
        k.phi_w = 0.4;
        let inst = scalar_instance(&k);
        let n = inst.space.grid.last_main_node();
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        assert_eq!(qp.dead_nodes, vec![12, 13, 14, 15]);
        for &node in &qp.dead_nodes {
            assert_eq!(qp.u.at(node)[0], inst.u0.at(node)[0]);
        }
        assert!((qp.value - qp.predicted_value).abs() < 1e-10 * (1.0 + qp.value.abs()));

        let prob = lq_to_problem(&inst).unwrap();
        let ens = det_ens(&inst);
        let opts = DescentOpts {
            max_iter: 800,
            tol_rel: 1e-6,
            tol_abs: 1e-10,
            ..Default::default()
        };
        let trace =
            projected_gradient_descent(&prob, &inst.u0, &opts, &CondExp::Identity, &ens).unwrap();
        assert!(
            sup_diff_main(&trace.u, &qp.u, n - 1) <= 1e-4,
            "descent vs qp: {}",
            sup_diff_main(&trace.u, &qp.u, n - 1)
        );
    }

    #[test]
    fn qp_discounted_stage_and_interior_terminal_match_descent() {
        let mut k = Knobs::default();
        k.n_steps = 12;
        k.delay = 0.25;
        k.g1 = -0.5;
        k.f_w = 0.8;
        k.phi_w = 0.5;
        k.a_loc = -0.2;
        k.mu2 = vec![(0, 0.6), (-2, 0.4)];
        let inst = scalar_instance(&k);
        let n = inst.space.grid.last_main_node();
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        let prob = lq_to_problem(&inst).unwrap();
        let ens = det_ens(&inst);
        let opts = DescentOpts {
            max_iter: 800,
            tol_rel: 1e-6,
            tol_abs: 1e-10,
            ..Default::default()
        };
        let trace =
            projected_gradient_descent(&prob, &inst.u0, &opts, &CondExp::Identity, &ens).unwrap();
        assert!(
            sup_diff_main(&trace.u, &qp.u, n - 1) <= 1e-4,
            "descent vs qp: {}",
            sup_diff_main(&trace.u, &qp.u, n - 1)
        );
        assert!((trace.j - qp.value).abs() < 1e-6 * (1.0 + qp.value.abs()));

        // The discounting drives the cost weight away from -1, so this
        // exercises the weight divisor: the QP argmin must still be an
        // exact fixed point of the formula.
        let cand = solve_candidate(&prob, &qp.u, &CondExp::Identity, &ens).unwrap();
        let adj = solve_adjoint(&prob, &cand, &CondExp::Identity, &ens).unwrap();
        let cf =
            lq_closed_form_control(&inst, &qp.u, &adj, &cand.k, &CondExp::Identity, None).unwrap();
        assert!(
            sup_diff_main(&cf.mean, &qp.u, n - 1) < 1e-9,
            "formula vs qp: {}",
            sup_diff_main(&cf.mean, &qp.u, n - 1)
        );
        assert!((cand.k[0].at(n)[0] + 1.0).abs() > 0.05, "weight should move off -1");
    }

    #[test]
    fn qp_scaling_leaves_argmin_fixed_and_scales_value() {
        let mut k = Knobs::default();
        k.delay = 0.25;
        k.mu1 = vec![(-4, 1.0)];
        k.u_hist = 0.3;
        k.phi_w = 0.4;
        let base = lq_bruteforce_deterministic(&scalar_instance(&k)).unwrap();
        let c = 3.7;
        let mut inst = scalar_instance(&k);
        inst.f_mat = Arc::new(move |_| DMatrix::from_element(1, 1, c));
        inst.n_mat = Arc::new(move |_| DMatrix::from_element(1, 1, c));
        inst.phi = DMatrix::from_element(1, 1, 0.4 * c);
        let scaled = lq_bruteforce_deterministic(&inst).unwrap();
        let n = inst.space.grid.last_main_node();
        assert!(sup_diff_main(&scaled.u, &base.u, n) < 1e-12);
        assert!((scaled.value - c * base.value).abs() < 1e-12 * (1.0 + scaled.value.abs()));
    }

    #[test]
    fn certificate_flags_convexity() {
        let mut k = Knobs::default();
        k.a_loc = -0.4;
        k.f_w = 0.7;
        k.phi_w = 0.2;
        let inst = scalar_instance(&k);
        let cert = lq_certificate(&inst, 40, 7).unwrap();
        assert!(cert.passes(1e-9));
        assert!((cert.epsilon() - 1.0).abs() < 1e-14);
        assert!((cert.f_min_eig - 0.7).abs() < 1e-14);

        let mut flat = scalar_instance(&k);
        flat.n_mat = Arc::new(|_| DMatrix::zeros(1, 1));
        let cert2 = lq_certificate(&flat, 40, 7).unwrap();
        assert!(!cert2.passes(1e-9));
    }

    #[test]
    fn bruteforce_rejects_noise_and_oversize() {
        let mut k = Knobs::default();
        let inst = scalar_instance(&k);
        let mut noisy = inst.clone();
        noisy.space.qw = QWienerConfig::new(vec![0.8]).unwrap();
        noisy.d_mats = Arc::new(|_| vec![DMatrix::from_element(1, 1, 0.2)]);
        assert!(lq_bruteforce_deterministic(&noisy).is_err());

        k.n_steps = 2048;
        let big = scalar_instance(&k);
        assert!(lq_bruteforce_deterministic(&big).is_err());
    }
}
