//! Built-in experiment scenarios, the runner, and artifact emission.
//!
//! Three scenarios cover the toolkit end to end:
//!
//! * `heat_spde` — spectral truncation of a controlled heat equation on a
//!   periodic interval with first-order noise, delayed drift/diffusion
//!   reads and a delayed control measure; quadratic cost, so it is carried
//!   as a linear-quadratic instance. Mode `j` gets the Sobolev weight
//!   `sqrt(1 + (pi j)^2)`, the stiffness `-(pi j)^2` rides the implicit
//!   side, and the noise gains are sized so the dissipativity balance
//!   holds with margin.
//! * `lq_basic` — small dense linear-quadratic instance with delayed
//!   state reads, recursive cost loads on `y` and `z`, and a two-atom
//!   terminal measure. Its deterministic degenerate form (`noise_scale:
//!   0`) is the quadratic-program oracle workhorse.
//! * `nonlinear_delay` — scalar dynamics with a smooth nonlinear delayed
//!   drift and state-dependent diffusion, for derivative checks away from
//!   the linear-quadratic world.
//!
//! A run writes plain CSV artifacts plus one JSON manifest embedding the
//! full config and its hash; rerunning the same config and seed
//! reproduces the files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::backward::{energy_identity_check, CostSpec, EnergyParts};
use crate::config::{atoms_to_measure, ExperimentConfig};
use crate::error::{Error, Result};
use crate::forward::{CoefficientSet, ForwardModel};
use crate::grid::TimeGrid;
use crate::lq::{lq_to_problem, LqInstance};
use crate::measure::FiniteMeasure;
use crate::noise::{sample_noise, NoiseEnsemble};
use crate::operators::OperatorPair;
use crate::path_calculus::{change_of_variables_check, duality_residual, random_instance};
use crate::paths::StatePath;
use crate::regression::CondExp;
use crate::smp::{
    fd_gradient_check, projected_gradient_descent, ControlConstraint, ControlProblem,
    DescentTrace, FdReport,
};
use crate::spaces::{GelfandTriple, ModelSpace, QWienerConfig};

/// A scenario lowered to the generic control problem, with everything the
/// runner needs.
pub struct BuiltScenario {
    pub name: String,
    pub problem: ControlProblem,
    /// Present when the scenario is linear-quadratic; enables the oracle
    /// solvers.
    pub lq: Option<LqInstance>,
    pub u_start: StatePath,
    pub mode: CondExp,
    pub ens: NoiseEnsemble,
}

pub fn build_scenario(cfg: &ExperimentConfig) -> Result<BuiltScenario> {
    cfg.validate()?;
    let (problem, lq) = match cfg.scenario.as_str() {
        "lq_basic" => {
            let inst = lq_basic_instance(cfg)?;
            (lq_to_problem(&inst)?, Some(inst))
        }
        "heat_spde" => {
            let inst = heat_spde_instance(cfg)?;
            (lq_to_problem(&inst)?, Some(inst))
        }
        "nonlinear_delay" => (nonlinear_delay_problem(cfg)?, None),
        other => {
            return Err(Error::validation(format!(
                "scenario `{other}`: not in the registry"
            )))
        }
    };
    let grid = &problem.model.space.grid;
    let n_modes = problem.model.space.qw.n_modes();
    let ens = sample_noise(grid, n_modes, cfg.mc.n_paths, cfg.mc.seed)?;
    let u_start = StatePath::zeros(
        grid.first_node(),
        grid.last_main_node(),
        problem.cost.control_dim,
    );
    Ok(BuiltScenario {
        name: cfg.scenario.clone(),
        problem,
        lq,
        u_start,
        mode: cfg.regression.to_cond_exp(),
        ens,
    })
}

fn scaled_eigenvalues(base: &[f64], scale: f64, n_modes: usize) -> Vec<f64> {
    (0..n_modes)
        .map(|l| scale * base.get(l).copied().unwrap_or(base[base.len() - 1] * 0.5))
        .collect()
}

fn delay_atom(grid: &TimeGrid) -> FiniteMeasure {
    if grid.k_steps() == 0 {
        FiniteMeasure::dirac_now()
    } else {
        FiniteMeasure::new(vec![(-(grid.k_steps() as i64), 1.0)], grid)
            .expect("full-delay atom is grid-aligned")
    }
}

fn measure_or(
    atoms: &Option<Vec<crate::config::AtomConfig>>,
    grid: &TimeGrid,
    what: &str,
    fallback: impl FnOnce() -> FiniteMeasure,
) -> Result<FiniteMeasure> {
    match atoms {
        Some(list) => atoms_to_measure(list, grid, what),
        None => Ok(fallback()),
    }
}

/// Dense stable linear-quadratic instance: two-dimensional state, one
/// control, one noise mode by default; delayed drift and diffusion reads
/// through a full-delay atom, split terminal measure. The stage cost leaves
/// the running value and its noise loadings alone, so the cost weight stays
/// at `-1` and the stationarity formula carries no extra factor; discounted
/// variants are exercised by dedicated tests instead.
pub fn lq_basic_instance(cfg: &ExperimentConfig) -> Result<LqInstance> {
    let grid = cfg.grid.build()?;
    let d = cfg.dims.state.unwrap_or(2);
    let m = cfg.dims.control.unwrap_or(1);
    let n_modes = cfg.dims.noise_modes.unwrap_or(1);
    let lam = scaled_eigenvalues(&[0.5, 0.25], cfg.coefficients.noise_scale, n_modes);
    let space = ModelSpace {
        grid: grid.clone(),
        triple: GelfandTriple::trivial(d),
        qw: QWienerConfig::new(lam)?,
    };

    let mut a = DMatrix::zeros(d, d);
    for i in 0..d {
        a[(i, i)] = -(0.6 + 0.2 * i as f64);
        if i + 1 < d {
            a[(i, i + 1)] = 0.15;
        }
    }
    let bmode: Vec<DMatrix<f64>> = (0..n_modes)
        .map(|l| DMatrix::identity(d, d) * (0.2 / (l as f64 + 1.0)))
        .collect();
    let ops = OperatorPair::constant(a, bmode, 0.05, 2.0, 10.0);

    let atoms = delay_atom(&grid);
    let gain_a1 = cfg.coefficients.drift_delay_gain;
    let a1 = crate::path_calculus::KernelRepresentation::from_fn(
        &grid,
        atoms.clone(),
        d,
        d,
        |_, _, _| DMatrix::identity(d, d) * gain_a1,
    )?;
    let gain_b1 = cfg.coefficients.diffusion_delay_gain;
    let b1 = (0..n_modes)
        .map(|l| {
            crate::path_calculus::KernelRepresentation::from_fn(
                &grid,
                atoms.clone(),
                d,
                d,
                |_, _, _| DMatrix::identity(d, d) * (gain_b1 / (l as f64 + 1.0)),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let c = DMatrix::from_fn(d, m, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
    let dmat: Vec<DMatrix<f64>> = (0..n_modes)
        .map(|l| DMatrix::from_fn(d, m, |i, j| if i == j { 0.15 / (l as f64 + 1.0) } else { 0.0 }))
        .collect();
    let f = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / (1.0 + i as f64) } else { 0.0 });
    let nw = cfg.coefficients.control_penalty;
    let nmat = DMatrix::identity(m, m) * nw;

    let k_node = grid.k_steps() as i64;
    let mu1 = measure_or(&cfg.measures.mu1, &grid, "mu1", FiniteMeasure::dirac_now)?;
    let mu2 = measure_or(&cfg.measures.mu2, &grid, "mu2", || {
        if k_node == 0 {
            FiniteMeasure::dirac_now()
        } else {
            FiniteMeasure::new(vec![(0, 0.5), (-k_node, 0.5)], &grid)
                .expect("terminal atoms are grid-aligned")
        }
    })?;

    let gamma = StatePath::from_fn(grid.first_node(), 0, d, |_, i| 1.0 / (1.0 + i as f64));
    let u0 = StatePath::zeros(grid.first_node(), grid.last_main_node(), m);

    Ok(LqInstance {
        space,
        ops,
        a1,
        b1,
        c_mat: Arc::new(move |_| c.clone()),
        d_mats: Arc::new(move |_| dmat.clone()),
        f_mat: Arc::new(move |_| f.clone()),
        g1: Arc::new(|_| 0.0),
        g2: Arc::new(move |_| DVector::zeros(n_modes)),
        n_mat: Arc::new(move |_| nmat.clone()),
        phi: DMatrix::identity(d, d) * 0.6,
        control_dim: m,
        mu1,
        mu2,
        gamma,
        u0,
    })
}

/// Spectral heat equation surrogate: mode `j` (one-based) carries the
/// Sobolev weight `sqrt(1 + (pi j)^2)`, stiffness `-(pi j)^2`, and a
/// first-order noise gain `beta pi j` per mode with
/// `sum_l lambda_l beta^2 = 0.5`, inside the dissipativity margin.
pub fn heat_spde_instance(cfg: &ExperimentConfig) -> Result<LqInstance> {
    let grid = cfg.grid.build()?;
    let d = cfg.dims.state.unwrap_or(6);
    let m = cfg.dims.control.unwrap_or(2);
    let n_modes = cfg.dims.noise_modes.unwrap_or(2);
    let lam = scaled_eigenvalues(&[0.6, 0.3], cfg.coefficients.noise_scale, n_modes);
    let freq: Vec<f64> = (0..d)
        .map(|j| std::f64::consts::PI * (j as f64 + 1.0))
        .collect();
    let weights: Vec<f64> = freq.iter().map(|w| (1.0 + w * w).sqrt()).collect();
    let space = ModelSpace {
        grid: grid.clone(),
        triple: GelfandTriple::new(weights)?,
        qw: QWienerConfig::new(lam.clone())?,
    };

    let a = DMatrix::from_fn(d, d, |i, j| if i == j { -freq[i] * freq[i] } else { 0.0 });
    // Size the shared first-order gain so the live modes stay inside the
    // balance sum_l lambda_l beta^2 <= 0.5 at the configured noise scale.
    let live: f64 = lam.iter().sum();
    let beta = if live > 0.0 { (0.5 / live).sqrt() } else { 0.0 };
    let bmode: Vec<DMatrix<f64>> = (0..n_modes)
        .map(|_| DMatrix::from_fn(d, d, |i, j| if i == j { beta * freq[i] } else { 0.0 }))
        .collect();
    let ops = OperatorPair::constant(a, bmode, 0.5, 1.0, 5.0);

    let atoms = delay_atom(&grid);
    let gain_a1 = cfg.coefficients.drift_delay_gain;
    let a1 = crate::path_calculus::KernelRepresentation::from_fn(
        &grid,
        atoms.clone(),
        d,
        d,
        |_, _, _| DMatrix::from_fn(d, d, |i, j| if i == j { gain_a1 / (1.0 + i as f64) } else { 0.0 }),
    )?;
    let gain_b1 = cfg.coefficients.diffusion_delay_gain;
    let b1 = (0..n_modes)
        .map(|l| {
            crate::path_calculus::KernelRepresentation::from_fn(
                &grid,
                atoms.clone(),
                d,
                d,
                |_, _, _| {
                    DMatrix::from_fn(d, d, |i, j| {
                        if i == j {
                            gain_b1 / ((1.0 + i as f64) * (l as f64 + 1.0))
                        } else {
                            0.0
                        }
                    })
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;

    // Control forces the lowest spatial modes.
    let c = DMatrix::from_fn(d, m, |i, j| if i == j { 1.0 } else { 0.0 });
    let dmat: Vec<DMatrix<f64>> = (0..n_modes).map(|_| DMatrix::zeros(d, m)).collect();
    let nw = cfg.coefficients.control_penalty;

    let k_node = grid.k_steps() as i64;
    let mu1 = measure_or(&cfg.measures.mu1, &grid, "mu1", || {
        if k_node == 0 {
            FiniteMeasure::dirac_now()
        } else {
            FiniteMeasure::new(vec![(0, 0.6), (-k_node, 0.4)], &grid)
                .expect("control atoms are grid-aligned")
        }
    })?;
    let mu2 = measure_or(&cfg.measures.mu2, &grid, "mu2", FiniteMeasure::dirac_now)?;

    let gamma = StatePath::from_fn(grid.first_node(), 0, d, |_, j| {
        1.0 / ((1.0 + j as f64) * (1.0 + j as f64))
    });
    let u0 = StatePath::zeros(grid.first_node(), grid.last_main_node(), m);

    Ok(LqInstance {
        space,
        ops,
        a1,
        b1,
        c_mat: Arc::new(move |_| c.clone()),
        d_mats: Arc::new(move |_| dmat.clone()),
        f_mat: Arc::new(move |_| DMatrix::identity(d, d) * 0.5),
        g1: Arc::new(|_| 0.0),
        g2: Arc::new(move |_| DVector::zeros(n_modes)),
        n_mat: Arc::new(move |_| DMatrix::identity(m, m) * nw),
        phi: DMatrix::identity(d, d) * 0.25,
        control_dim: m,
        mu1,
        mu2,
        gamma,
        u0,
    })
}

/// Scalar dynamics with a smooth delayed drift `sin` read and a bounded
/// state-dependent diffusion; quadratic cost. Exercises the machinery off
/// the linear-quadratic path.
pub fn nonlinear_delay_problem(cfg: &ExperimentConfig) -> Result<ControlProblem> {
    let grid = cfg.grid.build()?;
    if cfg.dims.state.unwrap_or(1) != 1 || cfg.dims.control.unwrap_or(1) != 1 {
        return Err(Error::validation(
            "nonlinear_delay: scalar state and control only",
        ));
    }
    let n_modes = cfg.dims.noise_modes.unwrap_or(1);
    let lam = scaled_eigenvalues(&[0.4, 0.2], cfg.coefficients.noise_scale, n_modes);
    let space = ModelSpace {
        grid: grid.clone(),
        triple: GelfandTriple::trivial(1),
        qw: QWienerConfig::new(lam.clone())?,
    };
    let ops = OperatorPair::constant(
        DMatrix::from_element(1, 1, -0.5),
        (0..n_modes)
            .map(|l| DMatrix::from_element(1, 1, 0.2 / (l as f64 + 1.0)))
            .collect(),
        0.05,
        2.0,
        10.0,
    );

    let k_node = grid.k_steps() as i64;
    let state_atoms = if k_node == 0 {
        FiniteMeasure::dirac_now()
    } else {
        FiniteMeasure::new(vec![(0, 1.0), (-k_node, 1.0)], &grid)
            .expect("state atoms are grid-aligned")
    };
    // Index the now/delayed reads once; the measure keeps atoms sorted.
    let offsets = state_atoms.offsets().to_vec();
    let idx_now = offsets.iter().position(|&o| o == 0).expect("now atom");
    let idx_del = offsets.iter().position(|&o| o == -k_node).expect("delayed atom");

    let c1 = cfg.coefficients.drift_delay_gain;
    let s1 = 0.25;
    let s0 = 0.1;
    let n_atoms = offsets.len();

    let b = Arc::new(move |_t: i64, reads: &[DVector<f64>], v: &DVector<f64>| {
        DVector::from_element(1, c1 * reads[idx_del][0].sin() + v[0])
    });
    let db_dx = Arc::new(move |_t: i64, reads: &[DVector<f64>], _v: &DVector<f64>| {
        let mut out = vec![DMatrix::zeros(1, 1); n_atoms];
        out[idx_del][(0, 0)] = c1 * reads[idx_del][0].cos();
        out
    });
    let db_dv = Arc::new(|_t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| {
        DMatrix::from_element(1, 1, 1.0)
    });
    let sigma = Arc::new(move |_t: i64, reads: &[DVector<f64>], _v: &DVector<f64>| {
        let base = s0 + s1 * reads[idx_now][0].sin();
        DMatrix::from_fn(1, n_modes, |_, l| base / (l as f64 + 1.0))
    });
    let dsigma_dx = Arc::new(move |_t: i64, reads: &[DVector<f64>], _v: &DVector<f64>| {
        let slope = s1 * reads[idx_now][0].cos();
        (0..n_atoms)
            .map(|j| {
                (0..n_modes)
                    .map(|l| {
                        let v = if j == idx_now { slope / (l as f64 + 1.0) } else { 0.0 };
                        DMatrix::from_element(1, 1, v)
                    })
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    });
    let dsigma_dv = Arc::new(move |_t: i64, _r: &[DVector<f64>], _v: &DVector<f64>| {
        vec![DMatrix::zeros(1, 1); n_modes]
    });
    let hs: f64 = lam
        .iter()
        .enumerate()
        .map(|(l, ll)| ll * s1 * s1 / ((l as f64 + 1.0) * (l as f64 + 1.0)))
        .sum();
    let coeffs = CoefficientSet {
        dim: 1,
        n_modes,
        control_dim: 1,
        state_atoms,
        b,
        sigma,
        db_dx,
        db_dv,
        dsigma_dx,
        dsigma_dv,
        lipschitz: c1 * c1 + hs + 1e-9,
    };

    let cost = CostSpec {
        control_dim: 1,
        n_modes,
        x_atoms: FiniteMeasure::dirac_now(),
        f: Arc::new(|_t, reads: &[DVector<f64>], _y, _z: &DVector<f64>, v: &DVector<f64>| {
            reads[0][0] * reads[0][0] + v[0] * v[0]
        }),
        h: Arc::new(|x1: &DVector<f64>| 0.5 * x1[0] * x1[0]),
        df_dx: Arc::new(|_t, reads: &[DVector<f64>], _y, _z: &DVector<f64>, _v: &DVector<f64>| {
            vec![DVector::from_element(1, 2.0 * reads[0][0])]
        }),
        df_dy: Arc::new(|_t, _r: &[DVector<f64>], _y, _z: &DVector<f64>, _v: &DVector<f64>| 0.0),
        df_dz: Arc::new(move |_t, _r: &[DVector<f64>], _y, _z: &DVector<f64>, _v: &DVector<f64>| {
            DVector::zeros(n_modes)
        }),
        df_dv: Arc::new(|_t, _r: &[DVector<f64>], _y, _z: &DVector<f64>, v: &DVector<f64>| {
            v * 2.0
        }),
        dh_dx: Arc::new(|x1: &DVector<f64>| x1.clone()),
    };

    let mu1 = measure_or(&cfg.measures.mu1, &grid, "mu1", FiniteMeasure::dirac_now)?;
    let mu2 = measure_or(&cfg.measures.mu2, &grid, "mu2", FiniteMeasure::dirac_now)?;
    Ok(ControlProblem {
        model: ForwardModel {
            space,
            ops,
            coeffs,
            mu1,
        },
        cost,
        mu2,
        gamma: StatePath::constant(grid.first_node(), 0, &[0.8]),
        constraint: ControlConstraint::All,
    })
}

/// One row of the identity summary table.
#[derive(Debug, Clone)]
pub struct IdentityRow {
    pub name: String,
    pub worst_residual: f64,
    pub threshold: f64,
}

impl IdentityRow {
    pub fn passes(&self) -> bool {
        self.worst_residual <= self.threshold
    }
}

/// Randomized duality, change-of-variables, adjoint-formula and energy
/// residuals at desk scale. Deterministic in the seed.
pub fn identity_rows(seed: u64, n_instances: usize) -> Result<Vec<IdentityRow>> {
    let grid = crate::grid::build_grid(1.0, 0.25, 16)?;
    let k = grid.k_steps() as i64;
    let n = grid.last_main_node();

    let mut worst_dual = 0.0f64;
    let mut worst_adj = 0.0f64;
    for i in 0..n_instances {
        let inst = random_instance(&grid, 2, 3, seed.wrapping_add(i as u64 * 313))?;
        let check = duality_residual(&inst.rep, &grid, &inst.z, &inst.q)?;
        worst_dual = worst_dual.max(check.residual);
        let direct = inst.rep.apply_adjoint(&grid, &inst.q)?;
        let formula = inst.rep.apply_adjoint_formula(&grid, &inst.q)?;
        let mut scale = 0.0f64;
        for t in -k..=n {
            for c in 0..2 {
                scale = scale.max(direct.at(t)[c].abs());
            }
        }
        worst_adj = worst_adj.max(direct.max_abs_diff(&formula) / scale.max(1e-300));
    }

    let mut worst_cov = 0.0f64;
    for i in 0..n_instances {
        let s = seed.wrapping_add(997 * i as u64);
        let atoms = FiniteMeasure::new(
            vec![
                (-((crate::rng::keyed_u64(s, 0, 0, 0, 0) % (k as u64 + 1)) as i64), 0.7),
            ],
            &grid,
        )?;
        let kp = (crate::rng::keyed_u64(s, 1, 0, 0, 0) % (n as u64)) as i64;
        let check = change_of_variables_check(&grid, &atoms, kp, |t, off| {
            (0.3 * t as f64 + 0.1 * off as f64).cos()
        });
        worst_cov = worst_cov.max(check.residual);
    }

    let jumpy = EnergyParts {
        h0: DVector::from_vec(vec![1.0, -2.0]),
        drift: vec![DVector::zeros(2); grid.n_steps()],
        jumps: vec![
            (3, DVector::from_vec(vec![0.5, 1.0]), 2.0),
            (9, DVector::from_vec(vec![-1.0, 0.25]), -0.5),
        ],
        mart: vec![DVector::zeros(2); grid.n_steps()],
    };
    let energy = energy_identity_check(&jumpy, &grid)?;

    Ok(vec![
        IdentityRow {
            name: "duality".into(),
            worst_residual: worst_dual,
            threshold: 1e-12,
        },
        IdentityRow {
            name: "change_of_variables".into(),
            worst_residual: worst_cov,
            threshold: 1e-12,
        },
        IdentityRow {
            name: "adjoint_formula".into(),
            worst_residual: worst_adj,
            threshold: 1e-12,
        },
        IdentityRow {
            name: "energy_pure_jump".into(),
            worst_residual: energy.residual,
            threshold: 1e-12,
        },
    ])
}

/// Completed run: every artifact written, with the headline numbers kept
/// in memory for callers.
pub struct RunArtifacts {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    pub trace: DescentTrace,
    pub fd: FdReport,
    pub identities: Vec<IdentityRow>,
}

fn fmt(v: f64) -> String {
    format!("{v:.17e}")
}

fn write_file(dir: &Path, name: &str, content: &str, files: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, content)
        .map_err(|e| Error::validation(format!("cannot write {}: {e}", path.display())))?;
    files.push(path);
    Ok(())
}

#[derive(serde::Serialize)]
struct Manifest<'a> {
    scenario: &'a str,
    seed: u64,
    n_paths: usize,
    config_sha256: String,
    grid: GridSummary,
    j_final: f64,
    residual_final: f64,
    converged: bool,
    artifacts: Vec<String>,
    config: &'a ExperimentConfig,
}

#[derive(serde::Serialize)]
struct GridSummary {
    t_final: f64,
    delay: f64,
    n_steps: usize,
}

/// Run a scenario end to end and write `trace.csv`, `control.csv`,
/// `gradcheck.csv`, `identities.csv` and `manifest.json` under the config's
/// output directory (or `out_dir` when given).
pub fn run_scenario(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunArtifacts> {
    let sc = build_scenario(cfg)?;
    let grid = sc.problem.model.space.grid.clone();
    let opts = cfg.optimizer.to_opts();
    let trace = projected_gradient_descent(&sc.problem, &sc.u_start, &opts, &sc.mode, &sc.ens)
        .map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", sc.name)),
            Error::Numerical(m) => Error::Numerical(format!("{}: {m}", sc.name)),
        })?;

    // Derivative check along a fixed smooth direction from the starting
    // control, common noise across all evaluations.
    let m = sc.problem.cost.control_dim;
    let direction = StatePath::from_fn(grid.first_node(), grid.last_main_node(), m, |node, c| {
        if node < 0 || node >= grid.last_main_node() {
            0.0
        } else {
            (0.7 * grid.node_time(node) + 0.4 * c as f64).cos()
        }
    });
    let fd = fd_gradient_check(
        &sc.problem,
        &sc.u_start,
        &direction,
        &[1e-2, 1e-3],
        &sc.mode,
        &sc.ens,
    )?;

    let identities = identity_rows(cfg.mc.seed, 25)?;

    let dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
    fs::create_dir_all(&dir)
        .map_err(|e| Error::validation(format!("cannot create {}: {e}", dir.display())))?;
    let mut files = Vec::new();

    let mut trace_csv = String::from("iter,j,residual,step\n");
    for s in &trace.steps {
        trace_csv.push_str(&format!(
            "{},{},{},{}\n",
            s.iter,
            fmt(s.j),
            fmt(s.residual),
            fmt(s.step)
        ));
    }
    write_file(&dir, "trace.csv", &trace_csv, &mut files)?;

    let mut control_csv = String::from("t");
    for c in 0..m {
        control_csv.push_str(&format!(",u_{c}"));
    }
    control_csv.push('\n');
    for node in grid.first_node()..=grid.last_main_node() {
        control_csv.push_str(&fmt(grid.node_time(node)));
        for c in 0..m {
            control_csv.push(',');
            control_csv.push_str(&fmt(trace.u.at(node)[c]));
        }
        control_csv.push('\n');
    }
    write_file(&dir, "control.csv", &control_csv, &mut files)?;

    let mut grad_csv = String::from("rho,fd_slope,variational,pairing\n");
    for row in &fd.rows {
        grad_csv.push_str(&format!(
            "{},{},{},{}\n",
            fmt(row.rho),
            fmt(row.fd_slope),
            fmt(fd.variational),
            fmt(fd.pairing)
        ));
    }
    write_file(&dir, "gradcheck.csv", &grad_csv, &mut files)?;

    let mut id_csv = String::from("name,worst_residual,threshold,pass\n");
    for row in &identities {
        id_csv.push_str(&format!(
            "{},{},{},{}\n",
            row.name,
            fmt(row.worst_residual),
            fmt(row.threshold),
            row.passes()
        ));
    }
    write_file(&dir, "identities.csv", &id_csv, &mut files)?;

    let manifest = Manifest {
        scenario: &cfg.scenario,
        seed: cfg.mc.seed,
        n_paths: cfg.mc.n_paths,
        config_sha256: cfg.content_hash(),
        grid: GridSummary {
            t_final: cfg.grid.t_final,
            delay: cfg.grid.delay,
            n_steps: cfg.grid.n_steps,
        },
        j_final: trace.j,
        residual_final: trace.residual,
        converged: trace.converged,
        artifacts: files
            .iter()
            .map(|p| {
                p.file_name()
                    .expect("artifact paths always have names")
                    .to_string_lossy()
                    .into_owned()
            })
            .collect(),
        config: cfg,
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .expect("manifest serialization cannot fail")
        + "\n";
    write_file(&dir, "manifest.json", &manifest_json, &mut files)?;

    Ok(RunArtifacts {
        dir,
        files,
        trace,
        fd,
        identities,
    })
}

/// Recover the embedded config from a run manifest, for bit-exact reruns.
pub fn config_from_manifest(text: &str) -> Result<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| Error::validation(format!("manifest: {e}")))?;
    let cfg = value
        .get("config")
        .ok_or_else(|| Error::validation("manifest: missing `config` section"))?;
    crate::config::parse_config(&cfg.to_string())
}

/// Reshape run artifacts into long-format CSVs for plotting: one
/// `(quantity, index, value)` row per observation.
pub fn emit_plotdata(dir: &Path) -> Result<Vec<PathBuf>> {
    let read = |name: &str| -> Result<String> {
        fs::read_to_string(dir.join(name)).map_err(|e| {
            Error::validation(format!("missing artifact {}: {e}", dir.join(name).display()))
        })
    };
    let mut written = Vec::new();

    let trace = read("trace.csv")?;
    let mut out = String::from("quantity,iter,value\n");
    for line in trace.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::validation(format!("malformed trace row: {line}")));
        }
        out.push_str(&format!("j,{},{}\n", cols[0], cols[1]));
        out.push_str(&format!("residual,{},{}\n", cols[0], cols[2]));
        out.push_str(&format!("step,{},{}\n", cols[0], cols[3]));
    }
    let p = dir.join("plot_trace.csv");
    fs::write(&p, out).map_err(|e| Error::validation(format!("cannot write plot data: {e}")))?;
    written.push(p);

    let control = read("control.csv")?;
    let mut lines = control.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::validation("empty control.csv"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut out = String::from("quantity,t,value\n");
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(Error::validation(format!("malformed control row: {line}")));
        }
        for (name, val) in header.iter().zip(&cols).skip(1) {
            out.push_str(&format!("{name},{},{val}\n", cols[0]));
        }
    }
    let p = dir.join("plot_control.csv");
    fs::write(&p, out).map_err(|e| Error::validation(format!("cannot write plot data: {e}")))?;
    written.push(p);

    let grad = read("gradcheck.csv")?;
    let p = dir.join("plot_gradcheck.csv");
    fs::write(&p, grad).map_err(|e| Error::validation(format!("cannot write plot data: {e}")))?;
    written.push(p);

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;
    use crate::lq::{lq_bruteforce_deterministic, lq_certificate};
    use crate::smp::DescentOpts;

    fn small_cfg(scenario: &str, extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{ "scenario": "{scenario}",
                 "grid": {{ "t_final": 1.0, "delay": 0.25, "n_steps": 16 }},
                 "mc": {{ "n_paths": 32, "seed": 11 }}{extra} }}"#
        );
        parse_config(&text).unwrap()
    }

    #[test]
    fn registry_builds_all_scenarios() {
        for name in ["lq_basic", "heat_spde", "nonlinear_delay"] {
            let cfg = small_cfg(name, "");
            let sc = build_scenario(&cfg).unwrap();
            assert_eq!(sc.name, name);
            sc.problem.validate().unwrap();
            assert_eq!(sc.lq.is_some(), name != "nonlinear_delay");
        }
    }

    #[test]
    fn lq_basic_certificate_passes() {
        let cfg = small_cfg("lq_basic", "");
        let inst = lq_basic_instance(&cfg).unwrap();
        let cert = lq_certificate(&inst, 60, 5).unwrap();
        assert!(cert.passes(1e-9), "{cert:?}");
    }

    #[test]
    fn heat_certificate_passes_and_degenerate_matches_qp() {
        let extra = r#", "coefficients": { "noise_scale": 0.0 },
                        "regression": { "mode": "identity" },
                        "dims": { "state": 4 }"#;
        let cfg = small_cfg("heat_spde", extra);
        let inst = heat_spde_instance(&cfg).unwrap();
        let cert = lq_certificate(&inst, 60, 5).unwrap();
        assert!(cert.passes(1e-9), "{cert:?}");

        // Deterministic heat run must land on the quadratic-program oracle.
        let qp = lq_bruteforce_deterministic(&inst).unwrap();
        let prob = lq_to_problem(&inst).unwrap();
        let ens = NoiseEnsemble::zeros(&inst.space.grid, inst.n_modes(), 1);
        let opts = DescentOpts {
            max_iter: 600,
            tol_rel: 1e-6,
            tol_abs: 1e-10,
            ..Default::default()
        };
        let trace =
            projected_gradient_descent(&prob, &inst.u0, &opts, &CondExp::Identity, &ens).unwrap();
        let n = inst.space.grid.last_main_node();
        let mut sup = 0.0f64;
        for node in 0..n {
            for c in 0..inst.control_dim {
                sup = sup.max((trace.u.at(node)[c] - qp.u.at(node)[c]).abs());
            }
        }
        assert!(sup <= 2e-4, "heat vs qp sup diff {sup}");
        assert!((trace.j - qp.value).abs() < 1e-5 * (1.0 + qp.value.abs()));
    }

    #[test]
    fn noisy_heat_coercivity_margin_holds() {
        let cfg = small_cfg("heat_spde", "");
        let inst = heat_spde_instance(&cfg).unwrap();
        let cert = lq_certificate(&inst, 60, 5).unwrap();
        assert!(cert.passes(1e-9), "{cert:?}");
    }

    #[test]
    fn identity_rows_all_pass() {
        for row in identity_rows(3, 10).unwrap() {
            assert!(row.passes(), "{row:?}");
        }
    }

    #[test]
    fn run_writes_artifacts_and_rerun_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let extra = r#", "optimizer": { "max_iter": 4 }"#;
        let cfg = small_cfg("lq_basic", extra);
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let arts = run_scenario(&cfg, Some(&a)).unwrap();
        assert_eq!(arts.files.len(), 5);
        for row in &arts.identities {
            assert!(row.passes(), "{row:?}");
        }
        // J strictly decreases along accepted steps.
        let js: Vec<f64> = arts.trace.steps.iter().map(|s| s.j).collect();
        for w in js.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace not monotone: {js:?}");
        }

        run_scenario(&cfg, Some(&b)).unwrap();
        for name in ["trace.csv", "control.csv", "gradcheck.csv", "identities.csv", "manifest.json"] {
            let x = std::fs::read(a.join(name)).unwrap();
            let y = std::fs::read(b.join(name)).unwrap();
            assert_eq!(x, y, "artifact {name} differs between identical runs");
        }

        // Manifest embeds the config; a rerun from it is also identical.
        let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
        let cfg2 = config_from_manifest(&manifest).unwrap();
        let c = tmp.path().join("c");
        run_scenario(&cfg2, Some(&c)).unwrap();
        let x = std::fs::read(a.join("trace.csv")).unwrap();
        let y = std::fs::read(c.join("trace.csv")).unwrap();
        assert_eq!(x, y);

        let plots = emit_plotdata(&a).unwrap();
        assert_eq!(plots.len(), 3);
        let long = std::fs::read_to_string(a.join("plot_trace.csv")).unwrap();
        assert!(long.starts_with("quantity,iter,value\n"));
        assert!(long.lines().count() > 3);
    }

    #[test]
    fn nonlinear_scenario_derivatives_check_out() {
        // Identity conditioning keeps the adjoint an exact per-path
        // transpose even with state-dependent Jacobians.
        let extra = r#", "regression": { "mode": "identity" }"#;
        let cfg = small_cfg("nonlinear_delay", extra);
        let sc = build_scenario(&cfg).unwrap();
        let direction = StatePath::from_fn(
            sc.problem.model.space.grid.first_node(),
            sc.problem.model.space.grid.last_main_node(),
            1,
            |node, _| if node < 0 { 0.0 } else { (0.9 * node as f64).sin() },
        );
        let fd = fd_gradient_check(
            &sc.problem,
            &sc.u_start,
            &direction,
            &[1e-3, 1e-4],
            &sc.mode,
            &sc.ens,
        )
        .unwrap();
        let scale = fd.variational.abs().max(1e-12);
        assert!(
            (fd.pairing - fd.variational).abs() / scale < 1e-8,
            "pairing {} vs variational {}",
            fd.pairing,
            fd.variational
        );
        assert!(
            (fd.extrapolated - fd.variational).abs() / scale < 5e-2,
            "fd {} vs variational {}",
            fd.extrapolated,
            fd.variational
        );
    }
}
