//! Acceptance gate: twelve end-to-end checks over the whole pipeline, one
//! printed verdict line each. Run with `--nocapture` to see the lines for
//! passing checks; a failing check prints its line before panicking.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use psee_control::backward::{
    energy_identity_check, solve_absee, translate_running_terminal, BackwardData, BackwardProblem,
    EnergyParts, RunningTerminal,
};
use psee_control::config::parse_config;
use psee_control::forward::{
    picard_iterate, solve_forward, CoefficientSet, ForwardModel, ForwardSolution,
};
use psee_control::lq::{lq_bruteforce_deterministic, lq_certificate, lq_closed_form_control,
    lq_to_problem, LqInstance};
use psee_control::noise::{sample_noise, NoiseEnsemble};
use psee_control::operators::OperatorPair;
use psee_control::path_calculus::{
    change_of_variables_check, duality_residual, random_instance, KernelRepresentation,
};
use psee_control::regression::CondExp;
use psee_control::rng::{keyed_u64, keyed_uniform_sym};
use psee_control::scenarios::build_scenario;
use psee_control::smp::{
    fd_gradient_check, projected_gradient_descent, solve_adjoint, solve_candidate,
    sufficiency_certificate, DescentOpts,
};
use psee_control::{
    build_grid, FiniteMeasure, GelfandTriple, ModelSpace, QWienerConfig, StatePath, TimeGrid,
};

fn verdict(idx: usize, name: &str, pass: bool, detail: &str) {
    println!(
        "[{idx:>2}/12] {name}: {} ({detail})",
        if pass { "pass" } else { "FAIL" }
    );
    assert!(pass, "{name}: {detail}");
}

/// Least-squares slope of `log2(err)` against `log2(dt)`.
fn fit_slope(dts: &[f64], errs: &[f64]) -> f64 {
    let xs: Vec<f64> = dts.iter().map(|d| d.log2()).collect();
    let ys: Vec<f64> = errs.iter().map(|e| e.log2()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

fn l2_diff(a: &StatePath, b: &StatePath, last: i64, dim: usize, dt: f64) -> f64 {
    let mut acc = 0.0;
    for node in 0..last {
        for c in 0..dim {
            let d = a.at(node)[c] - b.at(node)[c];
            acc += d * d * dt;
        }
    }
    acc.sqrt()
}

fn l2_norm(a: &StatePath, last: i64, dim: usize, dt: f64) -> f64 {
    let mut acc = 0.0;
    for node in 0..last {
        for c in 0..dim {
            acc += a.at(node)[c] * a.at(node)[c] * dt;
        }
    }
    acc.sqrt()
}

fn sup_diff(a: &StatePath, b: &StatePath, last: i64, dim: usize) -> f64 {
    let mut worst = 0.0f64;
    for node in 0..=last {
        for c in 0..dim {
            worst = worst.max((a.at(node)[c] - b.at(node)[c]).abs());
        }
    }
    worst
}

#[test]
fn a01_discrete_duality_on_random_instances() {
    let grids = [
        build_grid(1.0, 0.5, 16).unwrap(),
        build_grid(1.0, 0.25, 8).unwrap(),
        build_grid(2.0, 1.0, 10).unwrap(),
    ];
    let dims = [(1usize, 1usize), (2, 3), (3, 2), (2, 2)];
    let mut worst = 0.0f64;
    for i in 0..200u64 {
        let grid = &grids[(i % 3) as usize];
        let (de, df) = dims[(i % 4) as usize];
        let inst = random_instance(grid, de, df, 9000 + i).unwrap();
        let check = duality_residual(&inst.rep, grid, &inst.z, &inst.q).unwrap();
        worst = worst.max(check.residual);
    }
    verdict(
        1,
        "discrete duality, 200 random instances",
        worst <= 1e-12,
        &format!("worst relative residual {worst:.3e}, threshold 1e-12"),
    );
}

#[test]
fn a02_change_of_variables_on_random_measures() {
    let grid = build_grid(1.0, 0.5, 16).unwrap();
    let n = grid.last_main_node();
    let mut worst = 0.0f64;
    for i in 0..200u64 {
        let n_atoms = 1 + (keyed_u64(i, 1, 0, 0, 0) % 3) as usize;
        let mut atoms = Vec::new();
        for a in 0..n_atoms {
            // Disjoint offset ranges keep the atoms distinct.
            let off = -((keyed_u64(i, 2, a as u64, 0, 0) % 3) as i64 + 3 * a as i64);
            let w = 0.1 + keyed_uniform_sym(i, 3, a as u64, 0, 0).abs();
            atoms.push((off, w));
        }
        let nu0 = FiniteMeasure::new(atoms, &grid).unwrap();
        let k_prime = (keyed_u64(i, 4, 0, 0, 0) % (n as u64 + 1)) as i64;
        let check = change_of_variables_check(&grid, &nu0, k_prime, |t, off| {
            keyed_uniform_sym(i, 5, t as u64, (off + 8) as u64, 0)
        });
        worst = worst.max(check.residual);
    }
    verdict(
        2,
        "change of variables, 200 random instances",
        worst <= 1e-12,
        &format!("worst relative residual {worst:.3e}, threshold 1e-12"),
    );
}

#[test]
fn a03_adjoint_formula_matches_transpose() {
    let grid = build_grid(1.0, 0.5, 16).unwrap();
    let k = grid.k_steps() as i64;
    let n = grid.last_main_node();
    let mut worst = 0.0f64;

    let mut check_rep = |rep: &KernelRepresentation, seed: u64| {
        let q = StatePath::from_fn(0, n, rep.dim_f(), |node, c| {
            keyed_uniform_sym(seed, 31, node as u64, c as u64, 0)
        });
        let direct = rep.apply_adjoint(&grid, &q).unwrap();
        let formula = rep.apply_adjoint_formula(&grid, &q).unwrap();
        let mut scale = 0.0f64;
        let mut diff = 0.0f64;
        for node in -k..=n {
            for c in 0..rep.dim_e() {
                scale = scale.max(direct.at(node)[c].abs());
                diff = diff.max((direct.at(node)[c] - formula.at(node)[c]).abs());
            }
        }
        worst = worst.max(diff / scale.max(1e-300));
    };

    for i in 0..92u64 {
        let inst = random_instance(&grid, 2, 2, 7000 + i).unwrap();
        check_rep(&inst.rep, 7000 + i);
    }
    // Preset measures: a pure full-delay read and a trapezoid rule.
    for i in 0..4u64 {
        let nu = if i % 2 == 0 {
            FiniteMeasure::dirac_full_delay(&grid)
        } else {
            FiniteMeasure::lebesgue_trapezoid(&grid).unwrap()
        };
        let rep = KernelRepresentation::from_fn(&grid, nu, 2, 3, |t, j, _| {
            DMatrix::from_fn(3, 2, |r, c| {
                keyed_uniform_sym(8000 + i, t as u64, j as u64, (r * 2 + c) as u64, 0)
            })
        })
        .unwrap();
        check_rep(&rep, 8000 + i);
        check_rep(&rep, 8100 + i);
    }
    verdict(
        3,
        "adjoint formula vs transpose, 100 instances",
        worst <= 1e-12,
        &format!("worst relative gap {worst:.3e}, threshold 1e-12"),
    );
}

/// Scalar model with a delayed sine drift; the delay sits at a quarter of
/// the horizon so every refinement level keeps it grid-aligned.
fn delayed_sine_model(n_steps: usize) -> ForwardModel {
    let grid = build_grid(1.0, 0.25, n_steps).unwrap();
    let k = grid.k_steps() as i64;
    let mut coeffs = CoefficientSet::zero(1, 1, 1);
    coeffs.state_atoms = FiniteMeasure::new(vec![(-k, 1.0), (0, 1.0)], &grid).unwrap();
    coeffs.b = Arc::new(|_, reads, _| {
        DVector::from_element(1, 0.5 * reads[0][0].sin() + 0.2 * reads[1][0])
    });
    coeffs.lipschitz = 0.7;
    ForwardModel {
        space: ModelSpace {
            grid,
            triple: GelfandTriple::trivial(1),
            qw: QWienerConfig::new(vec![0.0]).unwrap(),
        },
        ops: OperatorPair::constant(
            DMatrix::from_element(1, 1, -0.8),
            vec![DMatrix::zeros(1, 1)],
            1.0,
            2.6,
            1.0,
        ),
        coeffs,
        mu1: FiniteMeasure::dirac_now(),
    }
}

/// Two-dimensional linear model with non-commuting mode operators, no
/// drift; the roughness all comes from the multiplicative noise.
fn rough_linear_model(n_steps: usize) -> ForwardModel {
    let grid = build_grid(1.0, 0.25, n_steps).unwrap();
    ForwardModel {
        space: ModelSpace {
            grid,
            triple: GelfandTriple::trivial(2),
            qw: QWienerConfig::new(vec![0.6, 0.4]).unwrap(),
        },
        ops: OperatorPair::constant(
            DMatrix::from_diagonal(&DVector::from_vec(vec![-0.5, -0.9])),
            vec![
                DMatrix::from_row_slice(2, 2, &[0.0, 0.8, 0.0, 0.0]),
                DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.7, 0.0]),
            ],
            0.5,
            3.0,
            1.5,
        ),
        coeffs: CoefficientSet::zero(2, 2, 1),
        mu1: FiniteMeasure::dirac_now(),
    }
}

fn terminal(sol: &ForwardSolution, path: usize, grid: &TimeGrid) -> DVector<f64> {
    DVector::from_column_slice(sol.paths[path].at(grid.last_main_node()))
}

#[test]
fn a04_forward_scheme_convergence_orders() {
    // Deterministic: error against a much finer reference decays first
    // order in the step size.
    let reference = {
        let model = delayed_sine_model(1024);
        let gamma = StatePath::constant(model.space.grid.first_node(), 0, &[1.0]);
        let u = StatePath::zeros(
            model.space.grid.first_node(),
            model.space.grid.last_main_node(),
            1,
        );
        let ens = NoiseEnsemble::zeros(&model.space.grid, 1, 1);
        let sol = solve_forward(&model, &u, &gamma, &ens).unwrap();
        terminal(&sol, 0, &model.space.grid)[0]
    };
    let mut dts = Vec::new();
    let mut errs = Vec::new();
    for n in [16usize, 32, 64, 128, 256] {
        let model = delayed_sine_model(n);
        let gamma = StatePath::constant(model.space.grid.first_node(), 0, &[1.0]);
        let u = StatePath::zeros(
            model.space.grid.first_node(),
            model.space.grid.last_main_node(),
            1,
        );
        let ens = NoiseEnsemble::zeros(&model.space.grid, 1, 1);
        let sol = solve_forward(&model, &u, &gamma, &ens).unwrap();
        dts.push(model.space.grid.dt());
        errs.push((terminal(&sol, 0, &model.space.grid)[0] - reference).abs());
    }
    let det_slope = fit_slope(&dts, &errs);

    // Stochastic: strong error under shared Brownian paths decays at one
    // half, measured by coarsening one fine ensemble.
    let n_paths = 256;
    let fine = sample_noise(&build_grid(1.0, 0.25, 512).unwrap(), 2, n_paths, 4242).unwrap();
    let ref_model = rough_linear_model(512);
    let gamma2 = StatePath::constant(ref_model.space.grid.first_node(), 0, &[1.0, 0.8]);
    let u2 = StatePath::zeros(
        ref_model.space.grid.first_node(),
        ref_model.space.grid.last_main_node(),
        1,
    );
    let ref_sol = solve_forward(&ref_model, &u2, &gamma2, &fine).unwrap();
    let ref_term: Vec<DVector<f64>> = (0..n_paths)
        .map(|p| terminal(&ref_sol, p, &ref_model.space.grid))
        .collect();
    let mut sdts = Vec::new();
    let mut serrs = Vec::new();
    for n in [8usize, 16, 32, 64, 128] {
        let model = rough_linear_model(n);
        let gamma = StatePath::constant(model.space.grid.first_node(), 0, &[1.0, 0.8]);
        let u = StatePath::zeros(
            model.space.grid.first_node(),
            model.space.grid.last_main_node(),
            1,
        );
        let ens = fine.coarsen(512 / n).unwrap();
        let sol = solve_forward(&model, &u, &gamma, &ens).unwrap();
        let mut acc = 0.0;
        for p in 0..n_paths {
            acc += (terminal(&sol, p, &model.space.grid) - &ref_term[p]).norm_squared();
        }
        sdts.push(model.space.grid.dt());
        serrs.push((acc / n_paths as f64).sqrt());
    }
    let strong_slope = fit_slope(&sdts, &serrs);

    let pass = (det_slope - 1.0).abs() <= 0.15 && (strong_slope - 0.5).abs() <= 0.15;
    verdict(
        4,
        "forward convergence orders",
        pass,
        &format!(
            "deterministic slope {det_slope:.3} (want 1.00 +/- 0.15), \
             strong slope {strong_slope:.3} (want 0.50 +/- 0.15)"
        ),
    );
}

/// Short-horizon scalar model with a delayed Lipschitz drift and a delayed
/// bounded diffusion.
fn contraction_model(with_noise: bool) -> ForwardModel {
    let grid = build_grid(0.25, 0.0625, 16).unwrap();
    let k = grid.k_steps() as i64;
    let mut coeffs = CoefficientSet::zero(1, 1, 1);
    coeffs.state_atoms = FiniteMeasure::new(vec![(-k, 1.0), (0, 1.0)], &grid).unwrap();
    coeffs.b = Arc::new(|_, reads, _| {
        DVector::from_element(1, 0.9 * reads[0][0].sin() + 0.3 * reads[1][0])
    });
    if with_noise {
        coeffs.sigma = Arc::new(|_, reads, _| DMatrix::from_element(1, 1, 0.25 * reads[0][0].cos()));
    }
    coeffs.lipschitz = 1.3;
    ForwardModel {
        space: ModelSpace {
            grid,
            triple: GelfandTriple::trivial(1),
            qw: QWienerConfig::new(vec![1.0]).unwrap(),
        },
        ops: OperatorPair::constant(
            DMatrix::from_element(1, 1, -0.4),
            vec![DMatrix::zeros(1, 1)],
            1.0,
            1.8,
            1.0,
        ),
        coeffs,
        mu1: FiniteMeasure::dirac_now(),
    }
}

#[test]
fn a05_fixed_point_iteration_contracts() {
    let mut details = Vec::new();
    let mut pass = true;
    for (label, with_noise, n_paths) in [("deterministic", false, 1), ("stochastic", true, 32)] {
        let model = contraction_model(with_noise);
        let grid = &model.space.grid;
        let gamma = StatePath::constant(grid.first_node(), 0, &[1.0]);
        let u = StatePath::zeros(grid.first_node(), grid.last_main_node(), 1);
        let ens = if with_noise {
            sample_noise(grid, 1, n_paths, 515).unwrap()
        } else {
            NoiseEnsemble::zeros(grid, 1, n_paths)
        };
        let report = picard_iterate(&model, &u, &gamma, &ens, 25).unwrap();
        let worst_ratio = report.ratios.iter().cloned().fold(0.0f64, f64::max);
        let direct = solve_forward(&model, &u, &gamma, &ens).unwrap();
        let gap = report.iterates.last().unwrap().max_abs_diff(&direct);
        pass = pass && worst_ratio <= 0.9 && gap <= 1e-8;
        details.push(format!(
            "{label}: worst ratio {worst_ratio:.3} (<= 0.9), fixed point gap {gap:.2e} (<= 1e-8)"
        ));
    }
    verdict(5, "fixed-point iteration contracts", pass, &details.join("; "));
}

/// Linear two-dimensional backward problem with live noise weights and a
/// generator reading the near future of both unknowns.
fn linear_backward_setup() -> (BackwardProblem, ModelSpace) {
    let grid = build_grid(1.0, 0.25, 8).unwrap();
    let space = ModelSpace {
        grid: grid.clone(),
        triple: GelfandTriple::trivial(2),
        qw: QWienerConfig::new(vec![0.7]).unwrap(),
    };
    let mut prob = BackwardProblem::trivial(&grid, 2, 1);
    prob.m_op = Arc::new(|tn| {
        DMatrix::from_row_slice(2, 2, &[-0.6, 0.1 * tn as f64, 0.05, -0.3])
    });
    prob.n_mode_mats =
        Arc::new(|_| vec![DMatrix::from_row_slice(2, 2, &[0.2, 0.0, -0.1, 0.3])]);
    prob.generator = Arc::new(|_, tn, vpsi, vq| vpsi.at(tn + 1) * 0.4 + vq.at(tn + 1) * 0.05);
    prob.lipschitz = 0.5;
    (prob, space)
}

#[test]
fn a06_backward_solver_degenerate_exactness() {
    let (prob, space) = linear_backward_setup();
    let grid = &space.grid;
    let n = grid.last_main_node();
    let k = grid.k_steps() as i64;
    let n_paths = 16;
    let ens = sample_noise(grid, 1, n_paths, 606).unwrap();

    // Zero data in, zero solution out.
    let zero = BackwardData::deterministic(
        n_paths,
        StatePath::zeros(n, n + k, 2),
        StatePath::zeros(n, n + k, 2),
        None,
    );
    let zsol = solve_absee(&prob, &space, &zero, &CondExp::Mean, None, &ens).unwrap();
    let mut znorm = 0.0f64;
    for pi in 0..n_paths {
        for node in 0..=n + k {
            for c in 0..2 {
                znorm = znorm.max(zsol.p[pi].at(node)[c].abs());
                znorm = znorm.max(zsol.q[pi].at(node)[c].abs());
            }
        }
    }

    // Doubling the data doubles the solution without any rounding drift:
    // every operation scales exactly under a power-of-two factor.
    let xi: Vec<StatePath> = (0..n_paths)
        .map(|pi| {
            StatePath::from_fn(n, n + k, 2, |node, c| {
                keyed_uniform_sym(660, pi as u64, node as u64, c as u64, 0)
            })
        })
        .collect();
    let eta: Vec<StatePath> = (0..n_paths)
        .map(|pi| {
            StatePath::from_fn(n, n + k, 2, |node, c| {
                0.3 * keyed_uniform_sym(661, pi as u64, node as u64, c as u64, 0)
            })
        })
        .collect();
    let data = BackwardData {
        xi: xi.clone(),
        eta: eta.clone(),
        zeta: None,
    };
    let scale = |paths: &[StatePath]| -> Vec<StatePath> {
        paths
            .iter()
            .map(|p| {
                let mut q = p.clone();
                for node in q.first_node()..=q.last_node() {
                    for v in q.at_mut(node) {
                        *v *= 2.0;
                    }
                }
                q
            })
            .collect()
    };
    let doubled = BackwardData {
        xi: scale(&xi),
        eta: scale(&eta),
        zeta: None,
    };
    let base = solve_absee(&prob, &space, &data, &CondExp::Mean, None, &ens).unwrap();
    let twice = solve_absee(&prob, &space, &doubled, &CondExp::Mean, None, &ens).unwrap();
    let mut hom_gap = 0.0f64;
    for pi in 0..n_paths {
        for node in 0..=n + k {
            for c in 0..2 {
                hom_gap = hom_gap.max((2.0 * base.p[pi].at(node)[c] - twice.p[pi].at(node)[c]).abs());
                hom_gap = hom_gap.max((2.0 * base.q[pi].at(node)[c] - twice.q[pi].at(node)[c]).abs());
            }
        }
    }

    // Single running jump against a hand recursion through the implicit
    // factor; one-dimensional so the solve is a plain division.
    let grid1 = build_grid(1.0, 0.25, 8).unwrap();
    let space1 = ModelSpace {
        grid: grid1.clone(),
        triple: GelfandTriple::trivial(1),
        qw: QWienerConfig::new(vec![0.0]).unwrap(),
    };
    let a = -0.6;
    let mut jprob = BackwardProblem::trivial(&grid1, 1, 1);
    jprob.m_op = Arc::new(move |_| DMatrix::from_element(1, 1, a));
    let tau = 5i64;
    let df = 1.0;
    let c = 0.8;
    jprob.running = RunningTerminal::from_jumps(&grid1, &[(tau, df)]).unwrap();
    let n1 = grid1.last_main_node();
    let k1 = grid1.k_steps() as i64;
    let jdata = BackwardData::deterministic(
        1,
        StatePath::zeros(n1, n1 + k1, 1),
        StatePath::zeros(n1, n1 + k1, 1),
        Some(StatePath::constant(1, n1, &[c])),
    );
    let jens = NoiseEnsemble::zeros(&grid1, 1, 1);
    let jsol = solve_absee(&jprob, &space1, &jdata, &CondExp::Identity, None, &jens).unwrap();
    let dt = grid1.dt();
    let mut hand = vec![0.0f64; (n1 + 1) as usize];
    let mut p_next = 0.0;
    for node in (0..n1).rev() {
        let jump = if node + 1 == tau { c * df } else { 0.0 };
        p_next = (p_next + jump) / (1.0 - dt * a);
        hand[node as usize] = p_next;
    }
    hand[n1 as usize] = 0.0;
    let mut jump_gap = 0.0f64;
    for node in 0..=n1 {
        jump_gap = jump_gap.max((jsol.p[0].at(node)[0] - hand[node as usize]).abs());
    }

    let pass = znorm <= 1e-14 && hom_gap == 0.0 && jump_gap <= 1e-14;
    verdict(
        6,
        "backward solver degenerate exactness",
        pass,
        &format!(
            "zero data sup {znorm:.1e} (<= 1e-14), doubling drift {hom_gap:.1e} (exact), \
             single-jump oracle gap {jump_gap:.1e} (<= 1e-14)"
        ),
    );
}

#[test]
fn a07_running_terminal_translation_round_trip() {
    let mut det_worst = 0.0f64;
    let mut stoch_worst_se = 0.0f64;
    let mut pass = true;
    for i in 0..20u64 {
        let stochastic = i >= 10;
        let grid = build_grid(1.0, 0.25, 8).unwrap();
        let space = ModelSpace {
            grid: grid.clone(),
            triple: GelfandTriple::trivial(2),
            qw: QWienerConfig::new(vec![0.7]).unwrap(),
        };
        let n = grid.last_main_node();
        let k = grid.k_steps() as i64;
        let m00 = -0.5 + 0.2 * keyed_uniform_sym(i, 70, 0, 0, 0);
        let m11 = -0.4 + 0.2 * keyed_uniform_sym(i, 70, 1, 0, 0);
        let m01 = 0.1 * keyed_uniform_sym(i, 70, 2, 0, 0);
        let g = 0.3 * keyed_uniform_sym(i, 71, 0, 0, 0);
        let mut prob = BackwardProblem::trivial(&grid, 2, 1);
        prob.m_op = Arc::new(move |_| DMatrix::from_row_slice(2, 2, &[m00, m01, 0.0, m11]));
        prob.n_mode_mats =
            Arc::new(|_| vec![DMatrix::from_row_slice(2, 2, &[0.25, 0.0, -0.1, 0.2])]);
        prob.generator = Arc::new(move |_, tn, vpsi, _| vpsi.at(tn + 1) * g);
        prob.lipschitz = g.abs();
        let j1 = 1 + (keyed_u64(i, 72, 0, 0, 0) % n as u64) as i64;
        let j2 = 1 + (keyed_u64(i, 72, 1, 0, 0) % n as u64) as i64;
        let w1 = keyed_uniform_sym(i, 73, 0, 0, 0);
        let w2 = keyed_uniform_sym(i, 73, 1, 0, 0);
        let jumps: Vec<(i64, f64)> = if j1 == j2 {
            vec![(j1, w1)]
        } else {
            vec![(j1, w1), (j2, w2)]
        };
        prob.running = RunningTerminal::from_jumps(&grid, &jumps).unwrap();

        let n_paths = if stochastic { 64 } else { 1 };
        // The running datum stays deterministic; only the terminal data
        // vary across paths.
        let zeta = StatePath::from_fn(1, n, 2, |node, c| {
            0.5 + 0.2 * keyed_uniform_sym(i, 74, node as u64, c as u64, 0)
        });
        let xi: Vec<StatePath> = (0..n_paths)
            .map(|pi| {
                StatePath::from_fn(n, n + k, 2, |node, c| {
                    keyed_uniform_sym(i, 75, pi as u64, (node - n) as u64, c as u64)
                })
            })
            .collect();
        let data = BackwardData {
            xi,
            eta: vec![StatePath::zeros(n, n + k, 2); n_paths],
            zeta: Some(vec![zeta; n_paths]),
        };
        let ens = if stochastic {
            sample_noise(&grid, 1, n_paths, 7700 + i).unwrap()
        } else {
            NoiseEnsemble::zeros(&grid, 1, n_paths)
        };
        let direct = solve_absee(&prob, &space, &data, &CondExp::Identity, None, &ens).unwrap();
        let tr = translate_running_terminal(&prob, &space, &data, n_paths).unwrap();
        let tsol = solve_absee(&tr.problem, &space, &tr.data, &CondExp::Identity, None, &ens).unwrap();
        let back = tr.back(&tsol, &grid);

        if stochastic {
            // The translated q-estimator sees the shifted target, so the
            // round trip differs by a mean-zero Monte Carlo term; the gap
            // must stay inside three standard errors componentwise.
            for c in 0..2 {
                let deltas: Vec<f64> = (0..n_paths)
                    .map(|pi| direct.p[pi].at(0)[c] - back.p[pi].at(0)[c])
                    .collect();
                let mean = deltas.iter().sum::<f64>() / n_paths as f64;
                let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
                    / (n_paths as f64 - 1.0);
                let se = (var / n_paths as f64).sqrt();
                let units = mean.abs() / se.max(1e-300);
                if mean.abs() > 3.0 * se + 1e-12 {
                    pass = false;
                }
                stoch_worst_se = stoch_worst_se.max(units.min(mean.abs() / 1e-12));
            }
        } else {
            let gap = direct.max_abs_diff(&back);
            det_worst = det_worst.max(gap);
            if gap > 1e-12 {
                pass = false;
            }
        }
    }
    verdict(
        7,
        "running-terminal translation round trip, 20 instances",
        pass,
        &format!(
            "deterministic worst {det_worst:.2e} (<= 1e-12), \
             stochastic worst {stoch_worst_se:.2} se (<= 3)"
        ),
    );
}

#[test]
fn a08_energy_identity_balances() {
    let grid = build_grid(1.0, 0.25, 8).unwrap();
    // Dyadic jump data: every product is exact, so the balance is bitwise.
    let dyadic = EnergyParts {
        h0: DVector::from_vec(vec![1.0, -2.0]),
        drift: vec![DVector::zeros(2); 8],
        jumps: vec![
            (3, DVector::from_vec(vec![0.5, 1.0]), 2.0),
            (6, DVector::from_vec(vec![-1.0, 0.25]), -0.5),
        ],
        mart: vec![DVector::zeros(2); 8],
    };
    let pure = energy_identity_check(&dyadic, &grid).unwrap().residual;

    let generic = EnergyParts {
        h0: DVector::from_vec(vec![0.9, -1.7]),
        drift: vec![DVector::zeros(2); 8],
        jumps: vec![
            (2, DVector::from_vec(vec![0.3, 1.1]), 1.7),
            (5, DVector::from_vec(vec![-0.6, 0.2]), -0.9),
            (8, DVector::from_vec(vec![0.45, -0.8]), 0.35),
        ],
        mart: vec![DVector::zeros(2); 8],
    };
    let pure_generic = energy_identity_check(&generic, &grid).unwrap().residual;

    let res_at = |n_steps: usize| {
        let g = build_grid(1.0, 0.25, n_steps).unwrap();
        let parts = EnergyParts {
            h0: DVector::from_element(1, 1.0),
            drift: (0..n_steps)
                .map(|n| DVector::from_element(1, (n as f64 * g.dt()).cos()))
                .collect(),
            jumps: vec![],
            mart: vec![DVector::zeros(1); n_steps],
        };
        energy_identity_check(&parts, &g).unwrap().residual
    };
    let mut dts = Vec::new();
    let mut errs = Vec::new();
    for n in [16usize, 32, 64, 128, 256] {
        dts.push(1.0 / n as f64);
        errs.push(res_at(n));
    }
    let slope = fit_slope(&dts, &errs);

    let pass = pure == 0.0 && pure_generic <= 1e-12 && (slope - 1.0).abs() <= 0.2;
    verdict(
        8,
        "energy identity",
        pass,
        &format!(
            "dyadic pure-jump residual {pure:.1e} (exact), generic {pure_generic:.1e} (<= 1e-12), \
             smooth slope {slope:.3} (want 1.00 +/- 0.20)"
        ),
    );
}

fn smooth_direction(grid: &TimeGrid, m: usize) -> StatePath {
    StatePath::from_fn(grid.first_node(), grid.last_main_node(), m, |node, c| {
        if node < 0 || node >= grid.last_main_node() {
            0.0
        } else {
            (0.7 * grid.node_time(node) + 0.4 * c as f64).cos()
        }
    })
}

#[test]
fn a09_gradient_three_way_agreement() {
    let mut details = Vec::new();
    let mut pass = true;
    // Per-path conditioning keeps the adjoint an exact transpose, so the
    // remaining gaps are finite-difference curvature and shared-sample
    // noise.
    for scenario in ["lq_basic", "nonlinear_delay"] {
        let cfg = parse_config(&format!(
            r#"{{ "scenario": "{scenario}",
                 "grid": {{ "t_final": 1.0, "delay": 0.25, "n_steps": 16 }},
                 "mc": {{ "n_paths": 16384, "seed": 2024 }},
                 "regression": {{ "mode": "identity" }} }}"#
        ))
        .unwrap();
        let sc = build_scenario(&cfg).unwrap();
        let grid = &sc.problem.model.space.grid;
        let direction = smooth_direction(grid, sc.problem.cost.control_dim);
        let fd = fd_gradient_check(
            &sc.problem,
            &sc.u_start,
            &direction,
            &[1e-3],
            &sc.mode,
            &sc.ens,
        )
        .unwrap();
        let slope = fd.rows[0].fd_slope;
        let g1 = rel_gap(slope, fd.variational);
        let g2 = rel_gap(fd.pairing, fd.variational);
        pass = pass && g1 <= 0.05 && g2 <= 0.05;
        details.push(format!(
            "{scenario}: fd vs variational {:.2e}, pairing vs variational {:.2e} (<= 5e-2)",
            g1, g2
        ));
    }
    // Noise-free degenerate case: everything collapses to one path and the
    // quadratic objective makes the extrapolated slope exact.
    let cfg = parse_config(
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 16 },
             "coefficients": { "noise_scale": 0.0 },
             "mc": { "n_paths": 2, "seed": 3 },
             "regression": { "mode": "identity" } }"#,
    )
    .unwrap();
    let sc = build_scenario(&cfg).unwrap();
    let grid = &sc.problem.model.space.grid;
    let direction = smooth_direction(grid, sc.problem.cost.control_dim);
    let fd = fd_gradient_check(
        &sc.problem,
        &sc.u_start,
        &direction,
        &[1e-3, 1e-2],
        &sc.mode,
        &sc.ens,
    )
    .unwrap();
    let g1 = rel_gap(fd.extrapolated, fd.variational);
    let g2 = rel_gap(fd.pairing, fd.variational);
    pass = pass && g1 <= 1e-6 && g2 <= 1e-6;
    details.push(format!(
        "deterministic: fd vs variational {g1:.2e}, pairing vs variational {g2:.2e} (<= 1e-6)"
    ));
    verdict(9, "gradient three-way agreement", pass, &details.join("; "));
}

#[test]
fn a10_descent_reaches_lq_optimum() {
    let mut details = Vec::new();
    let mut pass = true;

    // Noisy instance under identity conditioning: the mean gradient is then
    // the exact gradient of the sampled objective, so the residual must fall
    // below a thousandth of its starting value; afterwards the stationarity
    // formula has to reproduce the control.
    let cfg = parse_config(
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 32 },
             "mc": { "n_paths": 256, "seed": 7 },
             "regression": { "mode": "identity" } }"#,
    )
    .unwrap();
    let sc = build_scenario(&cfg).unwrap();
    let inst = sc.lq.as_ref().unwrap();
    let prob = lq_to_problem(inst).unwrap();
    let opts = DescentOpts {
        tol_rel: 1e-5,
        max_iter: 120,
        ..DescentOpts::default()
    };
    let trace = projected_gradient_descent(&prob, &inst.u0, &opts, &sc.mode, &sc.ens).unwrap();
    let res0 = trace.steps[0].residual;
    let drop_ok = trace.residual <= 1e-3 * res0;
    pass = pass && drop_ok;
    details.push(format!(
        "residual {:.2e} from {res0:.2e} ({}1e-3 rel)",
        trace.residual,
        if drop_ok { "<= " } else { "> " }
    ));

    let grid = &inst.space.grid;
    let n = grid.last_main_node();
    let m = inst.control_dim;
    let dt = grid.dt();
    let cand = solve_candidate(&prob, &trace.u, &sc.mode, &sc.ens).unwrap();
    let adj = solve_adjoint(&prob, &cand, &sc.mode, &sc.ens).unwrap();
    let formula =
        lq_closed_form_control(inst, &trace.u, &adj, &cand.k, &sc.mode, cand.features.as_ref())
            .unwrap();
    let rel = l2_diff(&formula.mean, &trace.u, n, m, dt) / l2_norm(&trace.u, n, m, dt).max(1e-12);
    pass = pass && rel <= 0.02;
    details.push(format!("formula vs descent {rel:.2e} relative L2 (<= 2e-2)"));

    // Noise-free degenerate instance against the stacked quadratic solve.
    let dcfg = parse_config(
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 16 },
             "coefficients": { "noise_scale": 0.0 },
             "mc": { "n_paths": 2, "seed": 3 },
             "regression": { "mode": "identity" } }"#,
    )
    .unwrap();
    let dsc = build_scenario(&dcfg).unwrap();
    let dinst = dsc.lq.as_ref().unwrap();
    let dprob = lq_to_problem(dinst).unwrap();
    let dopts = DescentOpts {
        tol_rel: 1e-6,
        tol_abs: 1e-10,
        max_iter: 200,
        ..DescentOpts::default()
    };
    let dtrace = projected_gradient_descent(&dprob, &dinst.u0, &dopts, &dsc.mode, &dsc.ens).unwrap();
    let qp = lq_bruteforce_deterministic(dinst).unwrap();
    let dn = dinst.space.grid.last_main_node();
    let qp_gap = sup_diff(&qp.u, &dtrace.u, dn, dinst.control_dim);
    pass = pass && qp_gap <= 1e-4;
    details.push(format!("degenerate vs quadratic solve {qp_gap:.2e} sup (<= 1e-4)"));

    // Scalar benchmark with unit weights: the optimal value tends to
    // tanh(1) as the grid refines.
    let bench = scalar_benchmark_instance(64);
    let bqp = lq_bruteforce_deterministic(&bench).unwrap();
    let tanh_gap = (bqp.value - 1.0f64.tanh()).abs();
    pass = pass && tanh_gap <= 0.02;
    details.push(format!(
        "benchmark value {:.4} vs tanh(1) {:.4}, gap {tanh_gap:.2e} (<= 2e-2)",
        bqp.value,
        1.0f64.tanh()
    ));

    verdict(10, "descent reaches the quadratic optimum", pass, &details.join("; "));
}

/// Scalar instance with unit stage and control weights, no delay and no
/// noise; its continuum optimum has value tanh(T) at horizon T = 1.
fn scalar_benchmark_instance(n_steps: usize) -> LqInstance {
    let grid = build_grid(1.0, 0.0, n_steps).unwrap();
    let first = grid.first_node();
    let n = grid.last_main_node();
    let space = ModelSpace {
        grid: grid.clone(),
        triple: GelfandTriple::trivial(1),
        qw: QWienerConfig::new(vec![0.0]).unwrap(),
    };
    let ops = OperatorPair::constant(
        DMatrix::zeros(1, 1),
        vec![DMatrix::zeros(1, 1)],
        0.1,
        30.0,
        30.0,
    );
    let atoms = FiniteMeasure::dirac_now();
    let a1 = KernelRepresentation::from_fn(&grid, atoms.clone(), 1, 1, |_, _, _| {
        DMatrix::zeros(1, 1)
    })
    .unwrap();
    let b1 = vec![
        KernelRepresentation::from_fn(&grid, atoms, 1, 1, |_, _, _| DMatrix::zeros(1, 1)).unwrap(),
    ];
    LqInstance {
        space,
        ops,
        a1,
        b1,
        c_mat: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
        d_mats: Arc::new(|_| vec![DMatrix::zeros(1, 1)]),
        f_mat: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
        g1: Arc::new(|_| 0.0),
        g2: Arc::new(|_| DVector::zeros(1)),
        n_mat: Arc::new(|_| DMatrix::from_element(1, 1, 1.0)),
        phi: DMatrix::zeros(1, 1),
        control_dim: 1,
        mu1: FiniteMeasure::dirac_now(),
        mu2: FiniteMeasure::dirac_now(),
        gamma: StatePath::constant(first, 0, &[1.0]),
        u0: StatePath::zeros(first, n, 1),
    }
}

#[test]
fn a11_optimality_certificate_on_lq() {
    let cfg = parse_config(
        r#"{ "scenario": "lq_basic",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 16 },
             "mc": { "n_paths": 256, "seed": 7 } }"#,
    )
    .unwrap();
    let sc = build_scenario(&cfg).unwrap();
    let inst = sc.lq.as_ref().unwrap();
    let weights = lq_certificate(inst, 100, 7).unwrap();
    let prob = lq_to_problem(inst).unwrap();
    let opts = DescentOpts {
        tol_rel: 1e-4,
        max_iter: 80,
        ..DescentOpts::default()
    };
    let trace = projected_gradient_descent(&prob, &inst.u0, &opts, &sc.mode, &sc.ens).unwrap();
    let cand = solve_candidate(&prob, &trace.u, &sc.mode, &sc.ens).unwrap();
    let adj = solve_adjoint(&prob, &cand, &sc.mode, &sc.ens).unwrap();
    let cert = sufficiency_certificate(&prob, &cand, &adj, 100, 1111, &sc.ens).unwrap();
    let pass = weights.passes(1e-9) && cert.passes();
    verdict(
        11,
        "optimality certificate",
        pass,
        &format!(
            "weights pass {}, terminal convex {}, hamiltonian convex {}, weight sign {}, \
             100 perturbations dominated {} (worst margin {:.2} se)",
            weights.passes(1e-9),
            cert.terminal_cost_convex,
            cert.hamiltonian_convex,
            cert.cost_adjoint_nonpositive,
            cert.perturbations_dominated,
            cert.worst_margin_se
        ),
    );
}

#[test]
fn a12_cost_weight_chain_exactness() {
    // A stage cost free of the running value and its noise loadings keeps
    // the weight frozen at its starting value, bit for bit.
    let cfg = parse_config(
        r#"{ "scenario": "nonlinear_delay",
             "grid": { "t_final": 1.0, "delay": 0.25, "n_steps": 16 },
             "mc": { "n_paths": 64, "seed": 9 } }"#,
    )
    .unwrap();
    let sc = build_scenario(&cfg).unwrap();
    let cand = solve_candidate(&sc.problem, &sc.u_start, &sc.mode, &sc.ens).unwrap();
    let n = sc.problem.model.space.grid.last_main_node();
    let mut frozen = true;
    for kp in &cand.k {
        for node in 0..=n {
            if kp.at(node)[0].to_bits() != (-1.0f64).to_bits() {
                frozen = false;
            }
        }
    }

    // With a constant linear load the weight is a product chain whose
    // terminal error against the exponential halves with the step.
    let err_at = |n_steps: usize| -> f64 {
        let mut inst = scalar_benchmark_instance(n_steps);
        inst.g1 = Arc::new(|_| 0.7);
        let prob = lq_to_problem(&inst).unwrap();
        let ens = NoiseEnsemble::zeros(&inst.space.grid, 1, 1);
        let cand = solve_candidate(&prob, &inst.u0, &CondExp::Identity, &ens).unwrap();
        let n = inst.space.grid.last_main_node();
        (cand.k[0].at(n)[0] - (-(0.7f64).exp())).abs()
    };
    let e32 = err_at(32);
    let e64 = err_at(64);
    let ratio = e32 / e64;
    let first_order = (1.6..=2.6).contains(&ratio);

    let pass = frozen && first_order;
    verdict(
        12,
        "cost-weight chain",
        pass,
        &format!(
            "weight frozen at -1 bitwise: {frozen}; exponential error {e64:.2e} at 64 steps, \
             halving ratio {ratio:.2} (want ~2)"
        ),
    );
}
