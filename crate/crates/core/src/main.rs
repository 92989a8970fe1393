//! Command-line front end: scenario runs, identity suites, derivative
//! checks and linear-quadratic oracle comparisons.
//!
//! Exit codes: 0 success, 1 input rejected, 2 numerics broke down.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use psee_control::config::{parse_config, ExperimentConfig};
use psee_control::error::{Error, Result};
use psee_control::lq::{
    lq_bruteforce_deterministic, lq_certificate, lq_closed_form_control, lq_to_problem,
};
use psee_control::scenarios::{build_scenario, emit_plotdata, identity_rows, run_scenario};
use psee_control::smp::{
    fd_gradient_check, projected_gradient_descent, smp_gradient, solve_adjoint, solve_candidate,
};
use psee_control::StatePath;

#[derive(Parser)]
#[command(
    name = "psee",
    about = "Optimal control of delayed stochastic evolution systems",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario from a JSON config and write CSV artifacts plus a
    /// manifest.
    Run {
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write long-format plot CSVs.
        #[arg(long)]
        plots: bool,
    },
    /// Randomized duality, change-of-variables, adjoint-formula and energy
    /// suites; nonzero exit if any residual exceeds its threshold.
    CheckIdentities {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Three-way derivative comparison at the scenario's starting control.
    GradCheck { config: PathBuf },
    /// Compare descent, stationarity formula and (when noiseless) the
    /// stacked quadratic program on a linear-quadratic scenario.
    LqOracle { config: PathBuf },
}

fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

fn sup_diff(a: &StatePath, b: &StatePath, last: i64, dim: usize) -> f64 {
    let mut s = 0.0f64;
    for node in 0..last {
        for c in 0..dim {
            s = s.max((a.at(node)[c] - b.at(node)[c]).abs());
        }
    }
    s
}

fn l2_norm(u: &StatePath, last: i64, dim: usize, dt: f64) -> f64 {
    let mut s = 0.0;
    for node in 0..last {
        for c in 0..dim {
            s += u.at(node)[c] * u.at(node)[c];
        }
    }
    (dt * s).sqrt()
}

fn l2_diff(a: &StatePath, b: &StatePath, last: i64, dim: usize, dt: f64) -> f64 {
    let mut s = 0.0;
    for node in 0..last {
        for c in 0..dim {
            let d = a.at(node)[c] - b.at(node)[c];
            s += d * d;
        }
    }
    (dt * s).sqrt()
}

fn cmd_run(config: &Path, out: Option<&Path>, plots: bool) -> Result<()> {
    let cfg = read_config(config)?;
    let arts = run_scenario(&cfg, out)?;
    println!(
        "run {}: J = {:.6e}, residual = {:.3e}, converged = {}",
        cfg.scenario, arts.trace.j, arts.trace.residual, arts.trace.converged
    );
    for f in &arts.files {
        println!("wrote {}", f.display());
    }
    if plots {
        for f in emit_plotdata(&arts.dir)? {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn cmd_check_identities(seed: u64, instances: usize) -> Result<()> {
    let rows = identity_rows(seed, instances)?;
    let mut all_ok = true;
    for row in &rows {
        let status = if row.passes() { "pass" } else { "FAIL" };
        println!(
            "{:22} worst residual {:.3e} (threshold {:.1e}) {status}",
            row.name, row.worst_residual, row.threshold
        );
        all_ok &= row.passes();
    }
    if all_ok {
        Ok(())
    } else {
        Err(Error::numerical("identity suite exceeded a threshold"))
    }
}

fn cmd_grad_check(config: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let sc = build_scenario(&cfg)?;
    let grid = &sc.problem.model.space.grid;
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
    println!("rho        fd_slope        variational      pairing");
    for row in &fd.rows {
        println!(
            "{:<9.1e} {:<15.8e} {:<16.8e} {:<.8e}",
            row.rho, row.fd_slope, fd.variational, fd.pairing
        );
    }
    let scale = fd.variational.abs().max(1e-300);
    println!(
        "extrapolated fd {:.8e}; gaps: fd {:.2e}, pairing {:.2e} (relative)",
        fd.extrapolated,
        (fd.extrapolated - fd.variational).abs() / scale,
        (fd.pairing - fd.variational).abs() / scale
    );
    Ok(())
}

fn cmd_lq_oracle(config: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let sc = build_scenario(&cfg)?;
    let inst = sc.lq.as_ref().ok_or_else(|| {
        Error::validation(format!(
            "scenario `{}` is not linear-quadratic; lq-oracle needs lq_basic or heat_spde",
            sc.name
        ))
    })?;
    let grid = &inst.space.grid;
    let n = grid.last_main_node();
    let dt = grid.dt();
    let m = inst.control_dim;

    let cert = lq_certificate(inst, 100, cfg.mc.seed)?;
    println!(
        "certificate: coercivity {} (violation {:.2e}), N >= {:.3e}, F >= {:.3e}, Phi >= {:.3e}",
        if cert.coercivity.passes(1e-9) { "pass" } else { "FAIL" },
        cert.coercivity.max_violation,
        cert.n_min_eig,
        cert.f_min_eig,
        cert.phi_min_eig
    );
    if !cert.passes(1e-9) {
        return Err(Error::numerical("certificate failed"));
    }

    let prob = lq_to_problem(inst)?;
    let opts = cfg.optimizer.to_opts();
    let trace = projected_gradient_descent(&prob, &inst.u0, &opts, &sc.mode, &sc.ens)?;
    println!(
        "descent: J = {:.6e}, residual = {:.3e} after {} steps, converged = {}",
        trace.j,
        trace.residual,
        trace.steps.len(),
        trace.converged
    );

    let cand = solve_candidate(&prob, &trace.u, &sc.mode, &sc.ens)?;
    let adj = solve_adjoint(&prob, &cand, &sc.mode, &sc.ens)?;
    let grad = smp_gradient(&prob, &cand, &adj, &sc.mode)?;
    let formula =
        lq_closed_form_control(inst, &trace.u, &adj, &cand.k, &sc.mode, cand.features.as_ref())?;
    let denom = l2_norm(&trace.u, n, m, dt).max(1e-12);
    println!(
        "formula vs descent: L2 {:.3e} (relative {:.3e}); gradient residual {:.3e}",
        l2_diff(&formula.mean, &trace.u, n, m, dt),
        l2_diff(&formula.mean, &trace.u, n, m, dt) / denom,
        grad.residual
    );

    match lq_bruteforce_deterministic(inst) {
        Ok(qp) => {
            println!(
                "qp: J = {:.6e} (predicted {:.6e}), smallest Hessian eigenvalue {:.3e}",
                qp.value, qp.predicted_value, qp.hessian_min_eig
            );
            println!(
                "qp vs descent: sup {:.3e}; qp vs formula: sup {:.3e}",
                sup_diff(&qp.u, &trace.u, n, m),
                sup_diff(&qp.u, &formula.mean, n, m)
            );
        }
        Err(Error::Validation(msg)) => {
            println!("qp skipped: {msg}");
        }
        Err(e) => return Err(e),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run { config, out, plots } => cmd_run(&config, out.as_deref(), plots),
        Cmd::CheckIdentities { seed, instances } => cmd_check_identities(seed, instances),
        Cmd::GradCheck { config } => cmd_grad_check(&config),
        Cmd::LqOracle { config } => cmd_lq_oracle(&config),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("psee: {e}");
        std::process::exit(e.exit_code());
    }
}
