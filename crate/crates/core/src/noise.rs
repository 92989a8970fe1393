//! Sampled driving noise and the elementary stochastic integral.
//!
//! The driving process is `w(t) = sum_j beta_j(t) sqrt(lambda_j) e_j` with
//! independent scalar Brownian motions `beta_j`. An ensemble stores the raw
//! increments `dW_j` of the `beta_j` over each step (variance `dt`); the
//! covariance weights `sqrt(lambda_j)` are applied at use sites. Increments
//! are generated from the keyed counter generator under
//! `(seed, path, step, mode)`, so ensembles are reproducible and individual
//! draws addressable.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::paths::StatePath;
use crate::rng::keyed_normal;
use crate::spaces::QWienerConfig;

#[derive(Debug, Clone)]
pub struct NoiseEnsemble {
    n_paths: usize,
    n_steps: usize,
    n_modes: usize,
    dt: f64,
    seed: u64,
    /// Layout: path-major, then step, then mode.
    data: Vec<f64>,
}

pub fn sample_noise(
    grid: &TimeGrid,
    n_modes: usize,
    n_paths: usize,
    seed: u64,
) -> Result<NoiseEnsemble> {
    if n_paths == 0 || n_modes == 0 {
        return Err(Error::validation(
            "noise: n_paths and n_modes must be at least 1",
        ));
    }
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let mut data = vec![0.0; n_paths * n_steps * n_modes];
    let mut i = 0;
    for path in 0..n_paths {
        for step in 0..n_steps {
            for mode in 0..n_modes {
                data[i] = sqrt_dt * keyed_normal(seed, path as u64, step as u64, mode as u64);
                i += 1;
            }
        }
    }
    Ok(NoiseEnsemble {
        n_paths,
        n_steps,
        n_modes,
        dt,
        seed,
        data,
    })
}

impl NoiseEnsemble {
    /// All-zero increments: runs the stochastic pipeline as a deterministic one.
    pub fn zeros(grid: &TimeGrid, n_modes: usize, n_paths: usize) -> Self {
        NoiseEnsemble {
            n_paths,
            n_steps: grid.n_steps(),
            n_modes,
            dt: grid.dt(),
            seed: 0,
            data: vec![0.0; n_paths * grid.n_steps() * n_modes],
        }
    }

    pub fn from_raw(
        n_paths: usize,
        n_steps: usize,
        n_modes: usize,
        dt: f64,
        data: Vec<f64>,
    ) -> Result<Self> {
        if data.len() != n_paths * n_steps * n_modes {
            return Err(Error::validation("noise: raw data length mismatch"));
        }
        Ok(NoiseEnsemble {
            n_paths,
            n_steps,
            n_modes,
            dt,
            seed: 0,
            data,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Increments `dW_j` over step `step` (from node `step` to `step + 1`).
    #[inline]
    pub fn increments(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.n_steps + step) * self.n_modes;
        &self.data[i..i + self.n_modes]
    }

    /// Brownian value at a node (sum of increments up to it), one mode.
    pub fn brownian_at(&self, path: usize, node: usize, mode: usize) -> f64 {
        let mut s = 0.0;
        for step in 0..node {
            s += self.increments(path, step)[mode];
        }
        s
    }

    /// Aggregate groups of `factor` fine steps into one coarse step. Used for
    /// strong-convergence studies where all levels must share one Brownian
    /// path.
    pub fn coarsen(&self, factor: usize) -> Result<NoiseEnsemble> {
        if factor == 0 || self.n_steps % factor != 0 {
            return Err(Error::validation(format!(
                "noise: cannot coarsen {} steps by factor {factor}",
                self.n_steps
            )));
        }
        let n_steps = self.n_steps / factor;
        let mut data = vec![0.0; self.n_paths * n_steps * self.n_modes];
        for path in 0..self.n_paths {
            for cs in 0..n_steps {
                for sub in 0..factor {
                    let fine = self.increments(path, cs * factor + sub);
                    let base = (path * n_steps + cs) * self.n_modes;
                    for (j, v) in fine.iter().enumerate() {
                        data[base + j] += v;
                    }
                }
            }
        }
        Ok(NoiseEnsemble {
            n_paths: self.n_paths,
            n_steps,
            n_modes: self.n_modes,
            dt: self.dt * factor as f64,
            seed: self.seed,
            data,
        })
    }

    /// Copy with fresh draws from `other_seed` on steps `>= from_step`.
    /// Adapted quantities must be unaffected by the scramble.
    pub fn scramble_tail(&self, from_step: usize, other_seed: u64) -> NoiseEnsemble {
        let mut out = self.clone();
        let sqrt_dt = self.dt.sqrt();
        for path in 0..self.n_paths {
            for step in from_step..self.n_steps {
                for mode in 0..self.n_modes {
                    let i = (path * self.n_steps + step) * self.n_modes + mode;
                    out.data[i] =
                        sqrt_dt * keyed_normal(other_seed, path as u64, step as u64, mode as u64);
                }
            }
        }
        out
    }
}

/// Cumulative stochastic integral of a step integrand. `integrand[path]` holds
/// a `d x m` coefficient per node (flat, column-major) on at least
/// `[0, n_steps - 1]`; the value picked on each step is the left endpoint.
/// Returns per-path `d`-vector paths on `[0, n_steps]`.
pub fn ito_integral(
    integrand: &[StatePath],
    dim: usize,
    qw: &QWienerConfig,
    ens: &NoiseEnsemble,
) -> Result<Vec<StatePath>> {
    let m = qw.n_modes();
    if ens.n_modes() != m {
        return Err(Error::validation("ito_integral: mode count mismatch"));
    }
    if integrand.len() != ens.n_paths() {
        return Err(Error::validation("ito_integral: path count mismatch"));
    }
    let n = ens.n_steps() as i64;
    let sqrt_l = qw.sqrt_eigenvalues();
    let mut out = Vec::with_capacity(integrand.len());
    for (path, f) in integrand.iter().enumerate() {
        if f.dim() != dim * m {
            return Err(Error::validation(format!(
                "ito_integral: integrand dim {} != d*m = {}",
                f.dim(),
                dim * m
            )));
        }
        let mut acc = StatePath::zeros(0, n, dim);
        let mut cur = vec![0.0; dim];
        for step in 0..n {
            let coeff = f.at(step);
            let dw = ens.increments(path, step as usize);
            for j in 0..m {
                let w = sqrt_l[j] * dw[j];
                if w == 0.0 {
                    continue;
                }
                let col = &coeff[j * dim..(j + 1) * dim];
                for (c, v) in cur.iter_mut().zip(col) {
                    *c += w * v;
                }
            }
            acc.at_mut(step + 1).copy_from_slice(&cur);
        }
        out.push(acc);
    }
    Ok(out)
}

/// Monte Carlo check of the step-integrand isometry
/// `E |int f dw|^2 = E int |f|^2 dt` (squared Hilbert-Schmidt norm against
/// the covariance). Returns `(lhs, rhs, relative gap)`.
pub fn ito_isometry_gap(
    integrand: &[StatePath],
    dim: usize,
    qw: &QWienerConfig,
    ens: &NoiseEnsemble,
) -> Result<(f64, f64, f64)> {
    let vals = ito_integral(integrand, dim, qw, ens)?;
    let n = ens.n_steps() as i64;
    let mut lhs = 0.0;
    for v in &vals {
        let end = v.at(n);
        lhs += end.iter().map(|x| x * x).sum::<f64>();
    }
    lhs /= vals.len() as f64;
    let m = qw.n_modes();
    let mut rhs = 0.0;
    for f in integrand {
        for step in 0..n {
            let mat = f.mat_at(step, dim, m);
            rhs += qw.hs_norm_sq(&mat) * ens.dt();
        }
    }
    rhs /= integrand.len() as f64;
    let scale = lhs.abs().max(rhs.abs()).max(1e-300);
    Ok((lhs, rhs, (lhs - rhs).abs() / scale))
}

/// Constant-coefficient convenience used in tests and diagnostics.
pub fn constant_integrand(
    mat: &DMatrix<f64>,
    n_paths: usize,
    n_steps: usize,
) -> Vec<StatePath> {
    let dim = mat.nrows() * mat.ncols();
    let flat: Vec<f64> = mat.as_slice().to_vec();
    (0..n_paths)
        .map(|_| {
            StatePath::from_fn(0, n_steps as i64 - 1, dim, |_, c| flat[c])
        })
        .collect()
}
