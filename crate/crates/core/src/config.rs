//! Experiment configuration: strict JSON schema with per-scenario defaults.
//!
//! Every section is optional; omitted sections fall back to the scenario's
//! documented defaults. Unknown keys anywhere fail the parse before any
//! computation starts, and parse errors name the offending key path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::measure::FiniteMeasure;
use crate::regression::{CondExp, RegressionConfig};
use crate::smp::DescentOpts;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    #[serde(default = "default_delay")]
    pub delay: f64,
    #[serde(default = "default_n_steps")]
    pub n_steps: usize,
}

fn default_t_final() -> f64 {
    1.0
}
fn default_delay() -> f64 {
    0.25
}
fn default_n_steps() -> usize {
    64
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            t_final: default_t_final(),
            delay: default_delay(),
            n_steps: default_n_steps(),
        }
    }
}

impl GridConfig {
    pub fn build(&self) -> Result<TimeGrid> {
        crate::grid::build_grid(self.t_final, self.delay, self.n_steps)
    }
}

/// Optional dimension overrides; a scenario fills in whatever is omitted.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DimsConfig {
    pub state: Option<usize>,
    pub control: Option<usize>,
    pub noise_modes: Option<usize>,
}

/// One atom of a delay measure, in physical time: `offset` must lie in
/// `[-K, 0]` and on the grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomConfig {
    pub offset: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasuresConfig {
    /// Control delay measure; `None` keeps the scenario default.
    pub mu1: Option<Vec<AtomConfig>>,
    /// Terminal aggregation measure.
    pub mu2: Option<Vec<AtomConfig>>,
}

pub fn atoms_to_measure(atoms: &[AtomConfig], grid: &TimeGrid, what: &str) -> Result<FiniteMeasure> {
    let mut pairs = Vec::with_capacity(atoms.len());
    for a in atoms {
        let node = grid.node_at(a.offset, what)?;
        pairs.push((node, a.weight));
    }
    FiniteMeasure::new(pairs, grid)
}

/// Scalar knobs a scenario exposes; meaning is scenario-specific and
/// documented on the registry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoefficientsConfig {
    /// Multiplies every noise eigenvalue; zero gives the deterministic
    /// degenerate instance.
    #[serde(default = "one")]
    pub noise_scale: f64,
    /// Multiplies the control weight `N`.
    #[serde(default = "one")]
    pub control_penalty: f64,
    /// Gain of the delayed drift read.
    #[serde(default = "default_drift_delay_gain")]
    pub drift_delay_gain: f64,
    /// Gain of the delayed diffusion read.
    #[serde(default = "default_diff_delay_gain")]
    pub diffusion_delay_gain: f64,
}

fn one() -> f64 {
    1.0
}
fn default_drift_delay_gain() -> f64 {
    0.3
}
fn default_diff_delay_gain() -> f64 {
    0.1
}

impl Default for CoefficientsConfig {
    fn default() -> Self {
        CoefficientsConfig {
            noise_scale: one(),
            control_penalty: one(),
            drift_delay_gain: default_drift_delay_gain(),
            diffusion_delay_gain: default_diff_delay_gain(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_n_paths() -> usize {
    256
}
fn default_seed() -> u64 {
    7
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig {
            n_paths: default_n_paths(),
            seed: default_seed(),
        }
    }
}

/// Conditional-expectation backend selection.
///
/// The mode decides where conditioning enters the backward recursions, and
/// with it which stationarity the optimizer can reach. `identity` keeps
/// every path as it is, so the averaged gradient is the exact gradient of
/// the sampled objective and the descent converges to the sample optimum;
/// it is also exact in value whenever the stage cost reads the running
/// value and its noise loadings linearly or not at all, which covers the
/// shipped scenarios. `mean` and `least_squares` project at every step,
/// which is the statistically faithful reading for genuinely nonlinear
/// recursive costs but biases the gradient by a finite-sample term, so the
/// line search stalls near that floor and the run reports
/// `converged = false`. Use `least_squares` when the conditioned (adapted)
/// gradient itself is the object of study.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", tag = "mode")]
pub enum RegressionMode {
    /// No projection; the default. Exact gradient of the sampled objective.
    Identity,
    /// Ensemble average at every backward step.
    Mean,
    /// Polynomial least squares on state features.
    LeastSquares(RegressionConfig),
}

impl Default for RegressionMode {
    fn default() -> Self {
        RegressionMode::Identity
    }
}

impl RegressionMode {
    pub fn to_cond_exp(&self) -> CondExp {
        match self {
            RegressionMode::Identity => CondExp::Identity,
            RegressionMode::Mean => CondExp::Mean,
            RegressionMode::LeastSquares(cfg) => CondExp::LeastSquares(cfg.clone()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_max_iter")]
    pub max_iter: u32,
    #[serde(default = "default_tol_rel")]
    pub tol_rel: f64,
    #[serde(default = "default_tol_abs")]
    pub tol_abs: f64,
    #[serde(default = "one")]
    pub step0: f64,
    #[serde(default = "default_armijo")]
    pub armijo: f64,
    #[serde(default = "default_budget")]
    pub budget: u32,
}

fn default_max_iter() -> u32 {
    120
}
fn default_tol_rel() -> f64 {
    1e-3
}
fn default_tol_abs() -> f64 {
    1e-10
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_budget() -> u32 {
    30
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iter: default_max_iter(),
            tol_rel: default_tol_rel(),
            tol_abs: default_tol_abs(),
            step0: one(),
            armijo: default_armijo(),
            budget: default_budget(),
        }
    }
}

impl OptimizerConfig {
    pub fn to_opts(&self) -> DescentOpts {
        DescentOpts {
            step0: self.step0,
            armijo: self.armijo,
            budget: self.budget,
            max_iter: self.max_iter,
            tol_rel: self.tol_rel,
            tol_abs: self.tol_abs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// One of `heat_spde`, `lq_basic`, `nonlinear_delay`.
    pub scenario: String,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub dims: DimsConfig,
    #[serde(default)]
    pub measures: MeasuresConfig,
    #[serde(default)]
    pub coefficients: CoefficientsConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub regression: RegressionMode,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: String,
}

fn default_output_dir() -> String {
    "out".to_string()
}

/// Parse and validate a JSON config. Unknown keys are rejected; the error
/// message names the path of the first offending key.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| Error::validation(format!("config at `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self.scenario.as_str() {
            "heat_spde" | "lq_basic" | "nonlinear_delay" => {}
            other => {
                return Err(Error::validation(format!(
                    "config at `scenario`: unknown scenario `{other}` \
                     (expected heat_spde, lq_basic or nonlinear_delay)"
                )))
            }
        }
        // Surface grid errors with the key path, then measure errors.
        let grid = self
            .grid
            .build()
            .map_err(|e| Error::validation(format!("config at `grid`: {e}")))?;
        if let Some(atoms) = &self.measures.mu1 {
            atoms_to_measure(atoms, &grid, "mu1")
                .map_err(|e| Error::validation(format!("config at `measures.mu1`: {e}")))?;
        }
        if let Some(atoms) = &self.measures.mu2 {
            atoms_to_measure(atoms, &grid, "mu2")
                .map_err(|e| Error::validation(format!("config at `measures.mu2`: {e}")))?;
        }
        if self.mc.n_paths == 0 {
            return Err(Error::validation("config at `mc.n_paths`: must be positive"));
        }
        if !(self.coefficients.noise_scale >= 0.0) {
            return Err(Error::validation(
                "config at `coefficients.noise_scale`: must be nonnegative",
            ));
        }
        if !(self.coefficients.control_penalty >= 0.0) {
            return Err(Error::validation(
                "config at `coefficients.control_penalty`: must be nonnegative",
            ));
        }
        if let RegressionMode::LeastSquares(cfg) = &self.regression {
            cfg.validate()
                .map_err(|e| Error::validation(format!("config at `regression`: {e}")))?;
        }
        Ok(())
    }

    /// Canonical serialized form; field order is fixed by the struct, so
    /// equal configs hash equally.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.canonical_json().as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").expect("writing to a string cannot fail");
    }
    s
}
