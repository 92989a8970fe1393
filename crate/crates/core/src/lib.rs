//! Numerical toolkit for optimal control of stochastic evolution equations
//! with path delay: forward schemes, adjoint backward schemes, gradient
//! assembly via a stochastic maximum principle, and linear-quadratic
//! benchmarks with independent oracles.

pub mod backward;
pub mod config;
pub mod error;
pub mod forward;
pub mod grid;
pub mod lq;
pub mod measure;
pub mod noise;
pub mod operators;
pub mod path_calculus;
pub mod paths;
pub mod regression;
pub mod rng;
pub mod scenarios;
pub mod smp;
pub mod spaces;

pub use error::{Error, Result};
pub use grid::{build_grid, TimeGrid};
pub use measure::{delay_integral, FiniteMeasure};
pub use paths::{shift_back, shift_forward, stopped_segment, SegmentView, StatePath};
pub use spaces::{GelfandTriple, ModelSpace, QWienerConfig};
