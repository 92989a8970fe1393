//! Finite-dimensional realization of the variational space sandwich
//! `V ⊂ H ⊂ V*` together with the noise covariance.
//!
//! Coordinates are taken along a fixed orthonormal basis of `H = R^d`. A
//! diagonal weight `rho_j >= 1` per coordinate defines
//!
//! ```text
//! |u|_H^2 = sum u_j^2,   |u|_V^2 = sum rho_j^2 u_j^2,   |u|_*^2 = sum u_j^2 / rho_j^2,
//! ```
//!
//! so `|u|_* <= |u|_H <= |u|_V` holds pointwise. The duality pairing between
//! `V*` and `V` is the plain coordinate dot product (it extends the `H` inner
//! product). Hilbert-Schmidt maps from the covariance root are identified with
//! `d x m` matrices; their squared norm weights column `j` by the covariance
//! eigenvalue `lambda_j`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GelfandTriple {
    weights: Vec<f64>,
}

impl GelfandTriple {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::validation("triple: dimension must be at least 1"));
        }
        for (j, w) in weights.iter().enumerate() {
            if !(*w >= 1.0) || !w.is_finite() {
                return Err(Error::validation(format!(
                    "triple: weight rho_{j} = {w} must be finite and >= 1"
                )));
            }
        }
        Ok(GelfandTriple { weights })
    }

    /// All weights equal to one: V = H = V*.
    pub fn trivial(dim: usize) -> Self {
        GelfandTriple {
            weights: vec![1.0; dim.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn norm_h_sq(&self, u: &[f64]) -> f64 {
        u.iter().map(|x| x * x).sum()
    }

    pub fn norm_v_sq(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.weights)
            .map(|(x, r)| r * r * x * x)
            .sum()
    }

    pub fn norm_dual_sq(&self, u: &[f64]) -> f64 {
        u.iter()
            .zip(&self.weights)
            .map(|(x, r)| x * x / (r * r))
            .sum()
    }

    pub fn norm_h(&self, u: &[f64]) -> f64 {
        self.norm_h_sq(u).sqrt()
    }

    pub fn norm_v(&self, u: &[f64]) -> f64 {
        self.norm_v_sq(u).sqrt()
    }

    pub fn norm_dual(&self, u: &[f64]) -> f64 {
        self.norm_dual_sq(u).sqrt()
    }
}

/// Duality pairing `<f, u>` for `f` in `V*`, `u` in `V`; coincides with the
/// `H` inner product on common ground.
pub fn pair(f: &[f64], u: &[f64]) -> f64 {
    f.iter().zip(u).map(|(a, b)| a * b).sum()
}

pub fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// Covariance spectrum of the driving noise. Mode `j` carries eigenvalue
/// `lambda_j >= 0`; a zero eigenvalue keeps the mode in the bookkeeping but
/// removes it from every integral.
#[derive(Debug, Clone)]
pub struct QWienerConfig {
    eigenvalues: Vec<f64>,
    sqrt_eigenvalues: Vec<f64>,
}

impl QWienerConfig {
    pub fn new(eigenvalues: Vec<f64>) -> Result<Self> {
        if eigenvalues.is_empty() {
            return Err(Error::validation("noise: need at least one mode"));
        }
        for (j, l) in eigenvalues.iter().enumerate() {
            if !(*l >= 0.0) || !l.is_finite() {
                return Err(Error::validation(format!(
                    "noise: eigenvalue lambda_{j} = {l} must be finite and >= 0"
                )));
            }
        }
        let sqrt_eigenvalues = eigenvalues.iter().map(|l| l.sqrt()).collect();
        Ok(QWienerConfig {
            eigenvalues,
            sqrt_eigenvalues,
        })
    }

    /// Identity covariance on `m` modes.
    pub fn cylindrical(m: usize) -> Self {
        QWienerConfig::new(vec![1.0; m.max(1)]).expect("unit spectrum is valid")
    }

    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn sqrt_eigenvalues(&self) -> &[f64] {
        &self.sqrt_eigenvalues
    }

    /// Squared Hilbert-Schmidt norm of a `d x m` coefficient against the
    /// covariance root: `sum_j lambda_j |col_j|^2`.
    pub fn hs_norm_sq(&self, f: &DMatrix<f64>) -> f64 {
        assert_eq!(f.ncols(), self.n_modes(), "mode count mismatch");
        let mut s = 0.0;
        for (j, l) in self.eigenvalues.iter().enumerate() {
            if *l == 0.0 {
                continue;
            }
            s += l * f.column(j).norm_squared();
        }
        s
    }

    /// Weighted pairing `sum_j lambda_j <a_j, b_j>` of two `d x m` coefficients.
    pub fn hs_pair(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        assert_eq!(a.ncols(), self.n_modes());
        assert_eq!(b.ncols(), self.n_modes());
        let mut s = 0.0;
        for (j, l) in self.eigenvalues.iter().enumerate() {
            if *l == 0.0 {
                continue;
            }
            s += l * a.column(j).dot(&b.column(j));
        }
        s
    }
}

/// Bundle carried around by every solver: grid plus both space descriptions.
#[derive(Debug, Clone)]
pub struct ModelSpace {
    pub grid: crate::grid::TimeGrid,
    pub triple: GelfandTriple,
    pub qw: QWienerConfig,
}
