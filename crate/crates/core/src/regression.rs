//! Cross-sectional conditional expectation for backward schemes.
//!
//! Three modes: `Identity` (deterministic dynamics, no averaging), `Mean`
//! (plain ensemble average, the right conditioner when the regressed
//! quantity is measurable w.r.t. nothing), and `LeastSquares` (polynomial
//! regression on per-path feature vectors, Longstaff-Schwartz style).
//! `Mean` coincides with degree-0 least squares; both are kept because the
//! mean needs no design matrix.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RegressionConfig {
    /// Total polynomial degree of the monomial basis.
    pub degree: u32,
    /// Tikhonov shift added to the normal matrix. Zero means plain least
    /// squares; rank deficiency is then an error rather than silently
    /// regularized.
    #[serde(default)]
    pub ridge: f64,
    /// Append the delayed state to the feature vector.
    #[serde(default)]
    pub include_delayed: bool,
}

impl RegressionConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.ridge.is_finite() || self.ridge < 0.0 {
            return Err(Error::validation("regression ridge must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CondExp {
    Identity,
    Mean,
    LeastSquares(RegressionConfig),
}

impl CondExp {
    pub fn validate(&self) -> Result<()> {
        match self {
            CondExp::LeastSquares(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    pub fn wants_delayed_feature(&self) -> bool {
        matches!(self, CondExp::LeastSquares(cfg) if cfg.include_delayed)
    }
}

/// All monomials of the feature coordinates with total degree `0..=degree`,
/// one design row per sample. Column order: degree ascending; within a
/// degree, exponent of the first coordinate descending, then recursively.
pub fn monomial_design(feats: &[DVector<f64>], degree: u32) -> Result<DMatrix<f64>> {
    if feats.is_empty() {
        return Err(Error::validation("monomial_design: no samples"));
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::validation("monomial_design: ragged feature vectors"));
    }
    let exps = exponent_tuples(d, degree);
    let mut design = DMatrix::zeros(feats.len(), exps.len());
    for (row, f) in feats.iter().enumerate() {
        for (col, e) in exps.iter().enumerate() {
            let mut v = 1.0;
            for (j, p) in e.iter().enumerate() {
                for _ in 0..*p {
                    v *= f[j];
                }
            }
            design[(row, col)] = v;
        }
    }
    Ok(design)
}

fn exponent_tuples(d: usize, degree: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for g in 0..=degree {
        let mut cur = vec![0u32; d];
        fill(&mut out, &mut cur, 0, g);
    }
    out
}

fn fill(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, pos: usize, rem: u32) {
    if pos + 1 == cur.len() {
        cur[pos] = rem;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=rem).rev() {
        cur[pos] = e;
        fill(out, cur, pos + 1, rem - e);
        cur[pos] = 0;
    }
}

/// A conditioner fitted once per time step: the design factorization is
/// reused across every target regressed at that step.
#[derive(Debug)]
pub enum Conditioner {
    Identity(usize),
    Mean(usize),
    Fitted {
        design: DMatrix<f64>,
        chol: Cholesky<f64, nalgebra::Dyn>,
    },
}

impl Conditioner {
    pub fn new(mode: &CondExp, feats: &[DVector<f64>]) -> Result<Conditioner> {
        let m = feats.len();
        if m == 0 {
            return Err(Error::validation("conditioner: empty ensemble"));
        }
        match mode {
            CondExp::Identity => Ok(Conditioner::Identity(m)),
            CondExp::Mean => Ok(Conditioner::Mean(m)),
            CondExp::LeastSquares(cfg) => {
                cfg.validate()?;
                let design = monomial_design(feats, cfg.degree)?;
                let mut normal = design.transpose() * &design;
                if cfg.ridge > 0.0 {
                    for i in 0..normal.nrows() {
                        normal[(i, i)] += cfg.ridge;
                    }
                }
                let chol = Cholesky::new(normal).ok_or_else(|| {
                    if cfg.ridge == 0.0 {
                        Error::numerical(
                            "regression normal matrix is rank-deficient; \
                             reduce the basis degree or set a positive ridge",
                        )
                    } else {
                        Error::numerical(
                            "regression normal matrix is not positive definite \
                             despite ridge; check features for non-finite values",
                        )
                    }
                })?;
                Ok(Conditioner::Fitted { design, chol })
            }
        }
    }

    pub fn n_samples(&self) -> usize {
        match self {
            Conditioner::Identity(m) | Conditioner::Mean(m) => *m,
            Conditioner::Fitted { design, .. } => design.nrows(),
        }
    }

    /// Fitted values at the sample points, one per path.
    pub fn apply(&self, target: &[f64]) -> Result<Vec<f64>> {
        if target.len() != self.n_samples() {
            return Err(Error::validation(format!(
                "conditioner: {} targets for {} samples",
                target.len(),
                self.n_samples()
            )));
        }
        match self {
            Conditioner::Identity(_) => Ok(target.to_vec()),
            Conditioner::Mean(m) => {
                let mean = target.iter().sum::<f64>() / *m as f64;
                Ok(vec![mean; *m])
            }
            Conditioner::Fitted { design, chol } => {
                let y = DVector::from_column_slice(target);
                let beta = chol.solve(&(design.transpose() * &y));
                Ok((design * beta).as_slice().to_vec())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feats1(xs: &[f64]) -> Vec<DVector<f64>> {
        xs.iter().map(|x| DVector::from_vec(vec![*x])).collect()
    }

    #[test]
    fn design_columns_ordered_and_counted() {
        let f = vec![DVector::from_vec(vec![2.0, 3.0])];
        let d = monomial_design(&f, 2).unwrap();
        assert_eq!(d.ncols(), 6);
        // 1, x0, x1, x0^2, x0*x1, x1^2.
        let row: Vec<f64> = d.row(0).iter().cloned().collect();
        assert_eq!(row, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
    }

    #[test]
    fn exact_affine_fit_reproduces_targets() {
        let feats = feats1(&[0.0, 1.0, 2.0, 3.0]);
        let cond = Conditioner::new(
            &CondExp::LeastSquares(RegressionConfig {
                degree: 1,
                ridge: 0.0,
                include_delayed: false,
            }),
            &feats,
        )
        .unwrap();
        let fitted = cond.apply(&[1.0, 3.0, 5.0, 7.0]).unwrap();
        for (a, b) in fitted.iter().zip([1.0, 3.0, 5.0, 7.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_solved_normal_equations() {
        // x = 0,1,2; y = 0,1,4; degree 1 => beta = (-1/3, 2),
        // fitted = (-1/3, 5/3, 11/3).
        let feats = feats1(&[0.0, 1.0, 2.0]);
        let cond = Conditioner::new(
            &CondExp::LeastSquares(RegressionConfig {
                degree: 1,
                ridge: 0.0,
                include_delayed: false,
            }),
            &feats,
        )
        .unwrap();
        let fitted = cond.apply(&[0.0, 1.0, 4.0]).unwrap();
        let expect = [-1.0 / 3.0, 5.0 / 3.0, 11.0 / 3.0];
        for (a, b) in fitted.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{fitted:?}");
        }
    }

    #[test]
    fn mean_equals_degree_zero_regression() {
        let feats = feats1(&[0.3, -1.2, 2.4, 0.9, -0.5]);
        let targets = [1.0, 2.0, -0.5, 4.0, 0.25];
        let mean = Conditioner::new(&CondExp::Mean, &feats)
            .unwrap()
            .apply(&targets)
            .unwrap();
        let deg0 = Conditioner::new(
            &CondExp::LeastSquares(RegressionConfig {
                degree: 0,
                ridge: 0.0,
                include_delayed: false,
            }),
            &feats,
        )
        .unwrap()
        .apply(&targets)
        .unwrap();
        for (a, b) in mean.iter().zip(&deg0) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_passes_through() {
        let feats = feats1(&[1.0, 2.0]);
        let cond = Conditioner::new(&CondExp::Identity, &feats).unwrap();
        assert_eq!(cond.apply(&[5.0, -7.0]).unwrap(), vec![5.0, -7.0]);
    }

    #[test]
    fn cellwise_average_recovers_conditional_mean() {
        // Two feature cells with symmetric noise: the fit returns the
        // in-cell average, i.e. the conditional expectation.
        let feats = feats1(&[-1.0, -1.0, 1.0, 1.0]);
        let h = 0.7;
        let cond = Conditioner::new(
            &CondExp::LeastSquares(RegressionConfig {
                degree: 1,
                ridge: 0.0,
                include_delayed: false,
            }),
            &feats,
        )
        .unwrap();
        let fitted = cond.apply(&[1.0 + h, 1.0 - h, 1.0 + h, 1.0 - h]).unwrap();
        for v in fitted {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_deficiency_suggests_ridge() {
        // All samples identical: the affine design has rank 1.
        let feats = feats1(&[2.0, 2.0, 2.0]);
        let cfg = |ridge| {
            CondExp::LeastSquares(RegressionConfig {
                degree: 1,
                ridge,
                include_delayed: false,
            })
        };
        let err = Conditioner::new(&cfg(0.0), &feats).unwrap_err();
        assert!(err.to_string().contains("ridge"), "{err}");
        let cond = Conditioner::new(&cfg(1e-8), &feats).unwrap();
        let fitted = cond.apply(&[1.0, 2.0, 3.0]).unwrap();
        for v in fitted {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(30))]
        #[test]
        fn projection_is_idempotent_and_orthogonal(seed in 0u64..2000) {
            let m = 9usize;
            let feats: Vec<DVector<f64>> = (0..m)
                .map(|i| DVector::from_vec(vec![
                    crate::rng::keyed_uniform_sym(seed, 0, i as u64, 0, 0) * 2.0,
                ]))
                .collect();
            let targets: Vec<f64> = (0..m)
                .map(|i| crate::rng::keyed_uniform_sym(seed, 1, i as u64, 0, 0) * 3.0)
                .collect();
            let cond = Conditioner::new(
                &CondExp::LeastSquares(RegressionConfig {
                    degree: 2,
                    ridge: 0.0,
                    include_delayed: false,
                }),
                &feats,
            )
            .unwrap();
            let once = cond.apply(&targets).unwrap();
            let twice = cond.apply(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                proptest::prop_assert!((a - b).abs() < 1e-9);
            }
            // Residual orthogonal to every design column.
            let design = monomial_design(&feats, 2).unwrap();
            let scale = targets.iter().map(|t| t.abs()).fold(1.0f64, f64::max);
            for c in 0..design.ncols() {
                let mut dot = 0.0;
                let mut colnorm = 0.0f64;
                for r in 0..m {
                    dot += design[(r, c)] * (targets[r] - once[r]);
                    colnorm += design[(r, c)] * design[(r, c)];
                }
                proptest::prop_assert!(
                    dot.abs() <= 1e-9 * scale * colnorm.sqrt().max(1.0),
                    "col {c}: {dot}"
                );
            }
        }
    }
}
