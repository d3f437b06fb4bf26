//! Working covariance matrices for the within-subject response vectors.
//!
//! The working covariance only weights the estimating functions;
//! consistency of the coefficient estimates does not require it to be
//! correctly specified. Estimation is moment-based on residuals computed
//! from the replicate-averaged design.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

/// Margin keeping the correlation parameter strictly inside the
/// positive-definite region.
const RHO_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovStructure {
    Independence,
    Exchangeable,
    Ar1,
}

impl std::fmt::Display for CovStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovStructure::Independence => write!(f, "independence"),
            CovStructure::Exchangeable => write!(f, "exchangeable"),
            CovStructure::Ar1 => write!(f, "ar1"),
        }
    }
}

impl std::str::FromStr for CovStructure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independence" => Ok(CovStructure::Independence),
            "exchangeable" => Ok(CovStructure::Exchangeable),
            "ar1" => Ok(CovStructure::Ar1),
            other => Err(Error::validation(format!(
                "unknown covariance structure `{other}` (expected independence|exchangeable|ar1)"
            ))),
        }
    }
}

/// Parametric within-subject covariance: `sigma2 * R(rho)` with `R`
/// determined by the structure.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WorkingCovariance {
    pub structure: CovStructure,
    pub sigma2: f64,
    pub rho: f64,
}

impl WorkingCovariance {
    pub fn independence(sigma2: f64) -> Self {
        WorkingCovariance {
            structure: CovStructure::Independence,
            sigma2,
            rho: 0.0,
        }
    }

    pub fn exchangeable(sigma2: f64, rho: f64) -> Self {
        WorkingCovariance {
            structure: CovStructure::Exchangeable,
            sigma2,
            rho,
        }
    }

    pub fn ar1(sigma2: f64, rho: f64) -> Self {
        WorkingCovariance {
            structure: CovStructure::Ar1,
            sigma2,
            rho,
        }
    }

    /// Materialize the `m x m` covariance matrix and its inverse.
    ///
    /// The inverse comes from a Cholesky factorization; parameters
    /// outside the positive-definite region are rejected.
    pub fn materialize(&self, m: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if m == 0 {
            return Err(Error::dimension("visit count must be at least 1"));
        }
        if self.sigma2 <= 0.0 {
            return Err(Error::numerical(format!(
                "sigma2 = {} is not positive",
                self.sigma2
            )));
        }
        let mat = self.correlation(m) * self.sigma2;
        let chol = mat.clone().cholesky().ok_or_else(|| {
            Error::numerical(format!(
                "covariance ({}, sigma2={}, rho={}) is not positive definite at m={m}",
                self.structure, self.sigma2, self.rho
            ))
        })?;
        Ok((mat, chol.inverse()))
    }

    fn correlation(&self, m: usize) -> DMatrix<f64> {
        match self.structure {
            CovStructure::Independence => DMatrix::identity(m, m),
            CovStructure::Exchangeable => {
                DMatrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { self.rho })
            }
            CovStructure::Ar1 => {
                DMatrix::from_fn(m, m, |i, j| self.rho.powi((i as i32 - j as i32).abs()))
            }
        }
    }

    /// Smallest and largest eigenvalues over visit counts `1..=max_m`,
    /// as a boundedness diagnostic.
    pub fn eigenvalue_bounds(&self, max_m: usize) -> Result<(f64, f64)> {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for m in 1..=max_m.max(1) {
            let (mat, _) = self.materialize(m)?;
            let eig = mat.symmetric_eigenvalues();
            lo = lo.min(eig.min());
            hi = hi.max(eig.max());
        }
        Ok((lo, hi))
    }

    fn clamp_rho(&mut self, max_m: usize) {
        let (lo, hi) = match self.structure {
            CovStructure::Independence => (0.0, 0.0),
            CovStructure::Exchangeable => {
                let lower = if max_m > 1 {
                    -1.0 / (max_m as f64 - 1.0) + RHO_MARGIN
                } else {
                    0.0
                };
                (lower, 1.0 - RHO_MARGIN)
            }
            CovStructure::Ar1 => (-1.0 + RHO_MARGIN, 1.0 - RHO_MARGIN),
        };
        self.rho = self.rho.clamp(lo, hi);
    }
}

/// Moment-based estimation of the working covariance at the given
/// coefficient vector. Residuals use the replicate-averaged design.
///
/// `sigma2` is the residual mean square with `N - p` degrees of freedom.
/// The correlation is the average standardized residual cross-product
/// (exchangeable) or lag-1 product (AR(1)); standardization uses the
/// `N`-denominator second moment so that perfectly correlated residuals
/// land on the clamp boundary.
pub fn estimate_working_covariance(
    ds: &LongitudinalDataset,
    beta: &nalgebra::DVector<f64>,
    structure: CovStructure,
) -> Result<WorkingCovariance> {
    let p = ds.p();
    if beta.len() != p {
        return Err(Error::dimension(format!(
            "beta has length {}, expected {p}",
            beta.len()
        )));
    }
    let n_obs = ds.total_obs();
    if n_obs <= p {
        return Err(Error::DegreesOfFreedom {
            observations: n_obs,
            parameters: p,
        });
    }

    let mut ss = 0.0;
    let mut cross = 0.0;
    let mut pairs = 0usize;
    for i in 0..ds.n() {
        let z = ds.averaged_design(i);
        let r = &ds.subjects()[i].y - z * beta;
        let m = r.len();
        ss += r.norm_squared();
        match structure {
            CovStructure::Independence => {}
            CovStructure::Exchangeable => {
                for j in 0..m {
                    for l in (j + 1)..m {
                        cross += r[j] * r[l];
                        pairs += 1;
                    }
                }
            }
            CovStructure::Ar1 => {
                for j in 0..m.saturating_sub(1) {
                    cross += r[j] * r[j + 1];
                    pairs += 1;
                }
            }
        }
    }

    let sigma2 = ss / (n_obs - p) as f64;
    let rho = match structure {
        CovStructure::Independence => 0.0,
        _ => {
            if pairs == 0 {
                return Err(Error::Structure {
                    message: format!("structure {structure} needs subjects with at least 2 visits"),
                });
            }
            let sigma2_mle = ss / n_obs as f64;
            (cross / pairs as f64) / sigma2_mle
        }
    };

    let mut cov = WorkingCovariance {
        structure,
        sigma2,
        rho,
    };
    cov.clamp_rho(ds.max_visits());
    Ok(cov)
}

/// Materialized covariance and inverse per distinct visit count.
#[derive(Debug, Clone)]
pub struct CovCache {
    by_m: BTreeMap<usize, (DMatrix<f64>, DMatrix<f64>)>,
}

impl CovCache {
    pub fn new(cov: &WorkingCovariance, ds: &LongitudinalDataset) -> Result<Self> {
        let mut by_m = BTreeMap::new();
        for s in ds.subjects() {
            let m = s.visits();
            if let std::collections::btree_map::Entry::Vacant(slot) = by_m.entry(m) {
                slot.insert(cov.materialize(m)?);
            }
        }
        Ok(CovCache { by_m })
    }

    pub fn matrix(&self, m: usize) -> &DMatrix<f64> {
        &self.by_m[&m].0
    }

    pub fn inverse(&self, m: usize) -> &DMatrix<f64> {
        &self.by_m[&m].1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_csv_str, ColumnLayout};
    use nalgebra::DVector;

    #[test]
    fn exchangeable_zero_rho_is_identity() {
        let cov = WorkingCovariance::exchangeable(1.0, 0.0);
        let (mat, inv) = cov.materialize(3).unwrap();
        assert!((mat - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
        assert!((inv - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
    }

    #[test]
    fn exchangeable_matches_definition() {
        let cov = WorkingCovariance::exchangeable(0.8, 0.6);
        let (mat, inv) = cov.materialize(2).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.8, 0.48, 0.48, 0.8]);
        assert!((mat.clone() - expected).amax() < 1e-14);
        assert!((mat * inv - DMatrix::<f64>::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn ar1_matches_definition() {
        let cov = WorkingCovariance::ar1(2.0, 0.5);
        let (mat, inv) = cov.materialize(3).unwrap();
        assert!((mat[(0, 1)] - 1.0).abs() < 1e-14);
        assert!((mat[(0, 2)] - 0.5).abs() < 1e-14);
        assert!((mat.clone() * inv - DMatrix::<f64>::identity(3, 3)).amax() < 1e-10);
    }

    #[test]
    fn out_of_region_parameters_rejected() {
        let cov = WorkingCovariance::exchangeable(1.0, -0.9);
        assert!(cov.materialize(4).is_err());
        let cov = WorkingCovariance::exchangeable(-1.0, 0.0);
        assert!(cov.materialize(2).is_err());
    }

    fn toy_dataset(rows: &str) -> crate::dataset::LongitudinalDataset {
        let layout = ColumnLayout::new(vec!["x2".into()], vec!["w1".into()], true).unwrap();
        load_csv_str(rows, &layout).unwrap()
    }

    #[test]
    fn independence_ignores_rho() {
        let ds = toy_dataset(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,1.0,0.3,0.1,0.2\n1,2,2.0,0.5,0.4,0.3\n\
             2,1,0.5,-0.3,0.0,0.1\n2,2,1.5,0.7,0.2,0.2\n",
        );
        let beta = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let cov = estimate_working_covariance(&ds, &beta, CovStructure::Independence).unwrap();
        assert_eq!(cov.rho, 0.0);
        let (mat, _) = cov.materialize(4).unwrap();
        assert!((mat - DMatrix::<f64>::identity(4, 4) * cov.sigma2).amax() < 1e-14);
    }

    #[test]
    fn equal_residuals_hit_upper_clamp() {
        // y - Z beta is constant 1 everywhere at beta = 0.
        let ds = toy_dataset(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,1.0,0.0,0.0,0.0\n1,2,1.0,0.0,0.0,0.0\n1,3,1.0,0.0,0.0,0.0\n\
             2,1,1.0,0.0,0.0,0.0\n2,2,1.0,0.0,0.0,0.0\n2,3,1.0,0.0,0.0,0.0\n",
        );
        let beta = DVector::zeros(3);
        let cov = estimate_working_covariance(&ds, &beta, CovStructure::Exchangeable).unwrap();
        assert!(
            (cov.rho - (1.0 - RHO_MARGIN)).abs() < 1e-12,
            "rho = {}",
            cov.rho
        );
    }

    #[test]
    fn too_few_observations_is_dof_error() {
        let ds = toy_dataset(
            "subject,visit,y,x2,w1_r1,w1_r2\n\
             1,1,1.0,0.3,0.1,0.2\n2,1,0.5,-0.3,0.0,0.1\n",
        );
        let beta = DVector::zeros(3);
        assert!(matches!(
            estimate_working_covariance(&ds, &beta, CovStructure::Independence),
            Err(Error::DegreesOfFreedom { .. })
        ));
    }

    #[test]
    fn single_visit_subjects_reject_correlation_structures() {
        let layout = ColumnLayout::new(vec![], vec!["w1".into()], false).unwrap();
        let ds = load_csv_str(
            "subject,visit,y,w1_r1,w1_r2\n1,1,1.0,0.1,0.2\n2,1,0.5,0.0,0.1\n3,1,0.2,0.3,0.4\n",
            &layout,
        )
        .unwrap();
        let beta = DVector::zeros(1);
        assert!(matches!(
            estimate_working_covariance(&ds, &beta, CovStructure::Exchangeable),
            Err(Error::Structure { .. })
        ));
        assert!(estimate_working_covariance(&ds, &beta, CovStructure::Independence).is_ok());
    }

    #[test]
    fn eigenvalue_bounds_positive() {
        let cov = WorkingCovariance::exchangeable(0.8, 0.6);
        let (lo, hi) = cov.eigenvalue_bounds(6).unwrap();
        assert!(lo > 0.0);
        assert!(hi < f64::INFINITY);
        assert!(lo <= hi);
    }
}
