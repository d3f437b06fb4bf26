//! Reference estimators: naive weighted least squares on averaged
//! surrogates, its empirical-likelihood twin, and the cross-replicate
//! estimating-equation estimator with sandwich covariance.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::covariance::{estimate_working_covariance, WorkingCovariance};
use crate::dataset::LongitudinalDataset;
use crate::el::{fit_naive_el_model, ElConfig, LinearMomentModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BaselineMethod {
    GeeNaive,
    ElNaive,
    Lin,
}

/// Fit of one baseline estimator.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    pub method: BaselineMethod,
    pub beta_hat: DVector<f64>,
    /// Coefficient covariance: sandwich for the estimating-equation
    /// methods, plug-in information form for the naive EL fit.
    pub covariance: DMatrix<f64>,
    pub working_cov: WorkingCovariance,
    pub converged: bool,
}

impl BaselineFit {
    pub fn standard_errors(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }
}

enum EquationKind {
    SummedPairs,
    Averaged,
}

/// Iterate one linear estimating-equation solve with working-covariance
/// re-estimation until the coefficients settle.
fn fit_equation(
    ds: &LongitudinalDataset,
    config: &ElConfig,
    kind: EquationKind,
    method: BaselineMethod,
) -> Result<BaselineFit> {
    let build = |cov: &WorkingCovariance| -> Result<LinearMomentModel> {
        match kind {
            EquationKind::SummedPairs => LinearMomentModel::summed_pairs(ds, cov),
            EquationKind::Averaged => LinearMomentModel::averaged(ds, cov),
        }
    };

    let mut beta = build(&WorkingCovariance::independence(1.0))?.solve_moment_equation()?;
    let mut converged = false;
    let mut state: Option<(WorkingCovariance, LinearMomentModel)> = None;
    let mut prev_params = (f64::NAN, f64::NAN);
    for _ in 0..config.max_outer {
        let cov = estimate_working_covariance(ds, &beta, config.structure)?;
        let model = build(&cov)?;
        let beta_new = model.solve_moment_equation()?;
        let step = (&beta_new - &beta).amax();
        let param_change = ((cov.sigma2 - prev_params.0).abs() / cov.sigma2.max(1e-300))
            .max((cov.rho - prev_params.1).abs() / cov.rho.abs().max(1.0));
        prev_params = (cov.sigma2, cov.rho);
        beta = beta_new;
        state = Some((cov, model));
        if step < config.step_tol || param_change < 1e-6 {
            converged = true;
            break;
        }
    }
    let (working_cov, model) = state.expect("at least one iteration ran");
    let covariance = model.sandwich_covariance(&beta)?;
    Ok(BaselineFit {
        method,
        beta_hat: beta,
        covariance,
        working_cov,
        converged,
    })
}

/// Cross-replicate estimating-equation estimator: solve the linear
/// system summed over all ordered replicate pairs, iterating with
/// covariance re-estimation; sandwich covariance with sample plug-ins.
pub fn fit_lin(ds: &LongitudinalDataset, config: &ElConfig) -> Result<BaselineFit> {
    if ds.replicate_count() < 2 {
        return Err(Error::validation(
            "cross-replicate estimation needs at least 2 replicate measurements",
        ));
    }
    fit_equation(ds, config, EquationKind::SummedPairs, BaselineMethod::Lin)
}

/// Naive weighted least squares replacing the unobserved covariate with
/// the average of its replicate surrogates; sandwich covariance.
pub fn fit_naive_gee(ds: &LongitudinalDataset, config: &ElConfig) -> Result<BaselineFit> {
    fit_equation(ds, config, EquationKind::Averaged, BaselineMethod::GeeNaive)
}

/// Naive empirical likelihood on averaged surrogates (`q = p`): the
/// moment condition is exactly solvable, so the multiplier vanishes and
/// the point estimate matches the naive weighted least squares.
pub fn fit_naive_el(ds: &LongitudinalDataset, config: &ElConfig) -> Result<BaselineFit> {
    let fit = fit_naive_el_model(ds, config)?;
    Ok(BaselineFit {
        method: BaselineMethod::ElNaive,
        beta_hat: fit.beta_hat.clone(),
        covariance: fit.asymptotic_cov.clone(),
        working_cov: fit.working_cov,
        converged: fit.converged,
    })
}

/// Eigenvalue comparison of two coefficient covariances.
#[derive(Debug, Clone, Serialize)]
pub struct EfficiencyReport {
    /// `cov_reference - cov_candidate`, symmetrized.
    pub delta: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
    pub trace_delta: f64,
    /// Verdict that the difference is positive semidefinite, with
    /// tolerance `-1e-8 * |trace(delta)|`.
    pub psd: bool,
}

/// Compare estimated covariances: positive semidefiniteness of
/// `cov_reference - cov_candidate` means the candidate is at least as
/// efficient in every direction.
pub fn compare_efficiency(
    cov_candidate: &DMatrix<f64>,
    cov_reference: &DMatrix<f64>,
) -> Result<EfficiencyReport> {
    if cov_candidate.shape() != cov_reference.shape() || !cov_candidate.is_square() {
        return Err(Error::dimension(format!(
            "covariance shapes differ: {:?} vs {:?}",
            cov_candidate.shape(),
            cov_reference.shape()
        )));
    }
    let raw = cov_reference - cov_candidate;
    let delta = (&raw + raw.transpose()) * 0.5;
    let eig = delta.symmetric_eigenvalues();
    let min_eigenvalue = eig.min();
    let trace_delta = delta.trace();
    let psd = min_eigenvalue >= -1e-8 * trace_delta.abs();
    let p = delta.nrows();
    let rows = (0..p)
        .map(|i| (0..p).map(|j| delta[(i, j)]).collect())
        .collect();
    Ok(EfficiencyReport {
        delta: rows,
        min_eigenvalue,
        trace_delta,
        psd,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::CovStructure;
    use crate::dataset::{ColumnLayout, SubjectRecord};
    use crate::sim::rng::StreamRng;

    /// Error-free data: both surrogate replicates equal the true
    /// covariate exactly.
    fn error_free_dataset(n: usize, seed: u64) -> LongitudinalDataset {
        let layout = ColumnLayout::new(vec!["x2".into()], vec!["w1".into()], true).unwrap();
        let mut rng = StreamRng::new(seed);
        let m = 4;
        let mut subjects = Vec::new();
        for i in 0..n {
            let mut y = DVector::zeros(m);
            let mut x_exact = DMatrix::zeros(m, 2);
            let mut w = DMatrix::zeros(m, 1);
            for j in 0..m {
                let x1 = rng.normal();
                let x2 = rng.normal();
                x_exact[(j, 0)] = 1.0;
                x_exact[(j, 1)] = x2;
                w[(j, 0)] = x1;
                y[j] = 1.0 + x1 + x2 + 0.5 * rng.normal();
            }
            subjects.push(SubjectRecord {
                subject_id: format!("s{i}"),
                y,
                x_exact,
                w_reps: vec![w.clone(), w],
            });
        }
        LongitudinalDataset::new(subjects, layout).unwrap()
    }

    fn gls_solve(ds: &LongitudinalDataset, cov: &WorkingCovariance) -> DVector<f64> {
        let cache = crate::covariance::CovCache::new(cov, ds).unwrap();
        let p = ds.p();
        let mut lhs = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        for i in 0..ds.n() {
            let s = &ds.subjects()[i];
            let z = ds.averaged_design(i);
            let w = z.transpose() * cache.inverse(s.visits());
            lhs += &w * &z;
            rhs += &w * &s.y;
        }
        lhs.lu().solve(&rhs).unwrap()
    }

    #[test]
    fn lin_without_error_matches_gls() {
        let ds = error_free_dataset(60, 5);
        let config = ElConfig {
            structure: CovStructure::Exchangeable,
            ..ElConfig::default()
        };
        let fit = fit_lin(&ds, &config).unwrap();
        assert!(fit.converged);
        let gls = gls_solve(&ds, &fit.working_cov);
        assert!(
            (&fit.beta_hat - &gls).amax() < 1e-8,
            "lin {:?} vs gls {:?}",
            fit.beta_hat,
            gls
        );
    }

    #[test]
    fn lin_estimating_function_vanishes_at_estimate() {
        let ds = error_free_dataset(40, 6);
        let config = ElConfig::default();
        let fit = fit_lin(&ds, &config).unwrap();
        let model = LinearMomentModel::summed_pairs(&ds, &fit.working_cov).unwrap();
        let residual = model.moment_sum(&fit.beta_hat);
        let scale: f64 = (0..ds.n())
            .map(|i| model.subject_moment(i, &DVector::zeros(ds.p())).amax())
            .fold(1.0, f64::max);
        assert!(residual.amax() <= 1e-10 * scale);
    }

    #[test]
    fn sandwich_invariant_under_covariance_rescaling() {
        let ds = error_free_dataset(30, 7);
        let cov = WorkingCovariance::exchangeable(0.7, 0.4);
        let cov2 = WorkingCovariance::exchangeable(1.4, 0.4);
        let m1 = LinearMomentModel::summed_pairs(&ds, &cov).unwrap();
        let m2 = LinearMomentModel::summed_pairs(&ds, &cov2).unwrap();
        let b1 = m1.solve_moment_equation().unwrap();
        let b2 = m2.solve_moment_equation().unwrap();
        assert!((&b1 - &b2).amax() < 1e-8, "estimates moved under rescaling");
        let s1 = m1.sandwich_covariance(&b1).unwrap();
        let s2 = m2.sandwich_covariance(&b2).unwrap();
        assert!((&s1 - &s2).amax() / s1.amax() < 1e-8);
    }

    #[test]
    fn scaling_response_scales_estimates() {
        let ds = error_free_dataset(30, 8);
        let mut doubled_subjects: Vec<SubjectRecord> = ds.subjects().to_vec();
        for s in &mut doubled_subjects {
            s.y *= 2.0;
        }
        let ds2 = LongitudinalDataset::new(doubled_subjects, ds.layout().clone()).unwrap();
        let config = ElConfig::default();
        let f1 = fit_lin(&ds, &config).unwrap();
        let f2 = fit_lin(&ds2, &config).unwrap();
        assert!((&f2.beta_hat - &f1.beta_hat * 2.0).amax() < 1e-6);
    }

    #[test]
    fn naive_gee_without_error_matches_gls() {
        let ds = error_free_dataset(50, 9);
        let config = ElConfig::default();
        let fit = fit_naive_gee(&ds, &config).unwrap();
        let gls = gls_solve(&ds, &fit.working_cov);
        assert!((&fit.beta_hat - &gls).amax() < 1e-8);
    }

    #[test]
    fn efficiency_of_fit_against_itself_is_zero() {
        let cov = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let report = compare_efficiency(&cov, &cov).unwrap();
        assert_eq!(report.min_eigenvalue, 0.0);
        assert!(report.psd);
        for row in &report.delta {
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn efficiency_dimension_mismatch_rejected() {
        let a = DMatrix::<f64>::identity(2, 2);
        let b = DMatrix::<f64>::identity(3, 3);
        assert!(compare_efficiency(&a, &b).is_err());
    }
}
