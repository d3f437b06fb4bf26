//! Report structures and rendering for the CLI.

use std::fmt::Write as _;

use remel_core::auxiliary::AuxiliaryBasis;
use remel_core::baselines::BaselineFit;
use remel_core::covariance::WorkingCovariance;
use remel_core::dataset::{LongitudinalDataset, SkewnessDiagnostic};
use remel_core::el::ELFit;
use remel_core::inference::ConfidenceInterval;
use serde::Serialize;

#[derive(Debug, Serialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

#[derive(Debug, Serialize)]
pub struct BasisAudit {
    pub q: usize,
    pub gram_condition: f64,
    pub retained: Vec<String>,
    pub dropped_duplicates: Vec<String>,
    pub dropped_dependent: Vec<String>,
}

impl BasisAudit {
    pub fn from_basis(basis: &AuxiliaryBasis) -> Self {
        BasisAudit {
            q: basis.q,
            gram_condition: basis.gram_condition,
            retained: basis.retained.iter().map(|t| t.to_string()).collect(),
            dropped_duplicates: basis
                .dropped_duplicates
                .iter()
                .map(|t| t.to_string())
                .collect(),
            dropped_dependent: basis
                .dropped_dependent
                .iter()
                .map(|t| t.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct WorkingCovReport {
    pub structure: String,
    pub sigma2: f64,
    pub rho: f64,
    /// Smallest and largest working-covariance eigenvalues over the
    /// observed visit counts (boundedness diagnostic).
    pub eigenvalue_bounds: (f64, f64),
}

impl WorkingCovReport {
    pub fn new(cov: &WorkingCovariance, max_m: usize) -> Self {
        let bounds = cov.eigenvalue_bounds(max_m).unwrap_or((f64::NAN, f64::NAN));
        WorkingCovReport {
            structure: cov.structure.to_string(),
            sigma2: cov.sigma2,
            rho: cov.rho,
            eigenvalue_bounds: bounds,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct FitReport {
    pub method: String,
    pub n_subjects: usize,
    pub n_observations: usize,
    pub converged: bool,
    pub coefficients: Vec<CoefficientRow>,
    pub working_covariance: WorkingCovReport,
    pub neg2_log_r: Option<f64>,
    pub lambda: Option<Vec<f64>>,
    pub outer_iterations: Option<usize>,
    pub basis_drift: Option<bool>,
    pub basis: Option<BasisAudit>,
}

impl FitReport {
    pub fn from_el(fit: &ELFit, ds: &LongitudinalDataset, method: &str) -> Self {
        let names = ds.coef_names();
        let ses = fit.standard_errors();
        FitReport {
            method: method.to_string(),
            n_subjects: ds.n(),
            n_observations: ds.total_obs(),
            converged: fit.converged,
            coefficients: names
                .iter()
                .enumerate()
                .map(|(i, name)| CoefficientRow {
                    name: name.clone(),
                    estimate: fit.beta_hat[i],
                    std_error: ses[i],
                })
                .collect(),
            working_covariance: WorkingCovReport::new(&fit.working_cov, ds.max_visits()),
            neg2_log_r: Some(fit.neg2_log_r_at_hat),
            lambda: Some(fit.lambda_hat.iter().copied().collect()),
            outer_iterations: Some(fit.outer_iterations),
            basis_drift: Some(fit.basis_drift),
            basis: fit.basis.as_ref().map(BasisAudit::from_basis),
        }
    }

    pub fn from_baseline(fit: &BaselineFit, ds: &LongitudinalDataset, method: &str) -> Self {
        let names = ds.coef_names();
        let ses = fit.standard_errors();
        FitReport {
            method: method.to_string(),
            n_subjects: ds.n(),
            n_observations: ds.total_obs(),
            converged: fit.converged,
            coefficients: names
                .iter()
                .enumerate()
                .map(|(i, name)| CoefficientRow {
                    name: name.clone(),
                    estimate: fit.beta_hat[i],
                    std_error: ses[i],
                })
                .collect(),
            working_covariance: WorkingCovReport::new(&fit.working_cov, ds.max_visits()),
            neg2_log_r: None,
            lambda: None,
            outer_iterations: None,
            basis_drift: None,
            basis: None,
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "method: {}", self.method).unwrap();
        writeln!(
            out,
            "subjects: {}  observations: {}  converged: {}",
            self.n_subjects, self.n_observations, self.converged
        )
        .unwrap();
        writeln!(
            out,
            "working covariance: {} (sigma2 = {:.6}, rho = {:.6}), eigenvalues in [{:.6}, {:.6}]",
            self.working_covariance.structure,
            self.working_covariance.sigma2,
            self.working_covariance.rho,
            self.working_covariance.eigenvalue_bounds.0,
            self.working_covariance.eigenvalue_bounds.1,
        )
        .unwrap();
        if let Some(v) = self.neg2_log_r {
            writeln!(out, "-2 log R at estimate: {v:.6e}").unwrap();
        }
        if let Some(iters) = self.outer_iterations {
            writeln!(out, "outer iterations: {iters}").unwrap();
        }
        if self.basis_drift == Some(true) {
            writeln!(
                out,
                "warning: retained basis changed across outer iterations"
            )
            .unwrap();
        }
        writeln!(
            out,
            "\n{:<16} {:>14} {:>14}",
            "coef", "estimate", "std_error"
        )
        .unwrap();
        for row in &self.coefficients {
            writeln!(
                out,
                "{:<16} {:>14.6} {:>14.6}",
                row.name, row.estimate, row.std_error
            )
            .unwrap();
        }
        if let Some(basis) = &self.basis {
            writeln!(
                out,
                "\nbasis: q = {}, gram condition = {:.3e}",
                basis.q, basis.gram_condition
            )
            .unwrap();
            writeln!(out, "retained: {}", basis.retained.join(" ")).unwrap();
            if !basis.dropped_duplicates.is_empty() {
                writeln!(
                    out,
                    "dropped duplicates: {}",
                    basis.dropped_duplicates.join(" ")
                )
                .unwrap();
            }
            if !basis.dropped_dependent.is_empty() {
                writeln!(
                    out,
                    "dropped dependent: {}",
                    basis.dropped_dependent.join(" ")
                )
                .unwrap();
            }
        }
        if let Some(lambda) = &self.lambda {
            let rendered: Vec<String> = lambda.iter().map(|v| format!("{v:.6e}")).collect();
            writeln!(out, "lambda: [{}]", rendered.join(", ")).unwrap();
        }
        out
    }
}

#[derive(Debug, Serialize)]
pub struct CiReport {
    pub method: String,
    pub level: f64,
    pub rows: Vec<CiRow>,
}

#[derive(Debug, Serialize)]
pub struct CiRow {
    pub coef: String,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub length: f64,
    pub bounded: bool,
}

impl CiReport {
    pub fn new(
        method: &str,
        level: f64,
        names: &[String],
        estimates: &[f64],
        cis: &[ConfidenceInterval],
    ) -> Self {
        CiReport {
            method: method.to_string(),
            level,
            rows: cis
                .iter()
                .map(|ci| CiRow {
                    coef: names[ci.coord].clone(),
                    estimate: estimates[ci.coord],
                    lower: ci.lower,
                    upper: ci.upper,
                    length: ci.length(),
                    bounded: ci.bounded,
                })
                .collect(),
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "method: {}  level: {}", self.method, self.level).unwrap();
        writeln!(
            out,
            "{:<16} {:>12} {:>12} {:>12} {:>12}",
            "coef", "estimate", "lower", "upper", "length"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<16} {:>12.6} {:>12.6} {:>12.6} {:>12.6}{}",
                r.coef,
                r.estimate,
                r.lower,
                r.upper,
                r.length,
                if r.bounded { "" } else { "  (unbounded)" }
            )
            .unwrap();
        }
        out
    }
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub rows: Vec<SkewnessDiagnostic>,
}

impl DiagnoseReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<16} {:>8} {:>12} {:>12}  asymmetric at 5%",
            "coordinate", "n_obs", "z", "p_value"
        )
        .unwrap();
        for r in &self.rows {
            writeln!(
                out,
                "{:<16} {:>8} {:>12.4} {:>12.6}  {}",
                r.coordinate,
                r.n_obs,
                r.z_statistic,
                r.p_value,
                if r.p_value < 0.05 { "yes" } else { "no" }
            )
            .unwrap();
        }
        out
    }
}
