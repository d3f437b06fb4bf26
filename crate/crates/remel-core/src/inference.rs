//! Hypothesis tests and confidence intervals from the
//! empirical-likelihood ratio and the plug-in covariance.
//!
//! Three chi-squared statistics are available: the ratio at a fully
//! specified coefficient vector (`q` degrees of freedom), the
//! likelihood-ratio statistic against the fitted estimate (`p` degrees),
//! and the profile statistic with nuisance coordinates re-optimized
//! (degrees equal to the number of profiled coordinates). Profile
//! re-fits reuse the fitted basis and working covariance so the ratio
//! compares like with like.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::el::{minimize_profile, ELFit, HULL_PENALTY};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestKind {
    /// Ratio statistic at a fully specified coefficient vector.
    FullEl,
    /// Likelihood-ratio statistic against the fitted estimate.
    LrFull,
    /// Profile likelihood-ratio statistic.
    LrProfile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TestFlag {
    Clean,
    /// The weight constraints were infeasible at the hypothesized value;
    /// the statistic carries the penalty value and the test rejects.
    HullFailure,
    /// The constrained re-fit did not converge.
    NotConverged,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub kind: TestKind,
    pub flag: TestFlag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CiMethod {
    ProfileEl,
    Wald,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfidenceInterval {
    pub coord: usize,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: CiMethod,
    /// False when no crossing was bracketed within the expansion budget.
    pub bounded: bool,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }
}

fn chi2_upper_tail(statistic: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.sf(statistic.max(0.0))
}

fn chi2_quantile(level: f64, df: usize) -> f64 {
    let dist = ChiSquared::new(df as f64).expect("positive degrees of freedom");
    dist.inverse_cdf(level)
}

/// Test a fully specified coefficient vector: the ratio statistic
/// (`q` df) and the likelihood-ratio statistic (`p` df).
pub fn test_at(fit: &ELFit, beta0: &DVector<f64>) -> Result<(TestResult, TestResult)> {
    if beta0.len() != fit.p() {
        return Err(Error::dimension(format!(
            "beta0 has length {}, expected {}",
            beta0.len(),
            fit.p()
        )));
    }
    let sol = fit.objective_at(beta0)?;
    let flag = if sol.hull_failure {
        TestFlag::HullFailure
    } else {
        TestFlag::Clean
    };
    let full = TestResult {
        statistic: sol.neg2_log_r,
        df: fit.q(),
        p_value: chi2_upper_tail(sol.neg2_log_r, fit.q()),
        kind: TestKind::FullEl,
        flag,
    };
    let w1 = (sol.neg2_log_r - fit.neg2_log_r_at_hat).max(0.0);
    let lr = TestResult {
        statistic: w1,
        df: fit.p(),
        p_value: chi2_upper_tail(w1, fit.p()),
        kind: TestKind::LrFull,
        flag,
    };
    Ok((full, lr))
}

/// Profile likelihood-ratio test for a coordinate subset, with the
/// complementary coordinates re-optimized from the fitted estimate.
pub fn profile_test(fit: &ELFit, subset: &[usize], values: &[f64]) -> Result<TestResult> {
    if subset.is_empty() || subset.len() != values.len() {
        return Err(Error::dimension(
            "profile subset and values must be non-empty and same length".to_string(),
        ));
    }
    let fixed: Vec<(usize, f64)> = subset.iter().copied().zip(values.iter().copied()).collect();
    let (_, objective, converged) = minimize_profile(fit, &fixed, &fit.beta_hat)?;
    let w2 = (objective - fit.neg2_log_r_at_hat).max(0.0);
    let flag = if objective >= HULL_PENALTY {
        TestFlag::HullFailure
    } else if !converged {
        TestFlag::NotConverged
    } else {
        TestFlag::Clean
    };
    let r = subset.len();
    Ok(TestResult {
        statistic: w2,
        df: r,
        p_value: chi2_upper_tail(w2, r),
        kind: TestKind::LrProfile,
        flag,
    })
}

/// Profile confidence interval for one coordinate by inverting the
/// profile statistic at the chi-squared threshold.
///
/// Each side starts at the Wald endpoint, doubles the offset until the
/// statistic crosses the threshold (at most 20 expansions, else the
/// side is flagged unbounded), then refines the bracket by safeguarded
/// false position to `1e-6 * (1 + |estimate|)`. Penalty values from
/// infeasible weight constraints count as outside the region.
pub fn ci_profile(fit: &ELFit, coord: usize, level: f64) -> Result<ConfidenceInterval> {
    if coord >= fit.p() {
        return Err(Error::dimension(format!(
            "coordinate {coord} out of range for p = {}",
            fit.p()
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::validation(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let center = fit.beta_hat[coord];
    let se = fit.asymptotic_cov[(coord, coord)].max(0.0).sqrt();
    let threshold = chi2_quantile(level, 1);
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let tol = 1e-6 * (1.0 + center.abs());

    // Track the latest constrained solution as a warm start; endpoints
    // march monotonically away from the estimate.
    let warm = fit.beta_hat.clone();
    let w2_at = |b: f64, warm: &mut DVector<f64>| -> Result<f64> {
        let (solution, objective, _) = minimize_profile(fit, &[(coord, b)], warm)?;
        if objective < HULL_PENALTY {
            *warm = solution;
        }
        Ok((objective - fit.neg2_log_r_at_hat).max(0.0))
    };

    let solve_side = |sign: f64| -> Result<(f64, bool)> {
        let mut warm_side = warm.clone();
        let initial = se.max(tol);
        let mut offset = z * initial;
        let mut inside = 0.0_f64;
        let mut h_inside = -threshold; // statistic is zero at the estimate
        let mut h_outside = f64::NAN;
        let mut crossed = false;
        for _ in 0..20 {
            let h = w2_at(center + sign * offset, &mut warm_side)? - threshold;
            if h >= 0.0 {
                h_outside = h;
                crossed = true;
                break;
            }
            inside = offset;
            h_inside = h;
            offset *= 2.0;
        }
        if !crossed {
            return Ok((center + sign * offset, false));
        }

        // Safeguarded false position (Illinois) on the bracket.
        let mut outside = offset;
        let mut last_side = 0i8;
        for _ in 0..100 {
            if outside - inside <= tol {
                break;
            }
            let mut t = outside - h_outside * (outside - inside) / (h_outside - h_inside);
            let width = outside - inside;
            if !t.is_finite() || t <= inside + 0.05 * width || t >= outside - 0.05 * width {
                t = inside + 0.5 * width;
            }
            let h = w2_at(center + sign * t, &mut warm_side)? - threshold;
            if h >= 0.0 {
                outside = t;
                h_outside = h;
                if last_side == 1 {
                    h_inside *= 0.5;
                }
                last_side = 1;
            } else {
                inside = t;
                h_inside = h;
                if last_side == -1 {
                    h_outside *= 0.5;
                }
                last_side = -1;
            }
        }
        Ok((center + sign * 0.5 * (inside + outside), true))
    };

    let (lower, lower_bounded) = solve_side(-1.0)?;
    let (upper, upper_bounded) = solve_side(1.0)?;
    Ok(ConfidenceInterval {
        coord,
        lower,
        upper,
        level,
        method: CiMethod::ProfileEl,
        bounded: lower_bounded && upper_bounded,
    })
}

/// Wald interval from a point estimate and its covariance.
pub fn ci_wald(
    beta_hat: &DVector<f64>,
    covariance: &DMatrix<f64>,
    coord: usize,
    level: f64,
) -> Result<ConfidenceInterval> {
    if coord >= beta_hat.len() {
        return Err(Error::dimension(format!(
            "coordinate {coord} out of range for p = {}",
            beta_hat.len()
        )));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::validation(format!(
            "confidence level {level} outside (0, 1)"
        )));
    }
    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let se = covariance[(coord, coord)].max(0.0).sqrt();
    Ok(ConfidenceInterval {
        coord,
        lower: beta_hat[coord] - z * se,
        upper: beta_hat[coord] + z * se,
        level,
        method: CiMethod::Wald,
        bounded: true,
    })
}

/// Covariance of the root-n-scaled estimation error, `n` times the
/// plug-in coefficient covariance. Per-coefficient standard errors are
/// the square roots of its diagonal divided by `n`.
pub fn asymptotic_covariance(fit: &ELFit) -> DMatrix<f64> {
    &fit.asymptotic_cov * fit.n() as f64
}

/// Standard errors of the fitted coefficients.
pub fn standard_errors(fit: &ELFit) -> DVector<f64> {
    fit.standard_errors()
}
