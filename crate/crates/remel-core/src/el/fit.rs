//! Outer estimation loop: iterate working-covariance estimation, basis
//! construction, and quasi-Newton minimization of the profile objective
//! until the coefficients settle.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::auxiliary::{reduce_basis, AuxiliaryBasis, DEFAULT_RANK_TOL};
use crate::covariance::{estimate_working_covariance, CovStructure, WorkingCovariance};
use crate::dataset::LongitudinalDataset;
use crate::error::{Error, Result};

use super::lambda::{solve_lambda, LagrangeSolution, HULL_PENALTY};
use super::model::LinearMomentModel;

/// Which moment construction backs a fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MomentKind {
    /// Reduced cross-replicate moment vector.
    ReplicateCross,
    /// Averaged-surrogate moments (`q = p`).
    Averaged,
}

/// Tolerances and iteration limits for the estimation loop.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ElConfig {
    pub structure: CovStructure,
    /// Stationarity tolerance of the inner multiplier solve.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Sup-norm gradient tolerance of the quasi-Newton search.
    pub outer_grad_tol: f64,
    /// Coefficient-step tolerance of the outer loop.
    pub step_tol: f64,
    /// Objective-change tolerance of the outer loop.
    pub obj_tol: f64,
    pub max_outer: usize,
    pub bfgs_max_iter: usize,
    /// Pivot threshold for basis reduction.
    pub rank_tol: f64,
}

impl Default for ElConfig {
    fn default() -> Self {
        ElConfig {
            structure: CovStructure::Exchangeable,
            inner_tol: 1e-10,
            inner_max_iter: 100,
            outer_grad_tol: 1e-5,
            step_tol: 1e-8,
            obj_tol: 1e-10,
            max_outer: 50,
            bfgs_max_iter: 200,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// Converged maximum empirical-likelihood fit.
#[derive(Debug, Clone)]
pub struct ELFit {
    pub beta_hat: DVector<f64>,
    pub lambda_hat: DVector<f64>,
    /// Retained basis; `None` for averaged-surrogate fits.
    pub basis: Option<AuxiliaryBasis>,
    pub working_cov: WorkingCovariance,
    pub neg2_log_r_at_hat: f64,
    pub outer_iterations: usize,
    /// Plug-in covariance of the coefficient estimate,
    /// `(L_n' M_n^{-1} L_n)^{-1}` evaluated at the estimate.
    pub asymptotic_cov: DMatrix<f64>,
    pub converged: bool,
    /// True when the retained tag set changed across outer iterations.
    pub basis_drift: bool,
    pub kind: MomentKind,
    pub(crate) model: LinearMomentModel,
    pub(crate) config: ElConfig,
}

impl ELFit {
    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }

    pub fn n(&self) -> usize {
        self.model.n()
    }

    pub fn q(&self) -> usize {
        self.model.q()
    }

    /// Per-coefficient standard errors from the plug-in covariance.
    pub fn standard_errors(&self) -> DVector<f64> {
        self.asymptotic_cov.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub(crate) fn model(&self) -> &LinearMomentModel {
        &self.model
    }

    pub(crate) fn config(&self) -> &ElConfig {
        &self.config
    }

    /// Profile objective at arbitrary coefficients under the fit's
    /// working covariance and basis.
    pub fn objective_at(&self, beta: &DVector<f64>) -> Result<LagrangeSolution> {
        let g = self.model.moment_matrix(beta);
        solve_lambda(&g, self.config.inner_tol, self.config.inner_max_iter)
    }
}

/// Objective `-2 log R(beta)` with its envelope gradient; the gradient
/// is absent wherever the weight constraints are infeasible. The last
/// interior multiplier warm-starts the next inner solve; the inner
/// solver re-solves from zero before classifying any failure, so the
/// cache is purely a speedup.
pub(crate) struct ProfileObjective<'a> {
    model: &'a LinearMomentModel,
    inner_tol: f64,
    inner_max_iter: usize,
    last_lambda: std::cell::RefCell<Option<DVector<f64>>>,
}

impl<'a> ProfileObjective<'a> {
    pub(crate) fn new(model: &'a LinearMomentModel, config: &ElConfig) -> Self {
        ProfileObjective {
            model,
            inner_tol: config.inner_tol,
            inner_max_iter: config.inner_max_iter,
            last_lambda: std::cell::RefCell::new(None),
        }
    }

    pub(crate) fn eval(&self, beta: &DVector<f64>) -> Result<(f64, Option<DVector<f64>>)> {
        let g = self.model.moment_matrix(beta);
        let warm = self.last_lambda.borrow().clone();
        let sol = super::lambda::solve_lambda_from(
            &g,
            self.inner_tol,
            self.inner_max_iter,
            warm.as_ref(),
        )?;
        if sol.hull_failure {
            return Ok((HULL_PENALTY, None));
        }
        *self.last_lambda.borrow_mut() = Some(sol.lambda.clone());
        let grad = self.model.envelope_gradient(beta, &sol.lambda);
        Ok((sol.neg2_log_r, Some(grad)))
    }
}

struct BfgsOutcome {
    x: DVector<f64>,
    f: f64,
    converged: bool,
    start_infeasible: bool,
}

type Evaluation = Result<(f64, Option<DVector<f64>>)>;

/// Dense BFGS with backtracking line search. The objective may return
/// `None` for the gradient inside penalty regions; such points are
/// never accepted unless the search starts there. `h0` seeds the
/// inverse-Hessian approximation (the plug-in curvature makes the first
/// steps Newton-like).
fn bfgs_minimize(
    eval: &dyn Fn(&DVector<f64>) -> Evaluation,
    start: &DVector<f64>,
    grad_tol: f64,
    max_iter: usize,
    h0: Option<DMatrix<f64>>,
) -> Result<BfgsOutcome> {
    let d = start.len();
    let mut x = start.clone();
    let (mut f, grad0) = eval(&x)?;
    let Some(mut grad) = grad0 else {
        return Ok(BfgsOutcome {
            x,
            f,
            converged: false,
            start_infeasible: true,
        });
    };

    let mut h_inv = h0
        .filter(|h| h.nrows() == d && h.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| DMatrix::identity(d, d));
    let mut converged = false;
    for _ in 0..max_iter {
        if grad.amax() <= grad_tol {
            converged = true;
            break;
        }
        let mut direction = -(&h_inv * &grad);
        if direction.dot(&grad) >= 0.0 {
            h_inv = DMatrix::identity(d, d);
            direction = -grad.clone();
        }
        let slope = direction.dot(&grad);

        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-14 {
            let candidate = &x + &direction * step;
            let (fc, gc) = eval(&candidate)?;
            if let Some(gc) = gc {
                if fc <= f + 1e-4 * step * slope {
                    accepted = Some((candidate, fc, gc));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((x_new, f_new, grad_new)) = accepted else {
            // Dead line search; accept the current point. Near the
            // optimum this is rounding noise in the objective.
            converged = grad.amax() <= (1e3 * grad_tol).max(1e-3);
            break;
        };

        let s = &x_new - &x;
        let y = &grad_new - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            // Standard inverse-Hessian update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let mut update = DMatrix::zeros(d, d);
            update.ger((1.0 + rho * yhy) * rho, &s, &s, 1.0);
            let hy_s = &hy * s.transpose() * rho;
            update -= &hy_s;
            update -= hy_s.transpose();
            h_inv += update;
        }

        let stall =
            s.amax() < 1e-12 * (1.0 + x.amax()) || (f - f_new).abs() < 1e-14 * (1.0 + f.abs());
        x = x_new;
        f = f_new;
        grad = grad_new;
        if stall {
            converged = grad.amax() <= (1e3 * grad_tol).max(1e-3);
            break;
        }
    }
    if !converged && grad.amax() <= grad_tol {
        converged = true;
    }
    Ok(BfgsOutcome {
        x,
        f,
        converged,
        start_infeasible: false,
    })
}

/// Minimize the profile objective over the coordinates not listed in
/// `fixed`, holding the listed ones at their given values. With every
/// coordinate fixed this is a plain evaluation.
pub fn minimize_profile(
    fit: &ELFit,
    fixed: &[(usize, f64)],
    start: &DVector<f64>,
) -> Result<(DVector<f64>, f64, bool)> {
    let p = fit.p();
    let objective = ProfileObjective::new(fit.model(), fit.config());
    let mut full = start.clone();
    for &(idx, value) in fixed {
        if idx >= p {
            return Err(Error::dimension(format!(
                "profile coordinate {idx} out of range for p = {p}"
            )));
        }
        full[idx] = value;
    }
    let free: Vec<usize> = (0..p)
        .filter(|&i| !fixed.iter().any(|&(j, _)| j == i))
        .collect();
    if free.is_empty() {
        let (f, _) = objective.eval(&full)?;
        return Ok((full, f, true));
    }

    let embed = |xf: &DVector<f64>| {
        let mut b = full.clone();
        for (slot, &idx) in free.iter().enumerate() {
            b[idx] = xf[slot];
        }
        b
    };
    let eval_free = |xf: &DVector<f64>| -> Evaluation {
        let beta = embed(xf);
        let (f, g) = objective.eval(&beta)?;
        Ok((
            f,
            g.map(|grad| DVector::from_iterator(free.len(), free.iter().map(|&i| grad[i]))),
        ))
    };

    // Seed the free-subspace search with the inverse of the free block
    // of the plug-in curvature 2 (L' M^{-1} L).
    let h0 = fit
        .asymptotic_cov
        .clone()
        .cholesky()
        .map(|chol| {
            let curvature = chol.inverse() * 2.0;
            let sub =
                DMatrix::from_fn(free.len(), free.len(), |r, c| curvature[(free[r], free[c])]);
            sub.cholesky().map(|c| c.inverse())
        })
        .unwrap_or(None);

    let x0 = DVector::from_iterator(free.len(), free.iter().map(|&i| full[i]));
    let outcome = bfgs_minimize(
        &eval_free,
        &x0,
        fit.config().outer_grad_tol,
        fit.config().bfgs_max_iter,
        h0,
    )?;
    Ok((
        embed(&outcome.x),
        outcome.f,
        outcome.converged && !outcome.start_infeasible,
    ))
}

/// Estimate the coefficients by maximum empirical likelihood over the
/// reduced cross-replicate moment vector.
///
/// Starts from the cross-replicate estimating-equation solution under
/// working independence, then alternates working-covariance estimation,
/// basis construction, and quasi-Newton minimization until the
/// coefficient step or objective change is negligible. If the weight
/// constraints are infeasible at the independence start, a second start
/// under an exchangeable working covariance is tried.
pub fn fit_mele(ds: &LongitudinalDataset, config: &ElConfig) -> Result<ELFit> {
    let indep = WorkingCovariance::independence(1.0);
    let start = LinearMomentModel::summed_pairs(ds, &indep)?.solve_moment_equation()?;
    match fit_loop(ds, config, &start, MomentKind::ReplicateCross) {
        Err(Error::HullFailure { .. }) => {
            let cov = estimate_working_covariance(ds, &start, CovStructure::Exchangeable)?;
            let restart = LinearMomentModel::summed_pairs(ds, &cov)?.solve_moment_equation()?;
            fit_loop(ds, config, &restart, MomentKind::ReplicateCross).map_err(|e| match e {
                Error::HullFailure { .. } => Error::HullFailure {
                    message: "weight constraints infeasible at both starting values; \
                              consider a smaller model or more subjects"
                        .to_string(),
                },
                other => other,
            })
        }
        other => other,
    }
}

/// Empirical-likelihood fit over the averaged-surrogate moments
/// (`q = p`); the estimate coincides with the naive weighted
/// least-squares solution and the multiplier vanishes at the optimum.
pub fn fit_naive_el_model(ds: &LongitudinalDataset, config: &ElConfig) -> Result<ELFit> {
    let indep = WorkingCovariance::independence(1.0);
    let start = LinearMomentModel::averaged(ds, &indep)?.solve_moment_equation()?;
    fit_loop(ds, config, &start, MomentKind::Averaged)
}

fn fit_loop(
    ds: &LongitudinalDataset,
    config: &ElConfig,
    start: &DVector<f64>,
    kind: MomentKind,
) -> Result<ELFit> {
    let mut beta = start.clone();
    let mut prev_obj = f64::INFINITY;
    let mut prev_basis: Option<AuxiliaryBasis> = None;
    let mut basis_drift = false;
    let mut converged = false;
    let mut outer_iterations = 0;
    let mut state: Option<(WorkingCovariance, Option<AuxiliaryBasis>, LinearMomentModel)> = None;

    for outer in 0..config.max_outer {
        outer_iterations = outer + 1;
        let cov = estimate_working_covariance(ds, &beta, config.structure)?;
        let (basis, model) = match kind {
            MomentKind::ReplicateCross => {
                let basis = reduce_basis(ds, &beta, &cov, config.rank_tol)?;
                if let Some(prev) = &prev_basis {
                    if !prev.same_tags(&basis) {
                        basis_drift = true;
                    }
                }
                prev_basis = Some(basis.clone());
                let model = LinearMomentModel::from_basis(ds, &basis, &cov)?;
                (Some(basis), model)
            }
            MomentKind::Averaged => (None, LinearMomentModel::averaged(ds, &cov)?),
        };

        let objective = ProfileObjective::new(&model, config);
        let h0 = model.plugin_covariance(&beta).ok().map(|c| c * 0.5);
        let outcome = bfgs_minimize(
            &|b| objective.eval(b),
            &beta,
            config.outer_grad_tol,
            config.bfgs_max_iter,
            h0,
        )?;
        if outcome.start_infeasible {
            return Err(Error::HullFailure {
                message: "weight constraints infeasible at the starting value".to_string(),
            });
        }

        let step = (&outcome.x - &beta).amax();
        let obj_change = (prev_obj - outcome.f).abs();
        beta = outcome.x;
        prev_obj = outcome.f;
        state = Some((cov, basis, model));
        if step < config.step_tol || obj_change < config.obj_tol {
            converged = outcome.converged;
            break;
        }
    }

    let (working_cov, basis, model) = state.expect("at least one outer iteration ran");
    let g = model.moment_matrix(&beta);
    let solution = solve_lambda(&g, config.inner_tol, config.inner_max_iter)?;
    if solution.hull_failure {
        return Err(Error::HullFailure {
            message: "weight constraints infeasible at the final estimate".to_string(),
        });
    }
    let asymptotic_cov = model.plugin_covariance(&beta)?;

    Ok(ELFit {
        beta_hat: beta,
        lambda_hat: solution.lambda,
        basis,
        working_cov,
        neg2_log_r_at_hat: solution.neg2_log_r,
        outer_iterations,
        asymptotic_cov,
        converged,
        basis_drift,
        kind,
        model,
        config: *config,
    })
}
