//! Inner solve: the Lagrange multiplier of the empirical-likelihood
//! weights for a fixed moment matrix.
//!
//! The multiplier is the maximizer of the smooth concave dual
//! `sum_i logstar(1 + lambda' g_i)`, where `logstar` extends `log`
//! below `1/n` by a quadratic with matching value and derivatives. At an
//! interior solution every argument exceeds `1/n`, the extension is
//! inactive, and the stationarity condition reproduces the weight
//! equations exactly. When zero lies outside the convex hull of the
//! rows the dual is unbounded; this is detected by multiplier blow-up
//! or a dead line search, and the objective is assigned a large penalty
//! so outer searches can traverse infeasible regions.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Objective value assigned when the weight constraints are infeasible.
pub const HULL_PENALTY: f64 = 1e10;

/// Multiplier norm beyond which the dual is declared divergent.
const LAMBDA_DIVERGENCE: f64 = 1e8;

/// Solution of the inner problem for one moment matrix.
#[derive(Debug, Clone)]
pub struct LagrangeSolution {
    pub lambda: DVector<f64>,
    /// Empirical-likelihood weights; uniform placeholder on hull failure.
    pub weights: DVector<f64>,
    pub neg2_log_r: f64,
    pub converged: bool,
    pub inner_iterations: usize,
    pub hull_failure: bool,
}

struct LogStar {
    eps: f64,
}

impl LogStar {
    fn new(n: usize) -> Self {
        LogStar {
            eps: 1.0 / n as f64,
        }
    }

    fn value(&self, z: f64) -> f64 {
        if z >= self.eps {
            z.ln()
        } else {
            self.eps.ln() - 1.5 + 2.0 * z / self.eps - z * z / (2.0 * self.eps * self.eps)
        }
    }

    fn d1(&self, z: f64) -> f64 {
        if z >= self.eps {
            1.0 / z
        } else {
            2.0 / self.eps - z / (self.eps * self.eps)
        }
    }

    fn d2(&self, z: f64) -> f64 {
        if z >= self.eps {
            -1.0 / (z * z)
        } else {
            -1.0 / (self.eps * self.eps)
        }
    }
}

/// Solve for the multiplier given the `n x q` moment matrix whose rows
/// are the per-subject moment vectors.
///
/// Damped Newton on the dual until the stationarity residual
/// `max_j |sum_i g_ij / (1 + lambda' g_i)| / n` drops below `inner_tol`
/// or `max_iter` iterations pass. The Newton system falls back to an
/// escalating ridge when the Hessian factorization fails.
pub fn solve_lambda(g: &DMatrix<f64>, inner_tol: f64, max_iter: usize) -> Result<LagrangeSolution> {
    solve_lambda_from(g, inner_tol, max_iter, None)
}

/// As [`solve_lambda`], optionally warm-started. A warm start that does
/// not reach an interior solution is retried from zero before the
/// outcome is classified, so warm starts never change the verdict.
pub fn solve_lambda_from(
    g: &DMatrix<f64>,
    inner_tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<LagrangeSolution> {
    let first = solve_lambda_inner(g, inner_tol, max_iter, warm)?;
    if warm.is_some() && !(first.converged && !first.hull_failure) {
        return solve_lambda_inner(g, inner_tol, max_iter, None);
    }
    Ok(first)
}

fn solve_lambda_inner(
    g: &DMatrix<f64>,
    inner_tol: f64,
    max_iter: usize,
    warm: Option<&DVector<f64>>,
) -> Result<LagrangeSolution> {
    let n = g.nrows();
    let q = g.ncols();
    if n < 2 {
        return Err(Error::InsufficientSample {
            message: format!("inner solve needs at least 2 subjects, got {n}"),
        });
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("moment matrix contains non-finite values"));
    }
    if let Some(w) = warm {
        if w.len() != q {
            return Err(Error::dimension(format!(
                "warm multiplier has length {}, expected {q}",
                w.len()
            )));
        }
    }

    let logstar = LogStar::new(n);
    let dual = |lambda: &DVector<f64>| -> f64 {
        let mut total = 0.0;
        for i in 0..n {
            let z = 1.0 + g.row(i).transpose().dot(lambda);
            total += logstar.value(z);
        }
        total
    };

    let mut lambda = warm.cloned().unwrap_or_else(|| DVector::zeros(q));
    let mut iterations = 0usize;
    let mut converged = false;
    let mut diverged = false;
    let mut stalled = false;

    let mut objective = dual(&lambda);
    while iterations < max_iter {
        iterations += 1;

        // Gradient and Hessian of the dual at the current multiplier.
        let mut grad = DVector::<f64>::zeros(q);
        let mut curvature = DMatrix::<f64>::zeros(q, q);
        for i in 0..n {
            let gi = g.row(i).transpose();
            let z = 1.0 + gi.dot(&lambda);
            grad.axpy(logstar.d1(z), &gi, 1.0);
            curvature.ger(-logstar.d2(z), &gi, &gi, 1.0);
        }
        if grad.amax() / n as f64 <= inner_tol {
            converged = true;
            break;
        }

        // Newton step with ridge escalation on factorization failure.
        let trace = curvature.trace();
        let mut ridge = 0.0;
        let direction = loop {
            let mut h = curvature.clone();
            if ridge > 0.0 {
                for j in 0..q {
                    h[(j, j)] += ridge;
                }
            }
            match h.cholesky() {
                Some(chol) => break chol.solve(&grad),
                None => {
                    ridge = if ridge == 0.0 { 1e-12 } else { ridge * 10.0 };
                    if ridge > 1e-2 * trace.max(1.0) {
                        return Err(Error::numerical(
                            "inner Hessian factorization failed after ridge escalation",
                        ));
                    }
                }
            }
        };
        let decrement = grad.dot(&direction);
        debug_assert!(decrement >= -1e-10, "negative Newton decrement {decrement}");

        if decrement <= 1e-12 * (1.0 + objective.abs()) {
            // Objective changes are below rounding noise; take the raw
            // Newton step, which is contractive this close to the
            // stationary point.
            lambda += &direction;
            objective = dual(&lambda);
            continue;
        }

        // Backtracking on the concave dual.
        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-16 {
            let candidate = &lambda + &direction * step;
            let value = dual(&candidate);
            if value >= objective + 1e-4 * step * decrement {
                lambda = candidate;
                objective = value;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            stalled = true;
            break;
        }
        if lambda.norm() > LAMBDA_DIVERGENCE {
            diverged = true;
            break;
        }
    }

    // Classify the outcome. A valid interior solution has every weight
    // in (0, 1], i.e. every argument at or above 1/n.
    let z: Vec<f64> = (0..n)
        .map(|i| 1.0 + g.row(i).transpose().dot(&lambda))
        .collect();
    if stalled && !converged {
        // A dead line search right next to the stationary point is
        // rounding noise, not infeasibility.
        let residual: f64 = {
            let mut grad = DVector::<f64>::zeros(q);
            for (i, &zi) in z.iter().enumerate() {
                grad.axpy(logstar.d1(zi), &g.row(i).transpose(), 1.0);
            }
            grad.amax() / n as f64
        };
        converged = residual <= 1e-6;
    }
    let interior = z.iter().all(|&zi| zi >= logstar.eps * (1.0 - 1e-9));
    let hull_failure = diverged || (stalled && !converged) || (converged && !interior);

    if hull_failure || !converged {
        return Ok(LagrangeSolution {
            lambda,
            weights: DVector::from_element(n, 1.0 / n as f64),
            neg2_log_r: if hull_failure {
                HULL_PENALTY
            } else {
                2.0 * z.iter().map(|&zi| zi.max(logstar.eps).ln()).sum::<f64>()
            },
            converged: false,
            inner_iterations: iterations,
            hull_failure,
        });
    }

    let weights = DVector::from_iterator(n, z.iter().map(|&zi| 1.0 / (n as f64 * zi)));
    let neg2_log_r = 2.0 * z.iter().map(|&zi| zi.ln()).sum::<f64>();
    Ok(LagrangeSolution {
        lambda,
        weights,
        neg2_log_r,
        converged: true,
        inner_iterations: iterations,
        hull_failure: false,
    })
}
