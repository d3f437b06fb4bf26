//! Empirical-likelihood core: the inner Lagrange-multiplier solve, the
//! profile objective `-2 log R(beta)`, and the outer estimation loop.

mod fit;
mod lambda;
mod model;

pub use fit::{fit_mele, fit_naive_el_model, minimize_profile, ELFit, ElConfig, MomentKind};
pub use lambda::{solve_lambda, LagrangeSolution, HULL_PENALTY};
pub use model::LinearMomentModel;
