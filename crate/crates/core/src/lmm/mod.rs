//! Maximum-likelihood two-level linear mixed models with site-level fixed
//! effects, a random intercept and optionally a random treatment slope.
//!
//! Fixed effects are profiled out by GLS; the variance components are
//! optimized by BFGS on the log / log-Cholesky scale.

mod fit;
mod model;
pub mod optim;

pub use fit::{
    fit_random_intercept, fit_random_intercept_with, fit_random_slope, fit_random_slope_with, FitDiagnostics,
    FitOptions, RandomInterceptFit, RandomSlopeFit, ETA0_COLUMN,
};
pub use model::{marginal_loglik, ModelData, Profiled, SiteCovariateMatrix, Structure, VarianceComponents};
