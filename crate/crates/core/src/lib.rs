//! Estimation of site-specific local relative effectiveness (LRE) in
//! multisite randomized trials.
//!
//! The pipeline: per-site sufficient statistics ([`data`]), maximum-likelihood
//! mixed models ([`lmm`]), empirical-Bayes posteriors ([`eb`]), the candidate
//! estimation [`strategies`], and a Monte Carlo [`harness`] built on the
//! synthetic generator in [`simgen`] and the error [`metrics`].
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below fix the
//! precision.

pub mod data;
pub mod eb;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod lmm;
pub mod metrics;
pub mod scalar;
pub mod simgen;
pub mod strategies;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type SiteStats = data::SiteSufficientStats<f64>;
pub type SiteStats32 = data::SiteSufficientStats<f32>;
pub type RandomInterceptFit = lmm::RandomInterceptFit<f64>;
pub type RandomInterceptFit32 = lmm::RandomInterceptFit<f32>;
pub type RandomSlopeFit = lmm::RandomSlopeFit<f64>;
pub type RandomSlopeFit32 = lmm::RandomSlopeFit<f32>;
pub type EbIntercept = eb::EbIntercept<f64>;
pub type EbSlope = eb::EbSlope<f64>;
