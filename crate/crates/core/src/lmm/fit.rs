use serde::Serialize;

use super::model::{dot, symmetrize, ModelData, SiteCovariateMatrix, Structure, VarianceComponents};
use super::optim::{minimize, BfgsOptions};
use crate::data::SiteSufficientStats;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, ols, Sym2};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct FitOptions<F> {
    pub bfgs: BfgsOptions<F>,
    /// A random-effect variance below this fraction of the typical sampling
    /// variance of its site mean is reported as 0 (boundary estimate).
    pub boundary_tol: F,
}

impl<F: Scalar> Default for FitOptions<F> {
    fn default() -> Self {
        Self {
            bfgs: BfgsOptions::default(),
            boundary_tol: F::lit(1e-6),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct FitDiagnostics<F: Scalar> {
    pub gradient_norm: F,
    pub message: String,
    /// Log-likelihood at every accepted iterate.
    pub loglik_trace: Vec<F>,
}

/// Random-intercept fit on control data:
/// `Y = α00 + α01·Φ_X + η0j + e`, `η0j ~ N(0, ω00)`, `e ~ N(0, σ0²)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct RandomInterceptFit<F: Scalar> {
    pub covariates: Vec<String>,
    pub alpha00: F,
    pub alpha01: Vec<F>,
    pub omega00: F,
    pub sigma0_sq: F,
    pub loglik: F,
    pub converged: bool,
    pub iterations: usize,
    /// ω00 reported as 0 at the boundary of the parameter space.
    pub boundary: bool,
    pub diagnostics: FitDiagnostics<F>,
}

impl<F: Scalar> RandomInterceptFit<F> {
    /// `α00 + α01·φ`.
    pub fn predict(&self, phi: &[F]) -> F {
        self.alpha00 + dot(&self.alpha01, phi)
    }
}

/// Random intercept-and-slope fit:
/// control mean `γ00 + γ0·w0 + v0j`, ITT `γ10 + γ1·w1 + v1j`,
/// `(v0j, v1j) ~ N(0, T)`, arm-specific residual variances.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct RandomSlopeFit<F: Scalar> {
    pub intercept_covariates: Vec<String>,
    pub slope_covariates: Vec<String>,
    /// `γ00` followed by the coefficients on `intercept_covariates`.
    pub intercept_coef: Vec<F>,
    /// `γ10` followed by the coefficients on `slope_covariates`.
    pub slope_coef: Vec<F>,
    pub t: Sym2<F>,
    pub sigma0_sq: F,
    pub sigma1_sq: F,
    pub loglik: F,
    pub converged: bool,
    pub iterations: usize,
    pub boundary: bool,
    pub diagnostics: FitDiagnostics<F>,
}

impl<F: Scalar> RandomSlopeFit<F> {
    pub fn predict_control(&self, w0: &[F]) -> F {
        self.intercept_coef[0] + dot(&self.intercept_coef[1..], w0)
    }

    pub fn predict_itt(&self, w1: &[F]) -> F {
        self.slope_coef[0] + dot(&self.slope_coef[1..], w1)
    }

    pub fn tau00(&self) -> F {
        self.t.a00
    }

    pub fn tau01(&self) -> F {
        self.t.a01
    }

    pub fn tau11(&self) -> F {
        self.t.a11
    }

    /// Coefficient on the named slope covariate (e.g. `"eta0_star"` gives γ12).
    pub fn slope_coef_for(&self, name: &str) -> Option<F> {
        let i = self.slope_covariates.iter().position(|n| n == name)?;
        Some(self.slope_coef[i + 1])
    }

    pub fn intercept_coef_for(&self, name: &str) -> Option<F> {
        let i = self.intercept_covariates.iter().position(|n| n == name)?;
        Some(self.intercept_coef[i + 1])
    }
}

pub const ETA0_COLUMN: &str = "eta0_star";

/// Step 1: random-intercept ML fit on the control arm.
pub fn fit_random_intercept<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    site_covariates: &SiteCovariateMatrix<F>,
) -> Result<RandomInterceptFit<F>> {
    fit_random_intercept_with(stats, site_covariates, &FitOptions::default())
}

pub fn fit_random_intercept_with<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    site_covariates: &SiteCovariateMatrix<F>,
    opts: &FitOptions<F>,
) -> Result<RandomInterceptFit<F>> {
    if stats.len() < 2 {
        return Err(Error::Validation(format!("random-intercept fit needs >= 2 sites, got {}", stats.len())));
    }
    let model = ModelData::intercept(stats, site_covariates)?;
    let raw = fit_model(&model, opts)?;
    let mean_n0 = model.n0().iter().copied().sum::<F>() / F::from_count(model.num_sites());
    let mut omega00 = raw.vc.t.a00;
    let boundary = omega00 < opts.boundary_tol * raw.vc.sigma0_sq / mean_n0;
    if boundary {
        omega00 = F::zero();
    }
    Ok(RandomInterceptFit {
        covariates: site_covariates.names.clone(),
        alpha00: raw.beta[0],
        alpha01: raw.beta[1..].to_vec(),
        omega00,
        sigma0_sq: raw.vc.sigma0_sq,
        loglik: raw.loglik,
        converged: raw.converged,
        iterations: raw.iterations,
        boundary,
        diagnostics: raw.diagnostics,
    })
}

/// Step 2: random intercept-and-slope fit with `(1, Φ_X, η0*)` in both
/// equations.
pub fn fit_random_slope<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    site_covariates: &SiteCovariateMatrix<F>,
    eta0_star: &[F],
) -> Result<RandomSlopeFit<F>> {
    if eta0_star.len() != stats.len() {
        return Err(Error::Validation(format!(
            "eta0_star has {} entries for {} sites",
            eta0_star.len(),
            stats.len()
        )));
    }
    let covs = site_covariates.with_column(ETA0_COLUMN, eta0_star);
    fit_random_slope_with(stats, &covs, &covs, &FitOptions::default())
}

/// Random intercept-and-slope fit with arbitrary site-level covariates in
/// each equation.
pub fn fit_random_slope_with<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    intercept_covs: &SiteCovariateMatrix<F>,
    slope_covs: &SiteCovariateMatrix<F>,
    opts: &FitOptions<F>,
) -> Result<RandomSlopeFit<F>> {
    if stats.len() < 3 {
        return Err(Error::Validation(format!("random-slope fit needs >= 3 sites, got {}", stats.len())));
    }
    let model = ModelData::intercept_slope(stats, intercept_covs, slope_covs)?;
    let raw = fit_model(&model, opts)?;
    let j = F::from_count(model.num_sites());
    let mean_n0 = model.n0().iter().copied().sum::<F>() / j;
    let mean_n1 = model.n1().iter().copied().sum::<F>() / j;
    let mut t = raw.vc.t;
    let mut boundary = false;
    if t.a00 < opts.boundary_tol * raw.vc.sigma0_sq / mean_n0 {
        t = Sym2::new(F::zero(), F::zero(), t.a11);
        boundary = true;
    }
    if t.a11 < opts.boundary_tol * raw.vc.sigma1_sq / mean_n1 {
        t = Sym2::new(t.a00, F::zero(), F::zero());
        boundary = true;
    }
    if t.det() <= opts.boundary_tol * t.a00 * t.a11 {
        boundary = true;
    }
    let q0 = intercept_covs.width() + 1;
    Ok(RandomSlopeFit {
        intercept_covariates: intercept_covs.names.clone(),
        slope_covariates: slope_covs.names.clone(),
        intercept_coef: raw.beta[..q0].to_vec(),
        slope_coef: raw.beta[q0..].to_vec(),
        t,
        sigma0_sq: raw.vc.sigma0_sq,
        sigma1_sq: raw.vc.sigma1_sq,
        loglik: raw.loglik,
        converged: raw.converged,
        iterations: raw.iterations,
        boundary,
        diagnostics: raw.diagnostics,
    })
}

struct RawFit<F: Scalar> {
    vc: VarianceComponents<F>,
    beta: Vec<F>,
    loglik: F,
    converged: bool,
    iterations: usize,
    diagnostics: FitDiagnostics<F>,
}

fn fit_model<F: Scalar>(model: &ModelData<F>, opts: &FitOptions<F>) -> Result<RawFit<F>> {
    check_rank(model)?;
    let start = moment_start(model)?;
    let theta0 = start.to_unconstrained(model.structure);
    let result = minimize(
        |theta| {
            let p = model.profiled(theta)?;
            Ok((-p.value, p.grad.iter().map(|&g| -g).collect()))
        },
        &theta0,
        &opts.bfgs,
    )?;
    let best = model.profiled(&result.x)?;
    let grad_norm = best.grad.iter().map(|&g| g * g).sum::<F>().sqrt();
    Ok(RawFit {
        vc: best.vc,
        beta: best.beta,
        loglik: best.value,
        converged: result.converged,
        iterations: result.iterations,
        diagnostics: FitDiagnostics {
            gradient_norm: grad_norm,
            message: result.message,
            loglik_trace: result.history.iter().map(|&f| -f).collect(),
        },
    })
}

/// Rejects collinear fixed-effect designs, naming the dependent columns.
fn check_rank<F: Scalar>(model: &ModelData<F>) -> Result<()> {
    let p = model.num_fixed();
    let both = model.structure == Structure::InterceptSlope;
    let mut xtx = vec![F::zero(); p * p];
    let mut rows: Vec<&[F]> = Vec::new();
    for j in 0..model.num_sites() {
        rows.push(model.x0(j));
        if both {
            rows.push(model.x1(j));
        }
    }
    for row in &rows {
        for r in 0..p {
            for c in 0..=r {
                xtx[r * p + c] += row[r] * row[c];
            }
        }
    }
    symmetrize(&mut xtx, p);
    let Err(col) = cholesky(&xtx, p) else {
        return Ok(());
    };
    // Regress the failing column on its predecessors to name the culprits.
    let flat: Vec<F> = rows.iter().flat_map(|r| r[..col].iter().copied()).collect();
    let target: Vec<F> = rows.iter().map(|r| r[col]).collect();
    let mut columns = match ols(&flat, &target, col) {
        Ok(coef) => coef
            .iter()
            .enumerate()
            .filter(|(_, c)| c.abs() > F::lit(1e-8))
            .map(|(i, _)| model.columns[i].clone())
            .collect(),
        Err(_) => Vec::new(),
    };
    columns.push(model.columns[col].clone());
    Err(Error::RankDeficient { columns })
}

/// Method-of-moments start: pooled within-arm variances, and between-site
/// residual (co)variances of the OLS fits of each equation net of the mean
/// sampling (co)variance.
fn moment_start<F: Scalar>(model: &ModelData<F>) -> Result<VarianceComponents<F>> {
    let j_total = model.num_sites();
    let jf = F::from_count(j_total);
    let (ss0, ss1) = model.ss();
    let pooled = |ss: &[F], n: &[F], fallback: F| {
        let dof: F = n.iter().map(|&v| v - F::one()).sum();
        let s: F = ss.iter().copied().sum();
        if dof > F::zero() && s > F::zero() {
            s / dof
        } else {
            fallback
        }
    };
    let p = model.num_fixed();
    let resid = |m: &[F], row: &dyn Fn(usize) -> Vec<F>| -> Result<Vec<F>> {
        let active: Vec<usize> = (0..p).filter(|&c| (0..j_total).any(|j| row(j)[c] != F::zero())).collect();
        let flat: Vec<F> = (0..j_total).flat_map(|j| active.iter().map(move |&c| row(j)[c]).collect::<Vec<_>>()).collect();
        let coef = ols(&flat, m, active.len())?;
        Ok((0..j_total)
            .map(|j| {
                let r = row(j);
                m[j] - active.iter().zip(&coef).map(|(&c, &b)| r[c] * b).sum::<F>()
            })
            .collect())
    };
    let var_of = |r: &[F]| r.iter().map(|&v| v * v).sum::<F>() / jf;
    let r0 = resid(model.ybar0(), &|j| model.x0(j).to_vec())?;
    let spread0 = var_of(&r0);
    let sigma0_sq = pooled(ss0, model.n0(), spread0.max(F::lit(1e-8)));
    let mean_inv_n0 = model.n0().iter().map(|&n| F::one() / n).sum::<F>() / jf;
    let floor = F::lit(0.05);
    let t00 = (spread0 - sigma0_sq * mean_inv_n0).max(floor * spread0).max(F::lit(1e-8) * sigma0_sq);
    match model.structure {
        Structure::Intercept => Ok(VarianceComponents {
            sigma0_sq,
            sigma1_sq: F::nan(),
            t: Sym2::new(t00, F::zero(), F::zero()),
        }),
        Structure::InterceptSlope => {
            let r1 = resid(model.itt(), &|j| model.x1(j).to_vec())?;
            let spread1 = var_of(&r1);
            let sigma1_sq = pooled(ss1, model.n1(), sigma0_sq);
            let mean_inv_n1 = model.n1().iter().map(|&n| F::one() / n).sum::<F>() / jf;
            let t11 = (spread1 - sigma1_sq * mean_inv_n1 - sigma0_sq * mean_inv_n0)
                .max(floor * spread1)
                .max(F::lit(1e-8) * sigma1_sq);
            let cov = r0.iter().zip(&r1).map(|(&a, &b)| a * b).sum::<F>() / jf + sigma0_sq * mean_inv_n0;
            let bound = F::lit(0.5) * (t00 * t11).sqrt();
            let t01 = cov.max(-bound).min(bound);
            Ok(VarianceComponents {
                sigma0_sq,
                sigma1_sq,
                t: Sym2::new(t00, t01, t11),
            })
        }
    }
}
