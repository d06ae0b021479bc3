//! Empirical-Bayes posteriors for the site random effects, given plugged-in
//! ML variance components.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::data::SiteSufficientStats;
use crate::error::{Error, Result};
use crate::linalg::Sym2;
use crate::lmm::{RandomInterceptFit, RandomSlopeFit, SiteCovariateMatrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct EbIntercept<F: Scalar> {
    pub site_id: String,
    pub eta0_star: F,
    pub post_var: F,
    pub lambda0: F,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound = "")]
pub struct EbSlope<F: Scalar> {
    pub site_id: String,
    pub v1_star: F,
    pub post_var: F,
    pub lambda_matrix: [[F; 2]; 2],
    /// The raw posterior variance was negative and has been set to 0.
    pub clamped: bool,
}

/// `ω00 / (ω00 + σ0²/n0)`.
pub fn reliability_intercept<F: Scalar>(omega00: F, sigma0_sq: F, n0: usize) -> F {
    if omega00 <= F::zero() {
        return F::zero();
    }
    omega00 / (omega00 + sigma0_sq / F::from_count(n0))
}

/// Shrunken control-mean deviation of one site.
pub fn posterior_intercept<F: Scalar>(
    stats: &SiteSufficientStats<F>,
    fit: &RandomInterceptFit<F>,
    phi_x: &[F],
) -> EbIntercept<F> {
    let lambda0 = reliability_intercept(fit.omega00, fit.sigma0_sq, stats.n0);
    EbIntercept {
        site_id: stats.site_id.clone(),
        eta0_star: lambda0 * (stats.ybar0 - fit.predict(phi_x)),
        post_var: fit.omega00 * (F::one() - lambda0),
        lambda0,
    }
}

pub fn posterior_intercepts<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    fit: &RandomInterceptFit<F>,
    covs: &SiteCovariateMatrix<F>,
) -> Vec<EbIntercept<F>> {
    stats
        .iter()
        .enumerate()
        .map(|(j, s)| posterior_intercept(s, fit, covs.row(j)))
        .collect()
}

/// Sampling covariance of `(ȳ0, ȳ1 − ȳ0)`.
pub fn sampling_covariance<F: Scalar>(sigma0_sq: F, sigma1_sq: F, n0: usize, n1: usize) -> Sym2<F> {
    let a = sigma0_sq / F::from_count(n0);
    let b = sigma1_sq / F::from_count(n1);
    Sym2::new(a, -a, b + a)
}

/// `Λ = T (T + V)⁻¹`.
pub fn reliability_matrix<F: Scalar>(t: &Sym2<F>, sigma0_sq: F, sigma1_sq: F, n0: usize, n1: usize) -> Result<[[F; 2]; 2]> {
    let v = sampling_covariance(sigma0_sq, sigma1_sq, n0, n1);
    let inv = t
        .add(&v)
        .inverse()
        .ok_or_else(|| Error::Domain(format!("T + V is singular (n0={n0}, n1={n1})")))?;
    Ok(crate::linalg::mul_sym2(t, &inv))
}

/// Posterior of the slope random effect given the fitted predictions of the
/// control mean and of the ITT effect.
pub fn posterior_slope_at<F: Scalar>(
    stats: &SiteSufficientStats<F>,
    t: &Sym2<F>,
    sigma0_sq: F,
    sigma1_sq: F,
    pred_control: F,
    pred_itt: F,
) -> Result<EbSlope<F>> {
    let l = reliability_matrix(t, sigma0_sq, sigma1_sq, stats.n0, stats.n1)?;
    let r0 = stats.ybar0 - pred_control;
    let r1 = stats.itt() - pred_itt;
    let v1_star = l[1][0] * r0 + l[1][1] * r1;
    let raw_var = -l[1][0] * t.a01 + (F::one() - l[1][1]) * t.a11;
    let clamped = raw_var < F::zero();
    Ok(EbSlope {
        site_id: stats.site_id.clone(),
        v1_star,
        post_var: if clamped { F::zero() } else { raw_var },
        lambda_matrix: l,
        clamped,
    })
}

pub fn posterior_slope<F: Scalar>(
    stats: &SiteSufficientStats<F>,
    fit: &RandomSlopeFit<F>,
    intercept_row: &[F],
    slope_row: &[F],
) -> Result<EbSlope<F>> {
    posterior_slope_at(
        stats,
        &fit.t,
        fit.sigma0_sq,
        fit.sigma1_sq,
        fit.predict_control(intercept_row),
        fit.predict_itt(slope_row),
    )
}

pub fn posterior_slopes<F: Scalar>(
    stats: &[SiteSufficientStats<F>],
    fit: &RandomSlopeFit<F>,
    intercept_covs: &SiteCovariateMatrix<F>,
    slope_covs: &SiteCovariateMatrix<F>,
) -> Result<Vec<EbSlope<F>>> {
    stats
        .iter()
        .enumerate()
        .map(|(j, s)| posterior_slope(s, fit, intercept_covs.row(j), slope_covs.row(j)))
        .collect()
}

/// Writes `site,eta0_star,eta0_postvar,v1_star,v1_postvar,lambda11`.
pub fn write_eb_csv<F: Scalar>(path: &Path, intercepts: &[EbIntercept<F>], slopes: &[EbSlope<F>]) -> Result<()> {
    if intercepts.len() != slopes.len() {
        return Err(Error::Validation(format!(
            "{} intercept posteriors for {} slope posteriors",
            intercepts.len(),
            slopes.len()
        )));
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        writeln!(w, "site,eta0_star,eta0_postvar,v1_star,v1_postvar,lambda11")?;
        for (a, b) in intercepts.iter().zip(slopes) {
            writeln!(
                w,
                "{},{:?},{:?},{:?},{:?},{:?}",
                a.site_id,
                a.eta0_star.as_f64(),
                a.post_var.as_f64(),
                b.v1_star.as_f64(),
                b.post_var.as_f64(),
                b.lambda_matrix[1][1].as_f64()
            )?;
        }
        w.flush()
    };
    out().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn site(n0: usize, n1: usize, ybar0: f64, ybar1: f64) -> SiteSufficientStats<f64> {
        SiteSufficientStats {
            site_id: "a".into(),
            n0,
            n1,
            ybar0,
            ybar1,
            ss0: 0.0,
            ss1: 0.0,
        }
    }

    #[test]
    fn intercept_reliability_values() {
        assert_eq!(reliability_intercept(0.0, 1.0, 5), 0.0);
        assert_eq!(reliability_intercept(1.0, 1.0, 1), 0.5);
        assert!(reliability_intercept(1.0, 1.0, 1_000_000) > 0.999999);
    }

    fn intercept_fit(omega00: f64) -> RandomInterceptFit<f64> {
        RandomInterceptFit {
            covariates: vec![],
            alpha00: 3.0,
            alpha01: vec![],
            omega00,
            sigma0_sq: 1.0,
            loglik: 0.0,
            converged: true,
            iterations: 0,
            boundary: omega00 == 0.0,
            diagnostics: crate::lmm::FitDiagnostics {
                gradient_norm: 0.0,
                message: String::new(),
                loglik_trace: vec![],
            },
        }
    }

    #[test]
    fn intercept_posterior() {
        let s = site(1, 1, 5.0, 0.0);
        let eb = posterior_intercept(&s, &intercept_fit(1.0), &[]);
        assert_eq!(eb.lambda0, 0.5);
        assert_eq!(eb.eta0_star, 1.0);
        assert_eq!(eb.post_var, 0.5);
        let eb = posterior_intercept(&s, &intercept_fit(0.0), &[]);
        assert_eq!((eb.eta0_star, eb.post_var), (0.0, 0.0));
    }

    #[test]
    fn reliability_matrix_limits() {
        let l = reliability_matrix(&Sym2::zero(), 1.0, 1.0, 3, 4).unwrap();
        assert_eq!(l, [[0.0; 2]; 2]);
        let t = Sym2::new(2.0, 0.5, 1.0);
        let l = reliability_matrix(&t, 1.0, 1.0, 100_000_000, 100_000_000).unwrap();
        for (i, row) in l.iter().enumerate() {
            for (k, &v) in row.iter().enumerate() {
                let want: f64 = if i == k { 1.0 } else { 0.0 };
                assert!((v - want).abs() < 1e-6, "{l:?}");
            }
        }
        assert!(reliability_matrix(&Sym2::zero(), 0.0, 0.0, 1, 1).is_err());
    }

    #[test]
    fn slope_only_closed_form() {
        let t = Sym2::new(0.0, 0.0, 400.0);
        let l = reliability_matrix(&t, 33_500.0, 33_500.0, 100, 100).unwrap();
        assert_relative_eq!(l[1][1], 400.0 / 735.0, max_relative = 1e-14);
        // The ITT residual shares the control-mean noise, so λ10 = λ11 here.
        assert_relative_eq!(l[1][0], l[1][1], max_relative = 1e-14);
        let s = site(100, 100, 0.0, 10.0);
        let eb = posterior_slope_at(&s, &t, 33_500.0, 33_500.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(eb.v1_star, 4000.0 / 735.0, max_relative = 1e-14);
        assert!((eb.v1_star - 5.44).abs() < 0.01);
        assert_relative_eq!(eb.post_var, (1.0 - 400.0 / 735.0) * 400.0, max_relative = 1e-12);
    }

    #[test]
    fn full_reliability_returns_raw_deviation() {
        // V -> 0 makes Λ -> I.
        let t = Sym2::new(1.0, 0.0, 1.0);
        let s = site(1_000_000_000, 1_000_000_000, 2.0, 9.0);
        let eb = posterior_slope_at(&s, &t, 1.0, 1.0, 1.0, 4.0).unwrap();
        assert_relative_eq!(eb.v1_star, 3.0, max_relative = 1e-6);
    }

    #[test]
    fn zero_slope_variance() {
        let t = Sym2::new(5.0, 0.0, 0.0);
        let eb = posterior_slope_at(&site(10, 12, 3.0, 8.0), &t, 2.0, 3.0, 0.0, 0.0).unwrap();
        assert_eq!(eb.v1_star, 0.0);
        assert_eq!(eb.post_var, 0.0);
    }

    #[test]
    fn negative_posterior_variance_is_clamped() {
        // Near-singular T with a large negative covariance can push the raw
        // expression below zero once estimated components are inconsistent.
        let t = Sym2::new(1.0, -0.9999, 1.0);
        let eb = posterior_slope_at(&site(1, 1, 0.0, 0.0), &t, 1e-9, 1e-9, 0.0, 0.0).unwrap();
        assert!(eb.post_var >= 0.0);
    }

    proptest! {
        #[test]
        fn shrinkage_bound(omega in 0.0f64..10.0, s2 in 0.01f64..10.0, n0 in 1usize..500, dev in -50.0f64..50.0) {
            let fit = RandomInterceptFit { omega00: omega, sigma0_sq: s2, ..intercept_fit(omega) };
            let s = site(n0, 1, fit.alpha00 + dev, 0.0);
            let eb = posterior_intercept(&s, &fit, &[]);
            prop_assert!(eb.eta0_star.abs() <= dev.abs() + 1e-12);
            prop_assert!((0.0..=1.0).contains(&eb.lambda0));
            prop_assert!(eb.post_var >= 0.0);
        }

        #[test]
        fn larger_treated_arm_shrinks_less(t11 in 0.1f64..100.0, s1 in 0.1f64..100.0, n1 in 1usize..200, extra in 1usize..200, dev in -20.0f64..20.0) {
            let t = Sym2::new(0.0, 0.0, t11);
            let a = posterior_slope_at(&site(10, n1, 0.0, dev), &t, 1.0, s1, 0.0, 0.0).unwrap();
            let b = posterior_slope_at(&site(10, n1 + extra, 0.0, dev), &t, 1.0, s1, 0.0, 0.0).unwrap();
            prop_assert!(b.v1_star.abs() + 1e-12 >= a.v1_star.abs());
        }

        #[test]
        fn slope_affine_in_treated_mean(
            t00 in 0.1f64..5.0, rho in -0.9f64..0.9, t11 in 0.1f64..5.0,
            n0 in 1usize..100, n1 in 1usize..100, y1 in -10.0f64..10.0,
        ) {
            let t = Sym2::new(t00, rho * (t00 * t11).sqrt(), t11);
            let at = |y: f64| posterior_slope_at(&site(n0, n1, 1.0, y), &t, 2.0, 3.0, 0.5, 0.2).unwrap();
            let h = 1e-3;
            let slope = (at(y1 + h).v1_star - at(y1 - h).v1_star) / (2.0 * h);
            prop_assert!((slope - at(y1).lambda_matrix[1][1]).abs() < 1e-8);
            let e = at(y1);
            if e.lambda_matrix[1][0] * t.a01 >= 0.0 {
                prop_assert!(e.post_var <= t11 + 1e-12);
            }
        }
    }
}
