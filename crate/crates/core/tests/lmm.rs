use approx::assert_relative_eq;
use lre_core::data::SiteSufficientStats;
use lre_core::linalg::{ols, Sym2};
use lre_core::lmm::optim::central_difference;
use lre_core::lmm::{
    fit_random_intercept, fit_random_slope_with, marginal_loglik, FitOptions, ModelData, SiteCovariateMatrix,
    VarianceComponents,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

mod common;

use common::{dense_loglik, random_sites, covs, stats, Site};

fn control_only(sites: &[Site]) -> Vec<SiteSufficientStats<f64>> {
    stats(sites)
}

#[test]
fn single_observation_values() {
    let s = stats(&[Site { y0: vec![0.0], y1: vec![] }]);
    let m = ModelData::intercept(&s, &SiteCovariateMatrix::empty()).unwrap();
    let vc = |omega| VarianceComponents { sigma0_sq: 1.0, sigma1_sq: f64::NAN, t: Sym2::new(omega, 0.0, 0.0) };
    assert_relative_eq!(marginal_loglik(&m, &vc(0.0), &[0.0]).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
    assert_relative_eq!(
        marginal_loglik(&m, &vc(1.0), &[0.0]).unwrap(),
        -0.5 * (4.0 * std::f64::consts::PI).ln(),
        epsilon = 1e-12
    );
}

#[test]
fn domain_errors() {
    let s = stats(&[Site { y0: vec![0.0, 1.0], y1: vec![2.0] }, Site { y0: vec![1.0], y1: vec![3.0] }]);
    let m = ModelData::intercept_slope(&s, &SiteCovariateMatrix::empty(), &SiteCovariateMatrix::empty()).unwrap();
    let bad_t = VarianceComponents { sigma0_sq: 1.0, sigma1_sq: 1.0, t: Sym2::new(1.0, 2.0, 1.0) };
    assert!(marginal_loglik(&m, &bad_t, &[0.0, 0.0]).is_err());
    let bad_s = VarianceComponents { sigma0_sq: 0.0, sigma1_sq: 1.0, t: Sym2::zero() };
    assert!(marginal_loglik(&m, &bad_s, &[0.0, 0.0]).is_err());
}

#[test]
fn sufficient_statistics_match_dense_covariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let sites = random_sites(&mut rng, 5, 6);
        let w = covs(&mut rng, 5, trial % 3);
        let s = stats(&sites);
        let m = ModelData::intercept_slope(&s, &w, &w).unwrap();
        let t00: f64 = rng.random_range(0.0..2.0);
        let t11: f64 = rng.random_range(0.0..2.0);
        let rho: f64 = rng.random_range(-0.95..0.95);
        let vc = VarianceComponents {
            sigma0_sq: rng.random_range(0.2..3.0),
            sigma1_sq: rng.random_range(0.2..3.0),
            t: Sym2::new(t00, rho * (t00 * t11).sqrt(), t11),
        };
        let beta: Vec<f64> = (0..m.num_fixed()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fast = marginal_loglik(&m, &vc, &beta).unwrap();
        let dense = dense_loglik(&sites, &w, &vc, &beta);
        assert!((fast - dense).abs() < 1e-9, "trial {trial}: {fast} vs {dense}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sites = random_sites(&mut rng, 12, 15);
    let w = covs(&mut rng, 12, 1);
    let s = stats(&sites);
    let slope = ModelData::intercept_slope(&s, &w, &w).unwrap();
    let intercept = ModelData::intercept(&control_only(&sites), &w).unwrap();
    for point in 0..20 {
        let (m, dim) = if point % 4 == 0 { (&intercept, 2) } else { (&slope, 5) };
        let theta: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.5..1.0)).collect();
        let analytic = m.profiled(&theta).unwrap().grad;
        let numeric = central_difference(|t| m.profiled(t).unwrap().value, &theta, 1e-5);
        for (a, n) in analytic.iter().zip(&numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel < 1e-4, "point {point}: {analytic:?} vs {numeric:?}");
        }
    }
}

/// Profiled likelihood of the no-covariate random-intercept model by direct
/// formulas, for the grid search.
fn intercept_profile(s: &[SiteSufficientStats<f64>], omega: f64, sigma2: f64) -> f64 {
    let w: Vec<f64> = s.iter().map(|x| 1.0 / (omega + sigma2 / x.n0 as f64)).collect();
    let alpha = s.iter().zip(&w).map(|(x, w)| w * x.ybar0).sum::<f64>() / w.iter().sum::<f64>();
    let mut l = 0.0;
    for (x, wj) in s.iter().zip(&w) {
        let n = x.n0 as f64;
        l += -0.5 * ((n - 1.0) * (2.0 * std::f64::consts::PI * sigma2).ln() + x.ss0 / sigma2) - 0.5 * n.ln();
        l += -0.5 * ((2.0 * std::f64::consts::PI / wj).ln() + wj * (x.ybar0 - alpha).powi(2));
    }
    l
}

#[test]
fn two_site_fit_matches_grid_search() {
    let sites = [
        Site { y0: vec![1.0, 2.5, 0.3, 1.9, 2.2], y1: vec![] },
        Site { y0: vec![4.1, 5.0, 3.2, 4.4], y1: vec![] },
    ];
    let s = stats(&sites);
    let fit = fit_random_intercept(&s, &SiteCovariateMatrix::empty()).unwrap();
    assert!(fit.converged, "{:?}", fit.diagnostics);
    let (mut best, mut lo, mut hi) = ((0.0, 0.0, f64::NEG_INFINITY), [0.0, 0.01], [20.0, 5.0]);
    for _ in 0..12 {
        let steps = 60;
        for a in 0..=steps {
            for b in 0..=steps {
                let om = lo[0] + (hi[0] - lo[0]) * a as f64 / steps as f64;
                let s2 = lo[1] + (hi[1] - lo[1]) * b as f64 / steps as f64;
                let v = intercept_profile(&s, om, s2);
                if v > best.2 {
                    best = (om, s2, v);
                }
            }
        }
        let span = [(hi[0] - lo[0]) / 10.0, (hi[1] - lo[1]) / 10.0];
        lo = [(best.0 - span[0]).max(0.0), (best.1 - span[1]).max(1e-6)];
        hi = [best.0 + span[0], best.1 + span[1]];
    }
    assert!((fit.omega00 - best.0).abs() < 5e-4, "{} vs {}", fit.omega00, best.0);
    assert!((fit.sigma0_sq - best.1).abs() < 5e-4, "{} vs {}", fit.sigma0_sq, best.1);
    assert!((fit.loglik - best.2).abs() < 1e-6);
}

#[test]
fn equal_site_means_hit_the_boundary() {
    let sites: Vec<Site> = (0..6)
        .map(|j| {
            let y0 = if j % 2 == 0 { vec![9.0, 11.0, 10.0, 8.0, 12.0] } else { vec![12.0, 8.0, 10.0, 11.0, 9.0] };
            Site { y0, y1: vec![] }
        })
        .collect();
    let fit = fit_random_intercept(&stats(&sites), &SiteCovariateMatrix::empty()).unwrap();
    assert_eq!(fit.omega00, 0.0);
    assert!(fit.boundary);
    assert_relative_eq!(fit.alpha00, 10.0, epsilon = 1e-8);
    // ML divides the pooled sum of squares by N − J... plus the between part,
    // which is zero here.
    assert_relative_eq!(fit.sigma0_sq, 60.0 / 30.0, max_relative = 1e-4);
}

#[test]
fn collinear_site_covariates_are_named() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sites = random_sites(&mut rng, 8, 5);
    let a: Vec<f64> = (0..8).map(|j| j as f64).collect();
    let rows: Vec<Vec<f64>> = a.iter().map(|&v| vec![v, 2.0 * v + 1.0]).collect();
    let w = SiteCovariateMatrix::from_rows(vec!["a".into(), "b".into()], &rows).unwrap();
    let err = fit_random_intercept(&stats(&sites), &w).unwrap_err().to_string();
    assert!(err.contains('a') && err.contains('b') && err.contains("collinear"), "{err}");
}

#[test]
fn gls_with_no_random_effects_is_pooled_ols() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sites = random_sites(&mut rng, 9, 12);
    let w = covs(&mut rng, 9, 2);
    let m = ModelData::intercept_slope(&stats(&sites), &w, &w).unwrap();
    let vc = VarianceComponents { sigma0_sq: 1.7, sigma1_sq: 1.7, t: Sym2::zero() };
    let gls = m.gls(&vc).unwrap();
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (j, s) in sites.iter().enumerate() {
        let x: Vec<f64> = std::iter::once(1.0).chain(w.row(j).iter().copied()).collect();
        for (z, ys) in [(0.0, &s.y0), (1.0, &s.y1)] {
            for &v in ys.iter() {
                rows.extend(x.iter().copied());
                rows.extend(x.iter().map(|a| a * z));
                y.push(v);
            }
        }
    }
    let pooled = ols(&rows, &y, 6).unwrap();
    for (a, b) in gls.iter().zip(&pooled) {
        assert!((a - b).abs() < 1e-8, "{gls:?} vs {pooled:?}");
    }
}

#[test]
fn shifting_outcomes_moves_only_the_intercept() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let sites: Vec<Site> = (0..30)
        .map(|_| {
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            let n = rng.random_range(5..30);
            let y0 = (0..n).map(|_| 3.0 * u + rng.sample::<f64, _>(StandardNormal)).collect();
            let y1 = (0..n).map(|_| 3.0 * u + 1.0 + v + rng.sample::<f64, _>(StandardNormal)).collect();
            Site { y0, y1 }
        })
        .collect();
    let w = covs(&mut rng, 30, 1);
    let shifted: Vec<Site> = sites
        .iter()
        .map(|s| Site {
            y0: s.y0.iter().map(|y| y + 100.0).collect(),
            y1: s.y1.iter().map(|y| y + 100.0).collect(),
        })
        .collect();
    let opts = FitOptions::default();
    let a = fit_random_slope_with(&stats(&sites), &w, &w, &opts).unwrap();
    let b = fit_random_slope_with(&stats(&shifted), &w, &w, &opts).unwrap();
    assert!(a.converged && b.converged);
    assert_relative_eq!(b.intercept_coef[0] - a.intercept_coef[0], 100.0, epsilon = 1e-6);
    for (x, y) in [(a.tau00(), b.tau00()), (a.tau01(), b.tau01()), (a.tau11(), b.tau11()), (a.sigma0_sq, b.sigma0_sq), (a.sigma1_sq, b.sigma1_sq)] {
        assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0), "{x} vs {y}");
    }
    for (x, y) in a.intercept_coef[1..].iter().chain(&a.slope_coef).zip(b.intercept_coef[1..].iter().chain(&b.slope_coef)) {
        assert!((x - y).abs() < 1e-6);
    }
    // Accepted iterates never decrease the likelihood.
    for pair in a.diagnostics.loglik_trace.windows(2) {
        assert!(pair[1] >= pair[0] - 1e-12 * pair[0].abs());
    }
}

#[test]
fn single_precision_fit_agrees_with_double() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sites = random_sites(&mut rng, 25, 40);
    let s64 = stats(&sites);
    let s32: Vec<SiteSufficientStats<f32>> = s64.iter().map(|s| s.cast()).collect();
    let f64_fit = fit_random_intercept(&s64, &SiteCovariateMatrix::empty()).unwrap();
    let f32_fit = fit_random_intercept(&s32, &SiteCovariateMatrix::<f32>::empty()).unwrap();
    assert!((f64_fit.alpha00 - f32_fit.alpha00 as f64).abs() < 1e-3);
    assert!((f64_fit.omega00 - f32_fit.omega00 as f64).abs() < 1e-2 * f64_fit.omega00.max(0.1));
}
