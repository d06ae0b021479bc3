use lre_core::data::SiteSufficientStats;
use lre_core::harness::{consistency_bias, consistency_size};
use lre_core::lmm::{fit_random_intercept, SiteCovariateMatrix};
use lre_core::simgen::{derive_seed, draw_sites, GeneratorConfig, Protocol, Scenario, SitePopulation, SITE_COVARIATE_NAMES};
use lre_core::strategies::{estimate_from_inputs, SiteInputs, StrategyId};

struct Sample {
    pop: SitePopulation,
    inputs: SiteInputs,
}

fn sample(sites: usize, n_low: usize, n_high: usize, psi_std: f64, seed: u64) -> Sample {
    let cfg = GeneratorConfig {
        scenario: Scenario::ComparabilityHolds,
        sites,
        n_low,
        n_high,
        psi_std,
        seed,
        ..GeneratorConfig::default()
    };
    let pop = draw_sites(&cfg, Protocol::Main).unwrap();
    let draw = pop.draw_site_stats(derive_seed(seed, 1));
    let names = SITE_COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let phi = SiteCovariateMatrix::from_rows(names, &pop.phi_x()).unwrap();
    Sample {
        pop,
        inputs: SiteInputs {
            stats: draw.stats,
            phi,
            adjusted_itt: draw.adjusted_itt,
        },
    }
}

fn stats(s: &Sample) -> &[SiteSufficientStats<f64>] {
    &s.inputs.stats
}

#[test]
fn step_one_recovers_control_coefficients() {
    let s = sample(1000, 300, 1700, 0.1, 101);
    let fit = fit_random_intercept(stats(&s), &s.inputs.phi).unwrap();
    assert!(fit.converged);
    // A site's expected Y(0) carries the site-mean terms plus the individual
    // X terms at X's site mean. The U site means stay in ω00, which puts the
    // standard error of each slope near 3.5.
    let want = [20.0 + 120.0, -30.0 - 100.0];
    for (got, want) in fit.alpha01.iter().zip(want) {
        assert!((got - want).abs() < 12.0, "alpha01 {:?}", fit.alpha01);
    }
}

#[test]
fn twostep_leaves_no_control_variance() {
    let s = sample(1000, 300, 1700, 0.2, 102);
    let out = estimate_from_inputs(StrategyId::TwoStep, &s.inputs, None).unwrap();
    let fit = out.models.unwrap().slope;
    let t11 = fit.tau11();
    assert!(fit.tau00() < 0.05 * t11, "tau00 {} tau11 {t11}", fit.tau00());
    assert!(fit.tau01().abs() < 0.05 * t11, "tau01 {} tau11 {t11}", fit.tau01());
}

#[test]
fn oracle_finds_no_slope_variance_without_heterogeneity() {
    let s = sample(100, 400, 1000, 0.0, 103);
    let mu_u: Vec<[f64; 2]> = s.pop.sites.iter().map(|p| p.mu_u).collect();
    let out = estimate_from_inputs(StrategyId::MeAdjXU, &s.inputs, Some(&mu_u)).unwrap();
    let t11 = out.models.unwrap().slope.tau11();
    let sigma_sq = s.pop.sigma * s.pop.sigma;
    assert!(t11 < 0.01 * sigma_sq, "tau11 {t11}");
}

#[test]
fn eb_error_shrinks_with_site_size() {
    let mut last = f64::INFINITY;
    for mean_n in [100, 1000, 10_000] {
        let (avg_abs, _) = consistency_bias(Scenario::ComparabilityHolds, consistency_size(100, mean_n), 0.1, 104).unwrap();
        assert!(avg_abs <= last, "n {mean_n}: {avg_abs} after {last}");
        last = avg_abs;
    }
}
