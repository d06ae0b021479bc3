use lre_core::data::{IndividualRecord, SiteCovariates, TrialDataset};
use lre_core::simgen::{generate, GeneratorConfig, Scenario};
use lre_core::strategies::{estimate_lre, StrategyId};
use lre_core::Error;

fn toy() -> TrialDataset {
    let sites = ["a", "b"]
        .iter()
        .enumerate()
        .map(|(j, id)| SiteCovariates {
            site_id: id.to_string(),
            phi_x: vec![j as f64],
        })
        .collect();
    let rec = |site: &str, z: u8, y: f64| IndividualRecord {
        site_id: site.into(),
        z,
        y,
        x: vec![],
    };
    let records = vec![
        rec("a", 0, 1.0),
        rec("a", 0, 1.0),
        rec("a", 1, 2.0),
        rec("a", 1, 4.0),
        rec("b", 0, 5.0),
        rec("b", 1, 4.0),
        rec("b", 1, 3.0),
    ];
    TrialDataset::new(sites, vec!["phi".into()], vec![], records).unwrap()
}

#[test]
fn itt_is_the_raw_mean_difference() {
    let out = estimate_lre(StrategyId::Itt, &toy(), None).unwrap();
    let points = out.points();
    assert_eq!(points, vec![2.0, -1.5]);
    assert!(out.estimates.iter().all(|e| e.post_var.is_none()));
}

#[test]
fn oracle_strategy_needs_truth() {
    let err = estimate_lre(StrategyId::MeAdjXU, &toy(), None).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

fn sample(psi_std: f64, n_low: usize, n_high: usize, seed: u64) -> (TrialDataset, lre_core::simgen::SyntheticTruth) {
    generate(&GeneratorConfig {
        scenario: Scenario::ComparabilityHolds,
        sites: 100,
        n_low,
        n_high,
        psi_std,
        seed,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

fn points(strategy: StrategyId, ds: &TrialDataset, truth: &lre_core::simgen::SyntheticTruth) -> Vec<f64> {
    let truth = strategy.requires_truth().then_some(truth);
    estimate_lre(strategy, ds, truth).unwrap().points()
}

#[test]
fn translation_and_scale_leave_points_consistent() {
    let (ds, truth) = sample(0.2, 30, 170, 11);
    let shifted = ds.map_outcomes(|y| y + 1000.0);
    let scaled = ds.map_outcomes(|y| 2.5 * y);
    for s in StrategyId::ALL {
        let base = points(s, &ds, &truth);
        let scale = base.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for (a, b) in base.iter().zip(points(s, &shifted, &truth)) {
            assert!((a - b).abs() < 1e-8 * scale, "{s} shift: {a} vs {b}");
        }
        for (a, b) in base.iter().zip(points(s, &scaled, &truth)) {
            assert!((2.5 * a - b).abs() < 1e-8 * 2.5 * scale, "{s} scale: {a} vs {b}");
        }
    }
}

fn ranks(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0; v.len()];
    for (rank, i) in idx.into_iter().enumerate() {
        r[i] = rank;
    }
    r
}

#[test]
fn itt_ranks_follow_raw_differences() {
    let (ds, truth) = sample(0.1, 10, 30, 3);
    let raw: Vec<f64> = lre_core::data::summarize_sites::<f64>(&ds).iter().map(|s| s.ybar1 - s.ybar0).collect();
    assert_eq!(ranks(&points(StrategyId::Itt, &ds, &truth)), ranks(&raw));
}

#[test]
fn twostep_near_zero_without_heterogeneity() {
    let (ds, truth) = sample(0.0, 400, 1000, 5);
    let pts = points(StrategyId::TwoStep, &ds, &truth);
    let avg = pts.iter().map(|p| p.abs()).sum::<f64>() / pts.len() as f64;
    assert!(avg / truth.sigma < 0.02, "avg |point| = {} sigma", avg / truth.sigma);
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn twostep_tracks_the_oracle_better_than_itt() {
    let (ds, truth) = sample(0.1, 30, 170, 21);
    let oracle = points(StrategyId::MeAdjXU, &ds, &truth);
    let two = corr(&points(StrategyId::TwoStep, &ds, &truth), &oracle);
    let itt = corr(&points(StrategyId::Itt, &ds, &truth), &oracle);
    assert!(two > itt, "twostep {two} vs itt {itt}");
}

#[test]
fn mixed_strategies_are_centered_with_nonnegative_variances() {
    let (ds, truth) = sample(0.2, 30, 170, 8);
    for s in StrategyId::ALL.into_iter().filter(|s| s.is_mixed()) {
        let out = estimate_lre(s, &ds, s.requires_truth().then_some(&truth)).unwrap();
        let mean = out.points().iter().sum::<f64>() / 100.0;
        assert!(mean.abs() < 1e-9, "{s} mean {mean}");
        assert!(out.estimates.iter().all(|e| e.post_var.is_some_and(|v| v >= 0.0)));
    }
}

#[test]
fn twostep_exposes_step_two_model() {
    let (ds, _) = sample(0.3, 400, 1000, 2);
    let out = estimate_lre(StrategyId::TwoStep, &ds, None).unwrap();
    let m = out.models.unwrap();
    assert!(m.step1.is_some());
    assert_eq!(m.eta0.len(), 100);
    assert!(m.slope.tau11() > 0.0);
    assert!(m.slope.slope_coef_for("eta0_star").is_some());
}
