//! Evaluation criteria for LRE estimators over Monte Carlo replications:
//! bias, empirical variance, RMSE, and 30/40/30 tier misclassification.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::strategies::StrategyId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum TierLabel {
    Low,
    Medium,
    High,
}

impl TierLabel {
    pub fn level(self) -> i32 {
        match self {
            TierLabel::Low => 1,
            TierLabel::Medium => 2,
            TierLabel::High => 3,
        }
    }
}

impl From<TierLabel> for u8 {
    fn from(t: TierLabel) -> u8 {
        t.level() as u8
    }
}

impl TryFrom<u8> for TierLabel {
    type Error = String;
    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(TierLabel::Low),
            2 => Ok(TierLabel::Medium),
            3 => Ok(TierLabel::High),
            other => Err(format!("tier must be 1, 2 or 3, got {other}")),
        }
    }
}

/// Number of sites in each extreme tier: `floor(0.3 J)`.
pub fn extreme_tier_size(j: usize) -> usize {
    3 * j / 10
}

/// Ranks ascending (ties by site index) and labels the bottom `floor(0.3J)`
/// low, the top `floor(0.3J)` high, the rest medium.
pub fn classify_tiers<F: PartialOrd + Copy>(points: &[F]) -> Vec<TierLabel> {
    let j = points.len();
    let k = extreme_tier_size(j);
    let mut order: Vec<usize> = (0..j).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .partial_cmp(&points[b])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut tiers = vec![TierLabel::Medium; j];
    for (rank, &site) in order.iter().enumerate() {
        if rank < k {
            tiers[site] = TierLabel::Low;
        } else if rank >= j - k {
            tiers[site] = TierLabel::High;
        }
    }
    tiers
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasStats<F> {
    pub mean_bias: F,
    /// Sample SD across sites (divisor `J − 1`); absent for a single site.
    pub sd_bias: Option<F>,
}

/// Per-site bias `mean_r(est[r][j]) − θ_j`.
pub fn per_site_bias<F: Scalar>(estimates: &[Vec<F>], truth: &[F]) -> Vec<F> {
    let r = F::from_count(estimates.len());
    (0..truth.len())
        .map(|j| estimates.iter().map(|row| row[j]).sum::<F>() / r - truth[j])
        .collect()
}

/// Mean and SD of the per-site bias, in units of `sigma`.
pub fn bias_stats<F: Scalar>(estimates: &[Vec<F>], truth: &[F], sigma: F) -> BiasStats<F> {
    let bias = per_site_bias(estimates, truth);
    let (mean, sd) = mean_sd(&bias);
    BiasStats {
        mean_bias: mean / sigma,
        sd_bias: sd.map(|s| s / sigma),
    }
}

/// Mean and sample SD (divisor `n − 1`).
pub fn mean_sd<F: Scalar>(v: &[F]) -> (F, Option<F>) {
    let n = v.len();
    if n == 0 {
        return (F::nan(), None);
    }
    let mean = v.iter().copied().sum::<F>() / F::from_count(n);
    let sd = (n > 1).then(|| {
        let ss: F = v.iter().map(|&x| (x - mean) * (x - mean)).sum();
        (ss / F::from_count(n - 1)).sqrt()
    });
    (mean, sd)
}

/// Per-site empirical variance over replications (divisor `R`).
pub fn per_site_variance<F: Scalar>(estimates: &[Vec<F>]) -> Vec<F> {
    let r = F::from_count(estimates.len());
    let j = estimates.first().map_or(0, Vec::len);
    (0..j)
        .map(|s| {
            let mean = estimates.iter().map(|row| row[s]).sum::<F>() / r;
            estimates.iter().map(|row| (row[s] - mean) * (row[s] - mean)).sum::<F>() / r
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RmseStats<F> {
    pub per_site: Vec<F>,
    /// Average RMSE in units of sigma.
    pub avg_rmse: F,
    /// Average empirical variance in units of sigma².
    pub avg_emp_var: F,
}

/// Per-site `sqrt(var + bias²)` averaged over sites.
pub fn rmse_summary<F: Scalar>(estimates: &[Vec<F>], truth: &[F], sigma: F) -> RmseStats<F> {
    let bias = per_site_bias(estimates, truth);
    let var = per_site_variance(estimates);
    let per_site: Vec<F> = var.iter().zip(&bias).map(|(&v, &b)| (v + b * b).sqrt()).collect();
    let j = F::from_count(per_site.len());
    RmseStats {
        avg_rmse: per_site.iter().copied().sum::<F>() / j / sigma,
        avg_emp_var: var.iter().copied().sum::<F>() / j / (sigma * sigma),
        per_site,
    }
}

/// `1 − avg_rmse / avg_rmse_reference`.
pub fn rmse_reduction<F: Scalar>(avg_rmse: F, reference: F) -> F {
    F::one() - avg_rmse / reference
}

/// SCE and MCE rates: per-site indicator of `(L̂ − L)² = 4` (resp. `= 1`)
/// averaged over replications, then over sites.
pub fn classification_rates(estimated: &[Vec<TierLabel>], truth: &[TierLabel]) -> (f64, f64) {
    let r = estimated.len() as f64;
    let j = truth.len() as f64;
    let mut sce = 0usize;
    let mut mce = 0usize;
    for row in estimated {
        for (est, t) in row.iter().zip(truth) {
            match (est.level() - t.level()).pow(2) {
                4 => sce += 1,
                1 => mce += 1,
                _ => {}
            }
        }
    }
    (sce as f64 / r / j, mce as f64 / r / j)
}

/// One strategy's summary over all replications of a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub strategy: StrategyId,
    pub mean_bias: f64,
    pub sd_bias: Option<f64>,
    pub avg_emp_var: f64,
    /// Relative to ITT; absent when ITT's empirical variance is zero.
    pub variance_ratio: Option<f64>,
    pub avg_rmse: f64,
    pub rmse_reduction: f64,
    pub sce_rate: f64,
    pub mce_rate: f64,
    pub replications: usize,
    /// Replications in which a model fit did not converge.
    pub nonconverged: usize,
}

/// Aggregate statistics of the ITT reference used for ratios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub avg_emp_var: f64,
    pub avg_rmse: f64,
}

/// Builds a [`CellSummary`] from `estimates[replication][site]`.
pub fn summarize_cell(
    strategy: StrategyId,
    estimates: &[Vec<f64>],
    truth: &[f64],
    true_tiers: &[TierLabel],
    sigma: f64,
    reference: Option<Reference>,
    nonconverged: usize,
) -> (CellSummary, Reference) {
    let bias = bias_stats(estimates, truth, sigma);
    let rmse = rmse_summary(estimates, truth, sigma);
    let own = Reference {
        avg_emp_var: rmse.avg_emp_var,
        avg_rmse: rmse.avg_rmse,
    };
    let reference = reference.unwrap_or(own);
    let tiers: Vec<Vec<TierLabel>> = estimates.iter().map(|row| classify_tiers(row)).collect();
    let (sce_rate, mce_rate) = classification_rates(&tiers, true_tiers);
    let summary = CellSummary {
        strategy,
        mean_bias: bias.mean_bias,
        sd_bias: bias.sd_bias,
        avg_emp_var: rmse.avg_emp_var,
        variance_ratio: (reference.avg_emp_var > 0.0).then(|| rmse.avg_emp_var / reference.avg_emp_var),
        avg_rmse: rmse.avg_rmse,
        rmse_reduction: rmse_reduction(rmse.avg_rmse, reference.avg_rmse),
        sce_rate,
        mce_rate,
        replications: estimates.len(),
        nonconverged,
    };
    (summary, own)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(t: &[TierLabel]) -> [usize; 3] {
        let mut c = [0; 3];
        for x in t {
            c[(x.level() - 1) as usize] += 1;
        }
        c
    }

    #[test]
    fn tier_sizes() {
        let v: Vec<f64> = (0..10).map(|i| (i * 7 % 10) as f64).collect();
        assert_eq!(counts(&classify_tiers(&v)), [3, 4, 3]);
        let v: Vec<f64> = (0..30).map(|i| -(i as f64)).collect();
        let t = classify_tiers(&v);
        assert_eq!(counts(&t), [9, 12, 9]);
        assert_eq!(t[0], TierLabel::High);
        assert_eq!(t[29], TierLabel::Low);
    }

    #[test]
    fn ties_split_by_site_index() {
        let t = classify_tiers(&[1.0; 10]);
        assert_eq!(&t[..3], &[TierLabel::Low; 3]);
        assert_eq!(&t[3..7], &[TierLabel::Medium; 4]);
        assert_eq!(&t[7..], &[TierLabel::High; 3]);
    }

    #[test]
    fn exact_estimates_have_no_bias() {
        let truth = vec![1.0, -2.0, 0.5];
        let est = vec![truth.clone(), truth.clone()];
        let b = bias_stats(&est, &truth, 1.0);
        assert_eq!(b.mean_bias, 0.0);
        assert_eq!(b.sd_bias, Some(0.0));
    }

    #[test]
    fn bias_plus_minus_one() {
        let truth = vec![0.0, 0.0];
        let est = vec![vec![1.0, -1.0]];
        let b = bias_stats(&est, &truth, 1.0);
        assert_eq!(b.mean_bias, 0.0);
        assert!((b.sd_bias.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(bias_stats(&[vec![1.0]], &[0.0], 1.0).sd_bias, None);
    }

    #[test]
    fn unbiased_constant_variance() {
        // each site alternates ±√v around the truth: bias 0, variance v
        let v: f64 = 2.5;
        let truth = vec![3.0, -1.0, 0.0];
        let est: Vec<Vec<f64>> = (0..4)
            .map(|r| truth.iter().map(|t| t + if r % 2 == 0 { v.sqrt() } else { -v.sqrt() }).collect())
            .collect();
        let s = rmse_summary(&est, &truth, 1.0);
        assert!((s.avg_rmse - v.sqrt()).abs() < 1e-12);
        assert!((s.avg_emp_var - v).abs() < 1e-12);
        assert_eq!(rmse_reduction(s.avg_rmse, s.avg_rmse), 0.0);
    }

    #[test]
    fn one_severe_swap_at_j10() {
        let truth_points: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let truth = classify_tiers(&truth_points);
        let mut est_points = truth_points.clone();
        est_points.swap(0, 9);
        let est = vec![classify_tiers(&est_points)];
        assert_eq!(classification_rates(&est, &truth), (0.2, 0.0));
        assert_eq!(classification_rates(&[truth.clone()], &truth), (0.0, 0.0));
    }

    #[test]
    fn itt_variance_ratio_is_one() {
        let truth = vec![0.0, 1.0, 2.0, 3.0];
        let est = vec![vec![0.1, 1.3, 1.9, 3.2], vec![-0.2, 0.8, 2.4, 2.7]];
        let tiers = classify_tiers(&truth);
        let (itt, reference) = summarize_cell(StrategyId::Itt, &est, &truth, &tiers, 1.0, None, 0);
        assert_eq!(itt.variance_ratio, Some(1.0));
        assert_eq!(itt.rmse_reduction, 0.0);
        let (again, _) = summarize_cell(StrategyId::Itt, &est, &truth, &tiers, 1.0, Some(reference), 0);
        assert_eq!(again, itt);
    }

    proptest! {
        #[test]
        fn monotone_transform_keeps_tiers(v in prop::collection::vec(-1e3f64..1e3, 3..60)) {
            let t = classify_tiers(&v);
            let w: Vec<f64> = v.iter().map(|x| (x / 100.0).exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(classify_tiers(&w), t);
        }

        #[test]
        fn rates_partition_sites(
            a in prop::collection::vec(-10f64..10.0, 10..40),
            seed in 0u64..1000,
        ) {
            let truth = classify_tiers(&a);
            let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + ((i as u64 * 2654435761 + seed) % 17) as f64 - 8.0).collect();
            let est = vec![classify_tiers(&b)];
            let (sce, mce) = classification_rates(&est, &truth);
            let correct = est[0].iter().zip(&truth).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
            prop_assert!((sce + mce + correct - 1.0).abs() < 1e-12);
        }

        #[test]
        fn rmse_decomposition(rows in prop::collection::vec(prop::collection::vec(-5f64..5.0, 4), 2..20)) {
            let truth = vec![0.5, -0.5, 1.0, 0.0];
            let bias = per_site_bias(&rows, &truth);
            let var = per_site_variance(&rows);
            let s = rmse_summary(&rows, &truth, 1.0);
            for j in 0..4 {
                let direct = rows.iter().map(|r| (r[j] - truth[j]).powi(2)).sum::<f64>() / rows.len() as f64;
                prop_assert!((s.per_site[j].powi(2) - (var[j] + bias[j].powi(2))).abs() < 1e-10);
                prop_assert!((s.per_site[j].powi(2) - direct).abs() < 1e-10);
            }
        }

        #[test]
        fn standardized_summaries_scale_free(rows in prop::collection::vec(prop::collection::vec(-5f64..5.0, 5), 2..10)) {
            let truth = vec![0.5, -0.5, 1.0, 0.0, 2.0];
            let tiers = classify_tiers(&truth);
            let (a, _) = summarize_cell(StrategyId::Itt, &rows, &truth, &tiers, 1.5, None, 0);
            let rows2: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| 2.0 * x).collect()).collect();
            let truth2: Vec<f64> = truth.iter().map(|x| 2.0 * x).collect();
            let (b, _) = summarize_cell(StrategyId::Itt, &rows2, &truth2, &tiers, 3.0, None, 0);
            prop_assert!((a.mean_bias - b.mean_bias).abs() < 1e-8);
            prop_assert!((a.sd_bias.unwrap() - b.sd_bias.unwrap()).abs() < 1e-8);
            prop_assert!((a.avg_emp_var - b.avg_emp_var).abs() < 1e-8);
            prop_assert!((a.avg_rmse - b.avg_rmse).abs() < 1e-8);
            prop_assert_eq!(a.sce_rate, b.sce_rate);
        }
    }
}
