//! The seven site-level LRE estimation strategies and the exact
//! identification oracle.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{adjusted_itt, summarize_sites, SiteSufficientStats, TrialDataset};
use crate::eb::{posterior_intercepts, posterior_slopes, EbIntercept, EbSlope};
use crate::error::{Error, Result};
use crate::lmm::{
    fit_random_intercept, fit_random_slope, fit_random_slope_with, FitOptions, RandomInterceptFit, RandomSlopeFit,
    SiteCovariateMatrix, ETA0_COLUMN,
};
use crate::simgen::SyntheticTruth;

pub mod identification;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyId {
    #[serde(rename = "itt")]
    Itt,
    #[serde(rename = "itt_adj")]
    IttAdj,
    #[serde(rename = "me")]
    Me,
    #[serde(rename = "me_adj_x")]
    MeAdjX,
    #[serde(rename = "me_adj_x_y0")]
    MeAdjXY0,
    #[serde(rename = "twostep")]
    TwoStep,
    #[serde(rename = "me_adj_x_u")]
    MeAdjXU,
}

impl StrategyId {
    pub const ALL: [StrategyId; 7] = [
        StrategyId::Itt,
        StrategyId::IttAdj,
        StrategyId::Me,
        StrategyId::MeAdjX,
        StrategyId::MeAdjXY0,
        StrategyId::TwoStep,
        StrategyId::MeAdjXU,
    ];

    /// Machine name used on the command line and in CSV output.
    pub fn name(self) -> &'static str {
        match self {
            StrategyId::Itt => "itt",
            StrategyId::IttAdj => "itt_adj",
            StrategyId::Me => "me",
            StrategyId::MeAdjX => "me_adj_x",
            StrategyId::MeAdjXY0 => "me_adj_x_y0",
            StrategyId::TwoStep => "twostep",
            StrategyId::MeAdjXU => "me_adj_x_u",
        }
    }

    /// Display label for tables.
    pub fn label(self) -> &'static str {
        match self {
            StrategyId::Itt => "ITT",
            StrategyId::IttAdj => "ITT_ADJ",
            StrategyId::Me => "ME",
            StrategyId::MeAdjX => "ME_ADJ_X",
            StrategyId::MeAdjXY0 => "ME_ADJ_X_Y0",
            StrategyId::TwoStep => "2SME",
            StrategyId::MeAdjXU => "ME_ADJ_X_U",
        }
    }

    /// Only the infeasible benchmark reads the simulation truth.
    pub fn requires_truth(self) -> bool {
        self == StrategyId::MeAdjXU
    }

    pub fn is_mixed(self) -> bool {
        !matches!(self, StrategyId::Itt | StrategyId::IttAdj)
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        let key = if key == "2sme" { "twostep".to_string() } else { key };
        StrategyId::ALL
            .into_iter()
            .find(|id| id.name() == key)
            .ok_or_else(|| {
                let names: Vec<_> = StrategyId::ALL.iter().map(|s| s.name()).collect();
                Error::Usage(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LreEstimate {
    pub site_id: String,
    pub strategy: StrategyId,
    pub point: f64,
    /// Absent for the fixed-effects strategies.
    pub post_var: Option<f64>,
}

/// Fitted models behind a mixed strategy's estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FittedModels {
    pub step1: Option<RandomInterceptFit<f64>>,
    /// Step-1 posteriors (two-step strategy only).
    pub eta0: Vec<EbIntercept<f64>>,
    pub slope: RandomSlopeFit<f64>,
    /// Uncentered slope posteriors.
    pub posteriors: Vec<EbSlope<f64>>,
}

#[derive(Debug, Clone)]
pub struct StrategyOutput {
    pub estimates: Vec<LreEstimate>,
    pub models: Option<FittedModels>,
    /// False when any underlying ML fit stopped before converging.
    pub converged: bool,
    pub warnings: Vec<String>,
}

impl StrategyOutput {
    pub fn points(&self) -> Vec<f64> {
        self.estimates.iter().map(|e| e.point).collect()
    }
}

/// Everything the strategies read from a dataset: per-site sufficient
/// statistics, observed site covariates and the covariate-adjusted ITT.
#[derive(Debug, Clone)]
pub struct SiteInputs {
    pub stats: Vec<SiteSufficientStats<f64>>,
    pub phi: SiteCovariateMatrix<f64>,
    pub adjusted_itt: Vec<Option<f64>>,
}

impl SiteInputs {
    pub fn from_dataset(dataset: &TrialDataset) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..dataset.num_sites()).map(|j| dataset.phi(j).to_vec()).collect();
        Ok(Self {
            stats: summarize_sites(dataset),
            phi: SiteCovariateMatrix::from_rows(dataset.site_covariate_names().to_vec(), &rows)?,
            adjusted_itt: adjusted_itt(dataset),
        })
    }

    pub fn num_sites(&self) -> usize {
        self.stats.len()
    }
}

/// Runs one strategy on a dataset. `truth` must be given exactly when the
/// strategy is the infeasible benchmark.
pub fn estimate_lre(strategy: StrategyId, dataset: &TrialDataset, truth: Option<&SyntheticTruth>) -> Result<StrategyOutput> {
    check_truth(strategy, truth.is_some())?;
    estimate_from_inputs(strategy, &SiteInputs::from_dataset(dataset)?, truth.map(|t| t.mu_u()).as_deref())
}

fn check_truth(strategy: StrategyId, have_truth: bool) -> Result<()> {
    match (strategy.requires_truth(), have_truth) {
        (true, false) => Err(Error::Usage(format!("strategy {strategy} needs the simulation truth"))),
        (false, true) => Err(Error::Usage(format!("strategy {strategy} must not be given the simulation truth"))),
        _ => Ok(()),
    }
}

/// As [`estimate_lre`] on precomputed site inputs; `mu_u` holds the true
/// unobserved-covariate site means for the benchmark strategy.
pub fn estimate_from_inputs(strategy: StrategyId, inputs: &SiteInputs, mu_u: Option<&[[f64; 2]]>) -> Result<StrategyOutput> {
    check_truth(strategy, mu_u.is_some())?;
    let stats = &inputs.stats;
    let fixed = |points: Vec<f64>, warnings: Vec<String>| StrategyOutput {
        estimates: package(strategy, stats, points, None),
        models: None,
        converged: true,
        warnings,
    };
    match strategy {
        StrategyId::Itt => Ok(fixed(stats.iter().map(|s| s.itt()).collect(), vec![])),
        StrategyId::IttAdj => {
            let mut warnings = Vec::new();
            let points = stats
                .iter()
                .zip(&inputs.adjusted_itt)
                .map(|(s, adj)| {
                    adj.unwrap_or_else(|| {
                        warnings.push(format!("site \"{}\": covariate-adjusted regression is singular; using the unadjusted ITT", s.site_id));
                        s.itt()
                    })
                })
                .collect();
            Ok(fixed(points, warnings))
        }
        StrategyId::Me => one_step(strategy, stats, &SiteCovariateMatrix::empty()),
        StrategyId::MeAdjX => one_step(strategy, stats, &inputs.phi),
        StrategyId::MeAdjXY0 => {
            let ybar0: Vec<f64> = stats.iter().map(|s| s.ybar0).collect();
            one_step(strategy, stats, &inputs.phi.with_column("ybar0", &ybar0))
        }
        StrategyId::MeAdjXU => {
            let mu_u = mu_u.expect("checked above");
            if mu_u.len() != stats.len() {
                return Err(Error::Validation(format!("truth has {} sites, data has {}", mu_u.len(), stats.len())));
            }
            let u1: Vec<f64> = mu_u.iter().map(|u| u[0]).collect();
            let u2: Vec<f64> = mu_u.iter().map(|u| u[1]).collect();
            let covs = inputs.phi.with_column("mu_u1", &u1).with_column("mu_u2", &u2);
            one_step(strategy, stats, &covs)
        }
        StrategyId::TwoStep => two_step(stats, &inputs.phi),
    }
}

fn one_step(strategy: StrategyId, stats: &[SiteSufficientStats<f64>], covs: &SiteCovariateMatrix<f64>) -> Result<StrategyOutput> {
    let fit = fit_random_slope_with(stats, covs, covs, &FitOptions::default())?;
    let eb = posterior_slopes(stats, &fit, covs, covs)?;
    Ok(mixed_output(strategy, stats, None, Vec::new(), fit, eb))
}

fn two_step(stats: &[SiteSufficientStats<f64>], phi: &SiteCovariateMatrix<f64>) -> Result<StrategyOutput> {
    let step1 = fit_random_intercept(stats, phi)?;
    let eb0 = posterior_intercepts(stats, &step1, phi);
    let eta0: Vec<f64> = eb0.iter().map(|e| e.eta0_star).collect();
    if eta0.iter().all(|&e| e == 0.0) {
        // No between-site control variance left: η0* carries no information
        // and would be a zero column.
        let mut out = one_step(StrategyId::TwoStep, stats, phi)?;
        out.converged &= step1.converged;
        out.warnings.push("twostep: step 1 variance on the boundary; eta0_star dropped from step 2".into());
        if let Some(m) = out.models.as_mut() {
            m.step1 = Some(step1);
            m.eta0 = eb0;
        }
        return Ok(out);
    }
    let fit = fit_random_slope(stats, phi, &eta0)?;
    let covs = phi.with_column(ETA0_COLUMN, &eta0);
    let eb = posterior_slopes(stats, &fit, &covs, &covs)?;
    Ok(mixed_output(StrategyId::TwoStep, stats, Some(step1), eb0, fit, eb))
}

fn mixed_output(
    strategy: StrategyId,
    stats: &[SiteSufficientStats<f64>],
    step1: Option<RandomInterceptFit<f64>>,
    eta0: Vec<EbIntercept<f64>>,
    fit: RandomSlopeFit<f64>,
    eb: Vec<EbSlope<f64>>,
) -> StrategyOutput {
    let mut warnings = Vec::new();
    let converged = fit.converged && step1.as_ref().map_or(true, |f| f.converged);
    if !converged {
        warnings.push(format!("{strategy}: ML fit did not converge"));
    }
    let clamped = eb.iter().filter(|e| e.clamped).count();
    if clamped > 0 {
        warnings.push(format!("{strategy}: {clamped} negative posterior variances set to 0"));
    }
    let mean = eb.iter().map(|e| e.v1_star).sum::<f64>() / eb.len() as f64;
    let points = eb.iter().map(|e| e.v1_star - mean).collect();
    let vars = eb.iter().map(|e| e.post_var).collect();
    StrategyOutput {
        estimates: package(strategy, stats, points, Some(vars)),
        models: Some(FittedModels {
            step1,
            eta0,
            slope: fit,
            posteriors: eb,
        }),
        converged,
        warnings,
    }
}

fn package(strategy: StrategyId, stats: &[SiteSufficientStats<f64>], points: Vec<f64>, vars: Option<Vec<f64>>) -> Vec<LreEstimate> {
    stats
        .iter()
        .zip(points)
        .enumerate()
        .map(|(j, (s, point))| LreEstimate {
            site_id: s.site_id.clone(),
            strategy,
            point,
            post_var: vars.as_ref().map(|v| v[j]),
        })
        .collect()
}

/// Writes `site,strategy,point,post_var` (empty `post_var` when absent).
pub fn write_estimates_csv(path: &Path, estimates: &[LreEstimate]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut out = || -> std::io::Result<()> {
        writeln!(w, "site,strategy,point,post_var")?;
        for e in estimates {
            let var = e.post_var.map(|v| format!("{v:?}")).unwrap_or_default();
            writeln!(w, "{},{},{:?},{}", e.site_id, e.strategy, e.point, var)?;
        }
        w.flush()
    };
    out().map_err(|e| Error::io(path, e))
}
