//! Seeded synthetic multisite trials resembling a job-training evaluation.
//!
//! Two data-generating scenarios share the site-level effect model
//!
//! ```text
//! δ_j  = 13 − 70 μX1 + 70 μX2 − 80 μU1 + 90 μU2 + θ_j,   θ_j ~ N(0, (ψ σ)²)
//! δ_ij ~ N(δ_j + 4 X1 + 2.5 X2 − 2 U1 − 1.5 U2, v_δ)
//! ```
//!
//! and differ in the control outcome: in scenario 1 both unobserved
//! covariates enter `Y(0)`, in scenario 2 only `U1` does, so `U2` moves the
//! treatment effect without leaving a trace in the control arm.
//!
//! Every "N(m, v)" in the protocol is read with `v` a variance. The scaling
//! unit σ is the theoretical within-site SD of `Y(0)` (√33 500 for scenario 1).
//!
//! # Random streams
//!
//! All draws use ChaCha8 (`rand_chacha`) with `rand_distr::StandardNormal`.
//! A configuration seed is split with [`derive_seed`] into a site-level seed
//! (index 0) and an individual-level seed (index 1). Site-level draws come
//! from one stream in site order: `n_j`, μX1, μX2, μU1, μU2, then the
//! standard-normal `z_j` with θ_j = ψσ·z_j. Individuals of site `j` come
//! from stream `j` of the individual seed: for each person X1, X2, U1, U2,
//! ε_Y, ε_δ; then one uniform per person for assignment, repeated for the
//! whole site until both arms are nonempty.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ArmAccumulator, RecordColumns, SiteRegression, SiteSufficientStats, TrialDataset};
use crate::error::{Error, Result};
use crate::metrics::{classify_tiers, TierLabel};

/// How the protocol's normal-distribution parameters are interpreted.
pub const VARIANCE_READING: &str =
    "N(m, v) read with v as a variance: site means N(0, 0.1), Y(0) error N(0, 3000), effect noise N(., 4)";

const SITE_MEAN_VAR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Scenario {
    /// Unobserved covariates shift both `Y(0)` and the effect.
    ComparabilityHolds,
    /// `U2` shifts the effect only.
    ComparabilityViolated,
}

impl TryFrom<u8> for Scenario {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Scenario::ComparabilityHolds),
            2 => Ok(Scenario::ComparabilityViolated),
            other => Err(format!("scenario must be 1 or 2, got {other}")),
        }
    }
}

impl From<Scenario> for u8 {
    fn from(s: Scenario) -> u8 {
        match s {
            Scenario::ComparabilityHolds => 1,
            Scenario::ComparabilityViolated => 2,
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

/// Main protocol or the low-noise variant used for the consistency grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Main,
    Consistency,
}

impl Protocol {
    fn outcome_error_var(self) -> f64 {
        match self {
            Protocol::Main => 3000.0,
            Protocol::Consistency => 1.0,
        }
    }

    fn effect_noise_var(self) -> f64 {
        match self {
            Protocol::Main => 4.0,
            Protocol::Consistency => 1.0,
        }
    }
}

/// Linear `Y(0)` model: individual coefficients on (X1, X2, U1, U2) and
/// site-mean coefficients on (μX1, μX2, μU1, μU2).
#[derive(Debug, Clone, Copy)]
struct OutcomeModel {
    individual: [f64; 4],
    site: [f64; 4],
}

impl Scenario {
    fn outcome_model(self) -> OutcomeModel {
        match self {
            Scenario::ComparabilityHolds => OutcomeModel {
                individual: [120.0, -100.0, 60.0, -50.0],
                site: [20.0, -30.0, 20.0, -20.0],
            },
            Scenario::ComparabilityViolated => OutcomeModel {
                individual: [120.0, -100.0, 78.0, 0.0],
                site: [20.0, -30.0, 28.0, 0.0],
            },
        }
    }
}

const CONTROL_INTERCEPT: f64 = 197.0;
const EFFECT_INTERCEPT: f64 = 13.0;
const EFFECT_SITE: [f64; 4] = [-70.0, 70.0, -80.0, 90.0];
const EFFECT_INDIVIDUAL: [f64; 4] = [4.0, 2.5, -2.0, -1.5];

/// Theoretical within-site SD of `Y(0)`.
pub fn scaling_sigma(scenario: Scenario, protocol: Protocol) -> f64 {
    let m = scenario.outcome_model();
    let explained: f64 = m.individual.iter().map(|c| c * c).sum();
    (explained + protocol.outcome_error_var()).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scenario: Scenario,
    #[serde(rename = "J")]
    pub sites: usize,
    pub n_low: usize,
    pub n_high: usize,
    pub psi_std: f64,
    pub seed: u64,
    #[serde(default = "default_treat_prob")]
    pub treat_prob: f64,
}

fn default_treat_prob() -> f64 {
    0.5
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::ComparabilityHolds,
            sites: 100,
            n_low: 30,
            n_high: 170,
            psi_std: 0.1,
            seed: 1,
            treat_prob: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sites < 2 {
            return Err(Error::Config(format!("J must be at least 2, got {}", self.sites)));
        }
        if self.n_low < 2 || self.n_low > self.n_high {
            return Err(Error::Config(format!(
                "need 2 <= n_low <= n_high, got {}..{}",
                self.n_low, self.n_high
            )));
        }
        if !(self.psi_std >= 0.0) || !self.psi_std.is_finite() {
            return Err(Error::Config(format!("psi_std must be >= 0, got {}", self.psi_std)));
        }
        if self.treat_prob != 0.5 {
            return Err(Error::Config("treat_prob is fixed at 0.5".into()));
        }
        Ok(())
    }

    /// Parses a `key = value` file (TOML syntax).
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// SplitMix64 finalizer applied to `parent ⊕ mix(index)`; the documented
/// seed-splitting function for sites, replications and study cells.
pub fn derive_seed(parent: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(parent ^ mix(index))
}

/// Site-level quantities drawn once: sample size, covariate means and the
/// standardized LRE draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteParameters {
    pub n: usize,
    pub mu_x: [f64; 2],
    pub mu_u: [f64; 2],
    /// θ_j / (ψσ); scaling happens in [`SitePopulation::theta`].
    pub theta_z: f64,
}

/// Site-level draws plus everything needed to turn them into a truth table.
#[derive(Debug, Clone)]
pub struct SitePopulation {
    pub scenario: Scenario,
    pub protocol: Protocol,
    pub psi_std: f64,
    pub sigma: f64,
    pub sites: Vec<SiteParameters>,
}

/// Site-level summaries of one replication, drawn without materializing
/// individual records.
#[derive(Debug, Clone)]
pub struct SiteDraw {
    pub stats: Vec<SiteSufficientStats<f64>>,
    pub adjusted_itt: Vec<Option<f64>>,
    pub redraws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub site_id: String,
    pub theta: f64,
    pub delta: f64,
    pub mu_x: [f64; 2],
    pub mu_u: [f64; 2],
    pub true_tier: TierLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub scenario: Scenario,
    pub protocol: Protocol,
    pub sigma: f64,
    pub sites: Vec<SiteTruth>,
    /// Assignment vectors redrawn because one arm came out empty.
    pub assignment_redraws: usize,
}

impl SyntheticTruth {
    pub fn thetas(&self) -> Vec<f64> {
        self.sites.iter().map(|s| s.theta).collect()
    }

    pub fn mu_u(&self) -> Vec<[f64; 2]> {
        self.sites.iter().map(|s| s.mu_u).collect()
    }

    pub fn tiers(&self) -> Vec<TierLabel> {
        self.sites.iter().map(|s| s.true_tier).collect()
    }
}

pub fn site_id(j: usize, total: usize) -> String {
    let width = total.to_string().len().max(3);
    format!("s{:0width$}", j + 1)
}

pub const SITE_COVARIATE_NAMES: [&str; 2] = ["phi_x1", "phi_x2"];
pub const COVARIATE_NAMES: [&str; 2] = ["x1", "x2"];

/// Draws the site-level quantities from `derive_seed(config.seed, 0)`.
pub fn draw_sites(config: &GeneratorConfig, protocol: Protocol) -> Result<SitePopulation> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0));
    let sd = SITE_MEAN_VAR.sqrt();
    let sites = (0..config.sites)
        .map(|_| {
            let n = rng.random_range(config.n_low..=config.n_high);
            let mut normal = || -> f64 { rng.sample::<f64, _>(StandardNormal) };
            let mu_x = [sd * normal(), sd * normal()];
            let mu_u = [sd * normal(), sd * normal()];
            let theta_z = normal();
            SiteParameters { n, mu_x, mu_u, theta_z }
        })
        .collect();
    Ok(SitePopulation {
        scenario: config.scenario,
        protocol,
        psi_std: config.psi_std,
        sigma: scaling_sigma(config.scenario, protocol),
        sites,
    })
}

impl SitePopulation {
    pub fn theta(&self, j: usize) -> f64 {
        self.psi_std * self.sigma * self.sites[j].theta_z
    }

    /// Site ITT mean δ_j (including θ_j).
    pub fn delta(&self, j: usize) -> f64 {
        let s = &self.sites[j];
        let m = [s.mu_x[0], s.mu_x[1], s.mu_u[0], s.mu_u[1]];
        EFFECT_INTERCEPT + dot4(&EFFECT_SITE, &m) + self.theta(j)
    }

    /// Same site draws at another between-site SD of θ.
    pub fn with_psi(&self, psi_std: f64) -> Self {
        Self {
            psi_std,
            ..self.clone()
        }
    }

    pub fn truth(&self, assignment_redraws: usize) -> SyntheticTruth {
        let j_total = self.sites.len();
        let thetas: Vec<f64> = (0..j_total).map(|j| self.theta(j)).collect();
        let tiers = classify_tiers(&thetas);
        let sites = self
            .sites
            .iter()
            .enumerate()
            .map(|(j, s)| SiteTruth {
                site_id: site_id(j, j_total),
                theta: thetas[j],
                delta: self.delta(j),
                mu_x: s.mu_x,
                mu_u: s.mu_u,
                true_tier: tiers[j],
            })
            .collect();
        SyntheticTruth {
            scenario: self.scenario,
            protocol: self.protocol,
            sigma: self.sigma,
            sites,
            assignment_redraws,
        }
    }

    /// Simulates every individual of site `j` and hands `(z, y, x1, x2)` to
    /// `emit` in generation order. Returns the number of assignment redraws.
    fn simulate_site(&self, j: usize, seed: u64, buf: &mut Vec<Person>, mut emit: impl FnMut(u8, f64, f64, f64)) -> usize {
        let s = &self.sites[j];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(j as u64);
        let model = self.scenario.outcome_model();
        let err_sd = self.protocol.outcome_error_var().sqrt();
        let eff_sd = self.protocol.effect_noise_var().sqrt();
        let site_mu = [s.mu_x[0], s.mu_x[1], s.mu_u[0], s.mu_u[1]];
        let control_site_mean = CONTROL_INTERCEPT + dot4(&model.site, &site_mu);
        let delta_j = self.delta(j);

        buf.clear();
        for _ in 0..s.n {
            let mut normal = || -> f64 { rng.sample::<f64, _>(StandardNormal) };
            let v = [
                site_mu[0] + normal(),
                site_mu[1] + normal(),
                site_mu[2] + normal(),
                site_mu[3] + normal(),
            ];
            let eps_y = err_sd * normal();
            let eps_d = eff_sd * normal();
            let y0 = control_site_mean + dot4(&model.individual, &v) + eps_y;
            let effect = delta_j + dot4(&EFFECT_INDIVIDUAL, &v) + eps_d;
            buf.push(Person {
                x: [v[0], v[1]],
                y0,
                y1: y0 + effect,
                z: 0,
            });
        }

        let mut redraws = 0;
        loop {
            let mut treated = 0;
            for p in buf.iter_mut() {
                p.z = u8::from(rng.random::<f64>() < 0.5);
                treated += p.z as usize;
            }
            if treated > 0 && treated < buf.len() || buf.len() < 2 {
                break;
            }
            redraws += 1;
        }
        for p in buf.iter() {
            let y = if p.z == 1 { p.y1 } else { p.y0 };
            emit(p.z, y, p.x[0], p.x[1]);
        }
        redraws
    }

    /// Full individual-level dataset for one replication.
    pub fn draw_dataset(&self, individual_seed: u64) -> Result<(TrialDataset, usize)> {
        let j_total = self.sites.len();
        let total: usize = self.sites.iter().map(|s| s.n).sum();
        let mut cols = RecordColumns {
            site: Vec::with_capacity(total),
            z: Vec::with_capacity(total),
            y: Vec::with_capacity(total),
            x: Vec::with_capacity(2 * total),
        };
        let mut buf = Vec::new();
        let mut redraws = 0;
        for j in 0..j_total {
            redraws += self.simulate_site(j, individual_seed, &mut buf, |z, y, x1, x2| {
                cols.site.push(j);
                cols.z.push(z);
                cols.y.push(y);
                cols.x.push(x1);
                cols.x.push(x2);
            });
        }
        let site_ids = (0..j_total).map(|j| site_id(j, j_total)).collect();
        let phi = self.sites.iter().flat_map(|s| s.mu_x).collect();
        let ds = TrialDataset::from_columns(
            site_ids,
            SITE_COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            phi,
            COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
            cols,
        )?;
        Ok((ds, redraws))
    }

    /// Sufficient statistics for one replication without materializing
    /// records. Bit-identical to summarizing [`Self::draw_dataset`].
    pub fn draw_site_stats(&self, individual_seed: u64) -> SiteDraw {
        let j_total = self.sites.len();
        let mut buf = Vec::new();
        let mut redraws = 0;
        let mut stats = Vec::with_capacity(j_total);
        let mut adjusted_itt = Vec::with_capacity(j_total);
        for j in 0..j_total {
            let mut arms = [ArmAccumulator::<f64>::new(); 2];
            let mut reg = SiteRegression::new(COVARIATE_NAMES.len());
            redraws += self.simulate_site(j, individual_seed, &mut buf, |z, y, x1, x2| {
                arms[z as usize].push(y);
                reg.push(z, y, &[x1, x2]);
            });
            stats.push(SiteSufficientStats::from_arms(site_id(j, j_total), arms[0], arms[1]));
            adjusted_itt.push(reg.treatment_coef());
        }
        SiteDraw {
            stats,
            adjusted_itt,
            redraws,
        }
    }

    /// Site covariates Φ_X as seen by the estimators (true site means of X).
    pub fn phi_x(&self) -> Vec<Vec<f64>> {
        self.sites.iter().map(|s| s.mu_x.to_vec()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Person {
    x: [f64; 2],
    y0: f64,
    y1: f64,
    z: u8,
}

#[inline]
fn dot4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

fn generate_with(config: &GeneratorConfig, protocol: Protocol) -> Result<(TrialDataset, SyntheticTruth)> {
    let population = draw_sites(config, protocol)?;
    let (ds, redraws) = population.draw_dataset(derive_seed(config.seed, 1))?;
    Ok((ds, population.truth(redraws)))
}

/// One synthetic trial under the main protocol.
pub fn generate(config: &GeneratorConfig) -> Result<(TrialDataset, SyntheticTruth)> {
    generate_with(config, Protocol::Main)
}

/// Low-noise variant: `Y(0)` error variance 1 and effect noise variance 1.
pub fn generate_consistency_variant(config: &GeneratorConfig) -> Result<(TrialDataset, SyntheticTruth)> {
    generate_with(config, Protocol::Consistency)
}
