//! Monte Carlo study driver: the scenario × ψ × size factorial, the
//! consistency grid, and the CSV/JSON artifacts they produce.
//!
//! Site-level truth is drawn once per (scenario, size setting) from a seed
//! derived from the master seed and the setting itself, so every ψ cell of a
//! setting shares the same sites, standardized LRE draws and individual
//! draws. Individuals and treatment assignment are redrawn per replication
//! from `derive_seed(derive_seed(cell_seed, 1), r)`. Replications run in
//! parallel and are collected in replication order, so results do not depend
//! on the number of workers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::SiteCovariateMatrix;
use crate::metrics::{summarize_cell, CellSummary, Reference};
use crate::simgen::{
    derive_seed, draw_sites, GeneratorConfig, Protocol, Scenario, SitePopulation, SITE_COVARIATE_NAMES,
    VARIANCE_READING,
};
use crate::strategies::{estimate_from_inputs, SiteInputs, StrategyId};

/// Share of non-converged replications above which a cell is flagged.
pub const NONCONVERGENCE_FLAG: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeSetting {
    #[serde(rename = "J")]
    pub sites: usize,
    pub n_low: usize,
    pub n_high: usize,
}

impl SizeSetting {
    pub const fn new(sites: usize, n_low: usize, n_high: usize) -> Self {
        Self { sites, n_low, n_high }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub scenarios: Vec<Scenario>,
    /// Between-site SDs of θ in σ units.
    pub psi_grid: Vec<f64>,
    pub size_settings: Vec<SizeSetting>,
    pub replications: usize,
    /// ITT is always run as the reference, listed or not.
    pub strategies: Vec<StrategyId>,
    pub master_seed: u64,
}

pub const DEFAULT_SIZE_SETTINGS: [SizeSetting; 4] = [
    SizeSetting::new(100, 30, 170),
    SizeSetting::new(100, 400, 1000),
    SizeSetting::new(100, 10, 30),
    SizeSetting::new(30, 30, 170),
];

/// 0.05 to 0.35 in steps of 0.05. ψ = 0 is left out of the default grid:
/// every θ ties at 0 there and the tier metrics only measure tie-breaking.
pub const DEFAULT_PSI_GRID: [f64; 7] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35];

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            scenarios: vec![Scenario::ComparabilityHolds, Scenario::ComparabilityViolated],
            psi_grid: DEFAULT_PSI_GRID.to_vec(),
            size_settings: DEFAULT_SIZE_SETTINGS.to_vec(),
            replications: 500,
            strategies: StrategyId::ALL.to_vec(),
            master_seed: 20_190_601,
        }
    }
}

impl StudyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("study config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.scenarios.is_empty() || self.psi_grid.is_empty() || self.size_settings.is_empty() {
            return Err(Error::Config("scenarios, psi_grid and size_settings must be nonempty".into()));
        }
        if let Some(psi) = self.psi_grid.iter().find(|p| !(0.0..=0.35).contains(*p)) {
            return Err(Error::Config(format!("psi_std {psi} outside [0, 0.35]")));
        }
        for s in &self.size_settings {
            if s.sites < 3 {
                return Err(Error::Config(format!("J = {} is too small; need at least 3 sites", s.sites)));
            }
            self.generator(Scenario::ComparabilityHolds, s, 0.0).validate()?;
        }
        Ok(())
    }

    /// Requested strategies in canonical order, with ITT first.
    pub fn strategy_order(&self) -> Vec<StrategyId> {
        StrategyId::ALL
            .into_iter()
            .filter(|s| *s == StrategyId::Itt || self.strategies.contains(s))
            .collect()
    }

    /// Seed of the site-level truth for one (scenario, size) setting.
    pub fn cell_seed(&self, scenario: Scenario, size: &SizeSetting) -> u64 {
        let mut seed = derive_seed(self.master_seed, u64::from(u8::from(scenario)));
        for v in [size.sites, size.n_low, size.n_high] {
            seed = derive_seed(seed, v as u64);
        }
        seed
    }

    fn generator(&self, scenario: Scenario, size: &SizeSetting, psi_std: f64) -> GeneratorConfig {
        GeneratorConfig {
            scenario,
            sites: size.sites,
            n_low: size.n_low,
            n_high: size.n_high,
            psi_std,
            seed: self.cell_seed(scenario, size),
            ..GeneratorConfig::default()
        }
    }

    /// All cells in output order: scenario, then size setting, then ψ.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &scenario in &self.scenarios {
            for size in &self.size_settings {
                for &psi_std in &self.psi_grid {
                    out.push(CellKey {
                        scenario,
                        psi_std,
                        sites: size.sites,
                        n_low: size.n_low,
                        n_high: size.n_high,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub scenario: Scenario,
    pub psi_std: f64,
    #[serde(rename = "J")]
    pub sites: usize,
    pub n_low: usize,
    pub n_high: usize,
}

impl CellKey {
    pub fn size(&self) -> SizeSetting {
        SizeSetting::new(self.sites, self.n_low, self.n_high)
    }

    /// File-name-safe label, e.g. `s1_psi0.1_J100_n30-170`.
    pub fn label(&self) -> String {
        format!(
            "s{}_psi{}_J{}_n{}-{}",
            u8::from(self.scenario),
            self.psi_std,
            self.sites,
            self.n_low,
            self.n_high
        )
    }
}

/// Raw estimates of one strategy in one cell: `points[r][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyEstimates {
    pub strategy: StrategyId,
    pub points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub truth_seed: u64,
    pub summaries: Vec<CellSummary>,
    /// Above [`NONCONVERGENCE_FLAG`] non-converged fits for some strategy.
    pub flagged: bool,
    pub assignment_redraws: usize,
    /// Sites where the covariate-adjusted ITT regression was singular.
    pub itt_adj_fallbacks: usize,
    pub posterior_clamps: usize,
    pub wall_seconds: f64,
    /// True θ_j of the cell, in site order.
    pub thetas: Vec<f64>,
    /// Kept only when per-site output is requested.
    pub per_site: Vec<StrategyEstimates>,
}

impl CellResult {
    pub fn summary(&self, strategy: StrategyId) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.strategy == strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub software: String,
    pub version: String,
    pub config: StudyConfig,
    pub jobs: usize,
    pub site_truth: String,
    pub variance_reading: String,
    pub seed_scheme: String,
    pub cells: Vec<CellProvenance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellProvenance {
    pub cell: String,
    pub truth_seed: u64,
    pub wall_seconds: f64,
    pub resumed: bool,
    pub flagged: bool,
    pub assignment_redraws: usize,
    pub itt_adj_fallbacks: usize,
    pub posterior_clamps: usize,
}

#[derive(Debug, Clone)]
pub struct StudySummary {
    pub cells: Vec<CellResult>,
    pub provenance: Provenance,
}

impl StudySummary {
    pub fn cell(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.key == *key)
    }

    pub fn rows(&self) -> Vec<SummaryRow> {
        self.cells
            .iter()
            .flat_map(|c| c.summaries.iter().map(move |s| SummaryRow::new(c, s)))
            .collect()
    }

    /// Writes `summary.csv`, `provenance.json`, and `per_site.csv` when raw
    /// estimates were kept.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_summary_csv(&dir.join("summary.csv"), &self.rows())?;
        write_json(&dir.join("provenance.json"), &self.provenance)?;
        if self.cells.iter().any(|c| !c.per_site.is_empty()) {
            write_per_site_csv(&dir.join("per_site.csv"), &self.cells)?;
        }
        Ok(())
    }
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: u8,
    pub psi_std: f64,
    #[serde(rename = "J")]
    pub sites: usize,
    pub n_low: usize,
    pub n_high: usize,
    pub strategy: StrategyId,
    pub mean_bias: f64,
    pub sd_bias: Option<f64>,
    pub avg_emp_var: f64,
    pub variance_ratio: Option<f64>,
    pub avg_rmse: f64,
    pub rmse_reduction: f64,
    pub sce_rate: f64,
    pub mce_rate: f64,
    pub replications: usize,
    pub nonconverged: usize,
    pub flagged: bool,
}

impl SummaryRow {
    fn new(cell: &CellResult, s: &CellSummary) -> Self {
        Self {
            scenario: cell.key.scenario.into(),
            psi_std: cell.key.psi_std,
            sites: cell.key.sites,
            n_low: cell.key.n_low,
            n_high: cell.key.n_high,
            strategy: s.strategy,
            mean_bias: s.mean_bias,
            sd_bias: s.sd_bias,
            avg_emp_var: s.avg_emp_var,
            variance_ratio: s.variance_ratio,
            avg_rmse: s.avg_rmse,
            rmse_reduction: s.rmse_reduction,
            sce_rate: s.sce_rate,
            mce_rate: s.mce_rate,
            replications: s.replications,
            nonconverged: s.nonconverged,
            flagged: cell.flagged,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses all cores.
    pub jobs: usize,
    /// Where per-cell checkpoints go (`<dir>/checkpoints`).
    pub checkpoint_dir: Option<PathBuf>,
    /// Reuse completed cells found in the checkpoint directory.
    pub resume: bool,
    /// Keep raw per-replication estimates.
    pub per_site: bool,
}

pub fn run_study(config: &StudyConfig, opts: &RunOptions) -> Result<StudySummary> {
    run_study_with(config, opts, |_, _| {})
}

/// As [`run_study`], calling `on_cell(result, resumed)` after each cell.
pub fn run_study_with(
    config: &StudyConfig,
    opts: &RunOptions,
    mut on_cell: impl FnMut(&CellResult, bool),
) -> Result<StudySummary> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} worker threads: {e}", opts.jobs)))?;
    let ckpt_dir = opts.checkpoint_dir.as_ref().map(|d| d.join("checkpoints"));
    if let Some(dir) = &ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let fingerprint = Fingerprint::new(config, opts.per_site);
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for key in config.cells() {
        let path = ckpt_dir.as_ref().map(|d| d.join(format!("{}.json", key.label())));
        let cached = match (&path, opts.resume) {
            (Some(p), true) if p.exists() => Some(load_checkpoint(p, &key, &fingerprint)?),
            _ => None,
        };
        let resumed = cached.is_some();
        let result = match cached {
            Some(r) => r,
            None => {
                let r = pool.install(|| run_cell(config, &key, opts.per_site))?;
                if let Some(p) = &path {
                    save_checkpoint(p, &fingerprint, &r)?;
                }
                r
            }
        };
        on_cell(&result, resumed);
        records.push(CellProvenance {
            cell: key.label(),
            truth_seed: result.truth_seed,
            wall_seconds: result.wall_seconds,
            resumed,
            flagged: result.flagged,
            assignment_redraws: result.assignment_redraws,
            itt_adj_fallbacks: result.itt_adj_fallbacks,
            posterior_clamps: result.posterior_clamps,
        });
        cells.push(result);
    }
    Ok(StudySummary {
        cells,
        provenance: Provenance {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: config.clone(),
            jobs: pool.current_num_threads(),
            site_truth: "drawn once per (scenario, J, n range) and shared by all psi cells and replications; \
                         individuals and assignment redrawn per replication"
                .into(),
            variance_reading: VARIANCE_READING.into(),
            seed_scheme: "cell seed = derive(master, scenario, J, n_low, n_high); site truth from derive(cell, 0); \
                          replication r from derive(derive(cell, 1), r)"
                .into(),
            cells: records,
        },
    })
}

struct Replication {
    points: Vec<Vec<f64>>,
    converged: Vec<bool>,
    redraws: usize,
    fallbacks: usize,
    clamps: usize,
}

/// Runs every replication of one cell on the current rayon pool.
pub fn run_cell(config: &StudyConfig, key: &CellKey, keep_per_site: bool) -> Result<CellResult> {
    let start = Instant::now();
    let size = key.size();
    let generator = config.generator(key.scenario, &size, key.psi_std);
    generator.validate()?;
    let population = draw_sites(&generator, Protocol::Main)?;
    let truth = population.truth(0);
    let thetas = truth.thetas();
    let tiers = truth.tiers();
    let mu_u = truth.mu_u();
    let names: Vec<String> = SITE_COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let phi = SiteCovariateMatrix::from_rows(names, &population.phi_x())?;
    let strategies = config.strategy_order();
    let rep_seed = derive_seed(generator.seed, 1);

    let reps: Vec<Replication> = (0..config.replications)
        .into_par_iter()
        .map(|r| replicate(&population, derive_seed(rep_seed, r as u64), &phi, &strategies, &mu_u))
        .collect::<Result<_>>()
        .map_err(|e| Error::Validation(format!("cell {}: {e}", key.label())))?;

    let mut summaries = Vec::with_capacity(strategies.len());
    let mut reference: Option<Reference> = None;
    let mut flagged = false;
    let mut per_site = Vec::new();
    for (s, &strategy) in strategies.iter().enumerate() {
        let points: Vec<Vec<f64>> = reps.iter().map(|rep| rep.points[s].clone()).collect();
        let nonconverged = reps.iter().filter(|rep| !rep.converged[s]).count();
        flagged |= nonconverged as f64 > NONCONVERGENCE_FLAG * reps.len() as f64;
        let (summary, own) =
            summarize_cell(strategy, &points, &thetas, &tiers, population.sigma, reference, nonconverged);
        if strategy == StrategyId::Itt {
            reference = Some(own);
        }
        summaries.push(summary);
        if keep_per_site {
            per_site.push(StrategyEstimates { strategy, points });
        }
    }
    Ok(CellResult {
        key: *key,
        truth_seed: generator.seed,
        summaries,
        flagged,
        assignment_redraws: reps.iter().map(|r| r.redraws).sum(),
        itt_adj_fallbacks: reps.iter().map(|r| r.fallbacks).sum(),
        posterior_clamps: reps.iter().map(|r| r.clamps).sum(),
        wall_seconds: start.elapsed().as_secs_f64(),
        thetas,
        per_site,
    })
}

fn replicate(
    population: &SitePopulation,
    seed: u64,
    phi: &SiteCovariateMatrix<f64>,
    strategies: &[StrategyId],
    mu_u: &[[f64; 2]],
) -> Result<Replication> {
    let draw = population.draw_site_stats(seed);
    let fallbacks = draw.adjusted_itt.iter().filter(|a| a.is_none()).count();
    let inputs = SiteInputs {
        stats: draw.stats,
        phi: phi.clone(),
        adjusted_itt: draw.adjusted_itt,
    };
    let mut out = Replication {
        points: Vec::with_capacity(strategies.len()),
        converged: Vec::with_capacity(strategies.len()),
        redraws: draw.redraws,
        fallbacks,
        clamps: 0,
    };
    for &strategy in strategies {
        let truth = strategy.requires_truth().then_some(mu_u);
        let res = estimate_from_inputs(strategy, &inputs, truth)?;
        out.clamps += res
            .models
            .as_ref()
            .map_or(0, |m| m.posteriors.iter().filter(|e| e.clamped).count());
        out.converged.push(res.converged);
        out.points.push(res.points());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Fingerprint {
    version: String,
    master_seed: u64,
    replications: usize,
    strategies: Vec<StrategyId>,
    per_site: bool,
}

impl Fingerprint {
    fn new(config: &StudyConfig, per_site: bool) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").into(),
            master_seed: config.master_seed,
            replications: config.replications,
            strategies: config.strategy_order(),
            per_site,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    fingerprint: Fingerprint,
    result: CellResult,
}

fn save_checkpoint(path: &Path, fingerprint: &Fingerprint, result: &CellResult) -> Result<()> {
    // Write then rename so an interrupted run never leaves half a file.
    let tmp = path.with_extension("json.tmp");
    write_json(
        &tmp,
        &Checkpoint {
            fingerprint: fingerprint.clone(),
            result: result.clone(),
        },
    )?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn load_checkpoint(path: &Path, key: &CellKey, fingerprint: &Fingerprint) -> Result<CellResult> {
    let bad = |message: String| Error::Checkpoint {
        cell: key.label(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| bad(e.to_string()))?;
    let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    if ckpt.fingerprint != *fingerprint {
        return Err(bad("written by a run with a different seed, replication count or strategy set".into()));
    }
    if ckpt.result.key != *key {
        return Err(bad(format!("holds cell {}", ckpt.result.key.label())));
    }
    Ok(ckpt.result)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Validation(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        let row: SummaryRow = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::Parse {
                path: path.into(),
                line,
                message: e.to_string(),
            }
        })?;
        rows.push(row);
    }
    Ok(rows)
}

fn write_per_site_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["scenario", "psi_std", "J", "n_low", "n_high", "replication", "site", "theta", "strategy", "point"])
        .map_err(|e| csv_error(path, e))?;
    for cell in cells {
        let k = &cell.key;
        let head = [
            u8::from(k.scenario).to_string(),
            k.psi_std.to_string(),
            k.sites.to_string(),
            k.n_low.to_string(),
            k.n_high.to_string(),
        ];
        for est in &cell.per_site {
            for (r, row) in est.points.iter().enumerate() {
                for (j, point) in row.iter().enumerate() {
                    let site = crate::simgen::site_id(j, k.sites);
                    let tail = [r.to_string(), site, cell.thetas[j].to_string(), est.strategy.to_string(), point.to_string()];
                    w.write_record(head.iter().chain(&tail)).map_err(|e| csv_error(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain-text tables of a summary file, one block per cell.
pub fn render_report(rows: &[SummaryRow]) -> String {
    let mut groups: BTreeMap<(u8, usize, usize, usize, u64), Vec<&SummaryRow>> = BTreeMap::new();
    for row in rows {
        let key = (row.scenario, row.sites, row.n_low, row.n_high, row.psi_std.to_bits());
        groups.entry(key).or_default().push(row);
    }
    let mut out = String::new();
    for ((scenario, sites, lo, hi, _), rows) in groups {
        let r0 = rows[0];
        let _ = writeln!(
            out,
            "scenario {scenario}  J={sites}  n=[{lo},{hi}]  psi={}  replications={}{}",
            r0.psi_std,
            r0.replications,
            if r0.flagged { "  [non-convergence > 5%]" } else { "" }
        );
        let _ = writeln!(
            out,
            "  {:<12} {:>10} {:>9} {:>9} {:>9} {:>9} {:>7} {:>7} {:>6}",
            "strategy", "mean_bias", "sd_bias", "var_ratio", "rmse", "rmse_red", "sce", "mce", "nonconv"
        );
        for r in rows {
            let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(
                out,
                "  {:<12} {:>10.4} {:>9} {:>9} {:>9.4} {:>9.3} {:>7.4} {:>7.4} {:>6}",
                r.strategy.label(),
                r.mean_bias,
                opt(r.sd_bias),
                opt(r.variance_ratio),
                r.avg_rmse,
                r.rmse_reduction,
                r.sce_rate,
                r.mce_rate,
                r.nonconverged
            );
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsistencyConfig {
    pub scenario: Scenario,
    pub sites: Vec<usize>,
    /// Average site sizes; site sizes are uniform on
    /// `[round(0.3 n̄), round(1.7 n̄)]`.
    pub mean_n: Vec<usize>,
    pub psi_grid: Vec<f64>,
    /// Datasets averaged per cell. 1 reproduces the single-file protocol.
    pub datasets: usize,
    pub seed: u64,
    /// Cells with more simulated individuals than this are skipped.
    pub max_individuals: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::ComparabilityHolds,
            sites: vec![100, 1000],
            mean_n: vec![100, 1000, 10_000, 50_000],
            psi_grid: vec![0.1, 0.35],
            datasets: 1,
            seed: 20_190_602,
            max_individuals: 20_000_000,
        }
    }
}

impl ConsistencyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    #[serde(rename = "J")]
    pub sites: usize,
    pub mean_n: usize,
    pub psi_std: f64,
    pub datasets: usize,
    /// Mean over sites of |v1* − θ|, σ units.
    pub avg_abs_bias: Option<f64>,
    /// SD over sites of v1* − θ, σ units.
    pub sd_bias: Option<f64>,
    pub note: String,
}

pub fn consistency_size(sites: usize, mean_n: usize) -> SizeSetting {
    let lo = ((0.3 * mean_n as f64).round() as usize).max(2);
    let hi = ((1.7 * mean_n as f64).round() as usize).max(lo);
    SizeSetting::new(sites, lo, hi)
}

/// Two-step estimates against the truth on the low-noise generator.
pub fn run_consistency_grid(config: &ConsistencyConfig) -> Result<Vec<ConsistencyRow>> {
    if config.datasets < 1 {
        return Err(Error::Config("datasets must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &sites in &config.sites {
        for &mean_n in &config.mean_n {
            let size = consistency_size(sites, mean_n);
            let individuals = sites as u64 * mean_n as u64;
            for &psi_std in &config.psi_grid {
                if individuals > config.max_individuals {
                    rows.push(ConsistencyRow {
                        sites,
                        mean_n,
                        psi_std,
                        datasets: config.datasets,
                        avg_abs_bias: None,
                        sd_bias: None,
                        note: format!("skipped: {individuals} individuals exceed the budget of {}", config.max_individuals),
                    });
                    continue;
                }
                let (mut abs_sum, mut sd_sum) = (0.0, 0.0);
                for d in 0..config.datasets {
                    let seed = derive_seed(derive_seed(derive_seed(config.seed, sites as u64), mean_n as u64), d as u64);
                    let (a, s) = consistency_bias(config.scenario, size, psi_std, seed)?;
                    abs_sum += a;
                    sd_sum += s;
                }
                let k = config.datasets as f64;
                rows.push(ConsistencyRow {
                    sites,
                    mean_n,
                    psi_std,
                    datasets: config.datasets,
                    avg_abs_bias: Some(abs_sum / k),
                    sd_bias: Some(sd_sum / k),
                    note: String::new(),
                });
            }
        }
    }
    Ok(rows)
}

/// `(mean |v1* − θ|, SD(v1* − θ))` in σ units for one dataset.
pub fn consistency_bias(scenario: Scenario, size: SizeSetting, psi_std: f64, seed: u64) -> Result<(f64, f64)> {
    let generator = GeneratorConfig {
        scenario,
        sites: size.sites,
        n_low: size.n_low,
        n_high: size.n_high,
        psi_std,
        seed,
        ..GeneratorConfig::default()
    };
    generator.validate()?;
    let population = draw_sites(&generator, Protocol::Consistency)?;
    let draw = population.draw_site_stats(derive_seed(seed, 1));
    let names: Vec<String> = SITE_COVARIATE_NAMES.iter().map(|s| s.to_string()).collect();
    let inputs = SiteInputs {
        stats: draw.stats,
        phi: SiteCovariateMatrix::from_rows(names, &population.phi_x())?,
        adjusted_itt: draw.adjusted_itt,
    };
    let out = estimate_from_inputs(StrategyId::TwoStep, &inputs, None)?;
    let sigma = population.sigma;
    let errors: Vec<f64> = out
        .points()
        .iter()
        .enumerate()
        .map(|(j, p)| (p - population.theta(j)) / sigma)
        .collect();
    let avg_abs = errors.iter().map(|e| e.abs()).sum::<f64>() / errors.len() as f64;
    let (_, sd) = crate::metrics::mean_sd(&errors);
    Ok((avg_abs, sd.unwrap_or(0.0)))
}

pub fn write_consistency_csv(path: &Path, rows: &[ConsistencyRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
