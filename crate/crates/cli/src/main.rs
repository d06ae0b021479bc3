use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use lre_core::data::{load_csv, CsvSchema, TrialDataset};
use lre_core::eb::write_eb_csv;
use lre_core::harness::{
    read_summary_csv, render_report, run_consistency_grid, run_study_with, write_consistency_csv, ConsistencyConfig,
    RunOptions, SizeSetting, StudyConfig,
};
use lre_core::lmm::RandomSlopeFit;
use lre_core::metrics::{classify_tiers, TierLabel};
use lre_core::simgen::{generate, generate_consistency_variant, GeneratorConfig, Scenario, SyntheticTruth};
use lre_core::strategies::{estimate_lre, FittedModels, StrategyId};

#[derive(Parser, Debug)]
#[command(name = "lre", version, about = "Site-specific local relative effectiveness in multisite trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multisite trial and its truth.
    Simulate(SimulateArgs),
    /// Run one strategy on a dataset and write per-site estimates.
    Fit(FitArgs),
    /// Run a Monte Carlo study.
    Study(StudyArgs),
    /// Print the tables of a study summary.
    Report(ReportArgs),
    /// Bias of the two-step estimates on the low-noise generator.
    Consistency(ConsistencyArgs),
}

#[derive(Args, Debug)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = "LRE_OUT_DIR", default_value = "lre-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Generator settings as `key = value` lines; flags override them.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long = "J")]
    sites: Option<usize>,
    /// Site size range, LO:HI.
    #[arg(long, value_parser = parse_range)]
    n_range: Option<(usize, usize)>,
    #[arg(long, visible_alias = "psi")]
    psi_std: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Use the low-noise variant of the generator.
    #[arg(long)]
    consistency_variant: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Individual records: site, z, y and covariate columns.
    #[arg(long)]
    data: PathBuf,
    /// Site covariates: site and Φ_X columns.
    #[arg(long)]
    sites: Option<PathBuf>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: StrategyId,
    /// `truth.json` from `simulate`; required by me_adj_x_u only.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// Study configuration file; flags override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated scenarios (1, 2).
    #[arg(long, value_delimiter = ',', value_parser = parse_scenario)]
    scenario: Option<Vec<Scenario>>,
    /// Number of sites; with --n-range replaces the size settings.
    #[arg(long = "J")]
    sites: Option<usize>,
    #[arg(long, value_parser = parse_range)]
    n_range: Option<(usize, usize)>,
    /// Comma-separated ψ grid (σ units).
    #[arg(long, visible_alias = "psi", value_delimiter = ',')]
    psi_std: Option<Vec<f64>>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated strategies.
    #[arg(long, value_delimiter = ',', value_parser = parse_strategy)]
    strategy: Option<Vec<StrategyId>>,
    #[arg(long)]
    replications: Option<usize>,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Reuse completed cells from an interrupted run in the same directory.
    #[arg(long)]
    resume: bool,
    /// Also write every replication's estimates to per_site.csv.
    #[arg(long)]
    per_site: bool,
    #[command(flatten)]
    out: OutDir,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// summary.csv written by `study`.
    summary: PathBuf,
}

#[derive(Args, Debug)]
struct ConsistencyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "J", value_delimiter = ',')]
    sites: Option<Vec<usize>>,
    /// Comma-separated average site sizes.
    #[arg(long, value_delimiter = ',')]
    mean_n: Option<Vec<usize>>,
    #[arg(long, visible_alias = "psi", value_delimiter = ',')]
    psi_std: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Datasets averaged per cell.
    #[arg(long)]
    datasets: Option<usize>,
    /// Skip cells with more simulated individuals than this.
    #[arg(long)]
    max_individuals: Option<u64>,
    #[command(flatten)]
    out: OutDir,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    let v: u8 = s.trim().parse().map_err(|_| format!("scenario must be 1 or 2, got {s:?}"))?;
    Scenario::try_from(v)
}

fn parse_strategy(s: &str) -> Result<StrategyId, String> {
    s.parse().map_err(|e: lre_core::Error| e.to_string())
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (lo, hi) = s.split_once(':').ok_or_else(|| format!("expected LO:HI, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<usize>().map_err(|_| format!("bad bound {v:?} in {s:?}"));
    Ok((num(lo)?, num(hi)?))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Fit(a) => fit(a),
        Command::Study(a) => study(a),
        Command::Report(a) => report(a),
        Command::Consistency(a) => consistency(a),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn provenance(command: &str, settings: Value) -> Value {
    json!({
        "software": "lre",
        "version": env!("CARGO_PKG_VERSION"),
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "settings": settings,
    })
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => GeneratorConfig::from_toml_str(&read_text(p)?)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.scenario {
        cfg.scenario = s;
    }
    if let Some(j) = a.sites {
        cfg.sites = j;
    }
    if let Some((lo, hi)) = a.n_range {
        cfg.n_low = lo;
        cfg.n_high = hi;
    }
    if let Some(p) = a.psi_std {
        cfg.psi_std = p;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let (ds, truth) = if a.consistency_variant {
        generate_consistency_variant(&cfg)?
    } else {
        generate(&cfg)?
    };
    let dir = &a.out.out;
    create_dir(dir)?;
    ds.write_csv(&dir.join("records.csv"), &dir.join("sites.csv"))?;
    write_truth_csv(&dir.join("truth.csv"), &truth)?;
    write_json(&dir.join("truth.json"), &serde_json::to_value(&truth)?)?;
    let mut settings = serde_json::to_value(&cfg)?;
    settings["consistency_variant"] = json!(a.consistency_variant);
    settings["sigma"] = json!(truth.sigma);
    write_json(&dir.join("provenance.json"), &provenance("simulate", settings))?;
    let s = ds.summary();
    eprintln!(
        "wrote {} records at {} sites to {} (sigma = {:.3})",
        s.records,
        s.sites,
        dir.display(),
        truth.sigma
    );
    Ok(())
}

fn tier_name(t: TierLabel) -> &'static str {
    match t {
        TierLabel::Low => "low",
        TierLabel::Medium => "medium",
        TierLabel::High => "high",
    }
}

fn write_truth_csv(path: &Path, truth: &SyntheticTruth) -> Result<()> {
    let mut out = String::from("site,theta,delta,mu_x1,mu_x2,mu_u1,mu_u2,tier\n");
    for s in &truth.sites {
        out += &format!(
            "{},{:?},{:?},{:?},{:?},{:?},{:?},{}\n",
            s.site_id,
            s.theta,
            s.delta,
            s.mu_x[0],
            s.mu_x[1],
            s.mu_u[0],
            s.mu_u[1],
            tier_name(s.true_tier)
        );
    }
    fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}

fn load_truth(path: &Path, ds: &TrialDataset) -> Result<SyntheticTruth> {
    let truth: SyntheticTruth =
        serde_json::from_str(&read_text(path)?).with_context(|| format!("parsing {}", path.display()))?;
    let ids: Vec<&str> = truth.sites.iter().map(|s| s.site_id.as_str()).collect();
    let data_ids: Vec<&str> = ds.site_ids().iter().map(String::as_str).collect();
    if ids != data_ids {
        bail!("{} does not list the dataset's sites in the dataset's order", path.display());
    }
    Ok(truth)
}

fn fit(a: FitArgs) -> Result<()> {
    let ds = load_csv(&a.data, &CsvSchema::default(), a.sites.as_deref())?;
    let truth = match (&a.truth, a.strategy.requires_truth()) {
        (Some(p), true) => Some(load_truth(p, &ds)?),
        (None, true) => bail!("strategy {} needs --truth (the truth.json written by simulate)", a.strategy),
        (Some(_), false) => bail!("--truth is only accepted by strategy {}", StrategyId::MeAdjXU),
        (None, false) => None,
    };
    let out = estimate_lre(a.strategy, &ds, truth.as_ref())?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    let dir = &a.out.out;
    create_dir(dir)?;

    let tiers = classify_tiers(&out.points());
    let mut csv = String::from("site,strategy,point,post_var,tier\n");
    for (e, t) in out.estimates.iter().zip(&tiers) {
        let var = e.post_var.map(|v| format!("{v:?}")).unwrap_or_default();
        csv += &format!("{},{},{:?},{},{}\n", e.site_id, e.strategy, e.point, var, tier_name(*t));
    }
    let path = dir.join("estimates.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;

    let mut model = json!({
        "strategy": a.strategy.name(),
        "converged": out.converged,
        "warnings": out.warnings,
        "sites": ds.num_sites(),
        "records": ds.num_records(),
    });
    if let Some(m) = &out.models {
        model["model"] = model_json(m);
        if let Some(step1) = &m.step1 {
            if m.eta0.len() == m.posteriors.len() {
                write_eb_csv(&dir.join("eb.csv"), &m.eta0, &m.posteriors)?;
            }
            model["step1"] = json!({
                "alpha00": step1.alpha00,
                "alpha01": named(&step1.covariates, &step1.alpha01),
                "omega00": step1.omega00,
                "sigma0_sq": step1.sigma0_sq,
                "loglik": step1.loglik,
                "converged": step1.converged,
                "iterations": step1.iterations,
                "boundary": step1.boundary,
            });
        }
    }
    write_json(&dir.join("model.json"), &model)?;
    let settings = json!({
        "data": a.data,
        "sites": a.sites,
        "truth": a.truth,
        "strategy": a.strategy.name(),
    });
    write_json(&dir.join("provenance.json"), &provenance("fit", settings))?;
    if !out.converged {
        eprintln!("warning: the fit did not converge; see model.json");
    }
    eprintln!("wrote {} site estimates to {}", out.estimates.len(), dir.display());
    Ok(())
}

fn named(names: &[String], values: &[f64]) -> Value {
    let map: serde_json::Map<String, Value> = names.iter().cloned().zip(values.iter().map(|v| json!(v))).collect();
    Value::Object(map)
}

/// Fixed effects by equation plus the variance components; for the two-step
/// model also the γ layout (γ·0 control-mean equation, γ·1 ITT equation,
/// γ·2 the η0* coefficient).
fn model_json(m: &FittedModels) -> Value {
    let f: &RandomSlopeFit<f64> = &m.slope;
    let mut v = json!({
        "intercept_equation": {
            "constant": f.intercept_coef[0],
            "covariates": named(&f.intercept_covariates, &f.intercept_coef[1..]),
        },
        "slope_equation": {
            "constant": f.slope_coef[0],
            "covariates": named(&f.slope_covariates, &f.slope_coef[1..]),
        },
        "tau00": f.tau00(),
        "tau01": f.tau01(),
        "tau11": f.tau11(),
        "sigma0_sq": f.sigma0_sq,
        "sigma1_sq": f.sigma1_sq,
        "loglik": f.loglik,
        "converged": f.converged,
        "iterations": f.iterations,
        "boundary": f.boundary,
        "gradient_norm": f.diagnostics.gradient_norm,
    });
    if m.step1.is_some() {
        let phi: Vec<String> = f
            .intercept_covariates
            .iter()
            .filter(|n| n.as_str() != lre_core::lmm::ETA0_COLUMN)
            .cloned()
            .collect();
        let pick = |coef: &[f64], names: &[String], wanted: &[String]| -> Value {
            let map: BTreeMap<&String, f64> = names.iter().zip(&coef[1..]).map(|(n, c)| (n, *c)).collect();
            Value::Object(wanted.iter().filter_map(|n| map.get(n).map(|c| (n.clone(), json!(c)))).collect())
        };
        v["gamma00"] = json!(f.intercept_coef[0]);
        v["gamma01"] = pick(&f.intercept_coef, &f.intercept_covariates, &phi);
        v["gamma02"] = json!(f.intercept_coef_for(lre_core::lmm::ETA0_COLUMN));
        v["gamma10"] = json!(f.slope_coef[0]);
        v["gamma11"] = pick(&f.slope_coef, &f.slope_covariates, &phi);
        v["gamma12"] = json!(f.slope_coef_for(lre_core::lmm::ETA0_COLUMN));
    }
    v
}

fn study(a: StudyArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => StudyConfig::from_toml_str(&read_text(p)?)?,
        None => StudyConfig::default(),
    };
    if let Some(s) = a.scenario {
        cfg.scenarios = s;
    }
    if a.sites.is_some() || a.n_range.is_some() {
        let base = cfg.size_settings.first().copied().unwrap_or(SizeSetting::new(100, 30, 170));
        let (lo, hi) = a.n_range.unwrap_or((base.n_low, base.n_high));
        cfg.size_settings = vec![SizeSetting::new(a.sites.unwrap_or(base.sites), lo, hi)];
    }
    if let Some(p) = a.psi_std {
        cfg.psi_grid = p;
    }
    if let Some(s) = a.seed {
        cfg.master_seed = s;
    }
    if let Some(s) = a.strategy {
        cfg.strategies = s;
    }
    if let Some(r) = a.replications {
        cfg.replications = r;
    }
    cfg.validate()?;
    let dir = &a.out.out;
    create_dir(dir)?;
    fs::write(dir.join("study.toml"), cfg.to_toml_string()).context("writing study.toml")?;
    let opts = RunOptions {
        jobs: a.jobs,
        checkpoint_dir: Some(dir.clone()),
        resume: a.resume,
        per_site: a.per_site,
    };
    let total = cfg.cells().len();
    let mut done = 0;
    let summary = run_study_with(&cfg, &opts, |cell, resumed| {
        done += 1;
        let how = if resumed { "resumed".to_string() } else { format!("{:.1}s", cell.wall_seconds) };
        eprintln!("[{done}/{total}] {} ({how}){}", cell.key.label(), if cell.flagged { " [flagged]" } else { "" });
    })?;
    summary.write(dir)?;
    eprintln!("wrote {}", dir.join("summary.csv").display());
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    let rows = read_summary_csv(&a.summary)?;
    if rows.is_empty() {
        bail!("{} has no rows", a.summary.display());
    }
    print!("{}", render_report(&rows));
    Ok(())
}

fn consistency(a: ConsistencyArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => ConsistencyConfig::from_toml_str(&read_text(p)?)?,
        None => ConsistencyConfig::default(),
    };
    if let Some(v) = a.sites {
        cfg.sites = v;
    }
    if let Some(v) = a.mean_n {
        cfg.mean_n = v;
    }
    if let Some(v) = a.psi_std {
        cfg.psi_grid = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.datasets {
        cfg.datasets = v;
    }
    if let Some(v) = a.max_individuals {
        cfg.max_individuals = v;
    }
    let rows = run_consistency_grid(&cfg)?;
    let dir = &a.out.out;
    create_dir(dir)?;
    write_consistency_csv(&dir.join("consistency.csv"), &rows)?;
    write_json(&dir.join("provenance.json"), &provenance("consistency", serde_json::to_value(&cfg)?))?;
    println!("{:>6} {:>7} {:>6} {:>13} {:>9}", "J", "mean_n", "psi", "avg_abs_bias", "sd_bias");
    for r in &rows {
        let f = |v: Option<f64>| v.map_or("x".to_string(), |v| format!("{v:.3}"));
        println!("{:>6} {:>7} {:>6} {:>13} {:>9}  {}", r.sites, r.mean_n, r.psi_std, f(r.avg_abs_bias), f(r.sd_bias), r.note);
    }
    Ok(())
}
