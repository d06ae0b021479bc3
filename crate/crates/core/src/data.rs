//! Multisite trial data: individual records, site-level covariates, CSV
//! ingestion, and the per-site sufficient statistics every mixed-model fit
//! works from.
//!
//! Records are stored column-wise; site ids are opaque strings mapped to a
//! contiguous `0..J` index that all numerics use.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One individual, owned form.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    pub site_id: String,
    pub z: u8,
    pub y: f64,
    pub x: Vec<f64>,
}

/// Borrowed view of a stored record.
#[derive(Debug, Clone, Copy)]
pub struct RecordRef<'a> {
    pub site: usize,
    pub z: u8,
    pub y: f64,
    pub x: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteCovariates {
    pub site_id: String,
    pub phi_x: Vec<f64>,
}

/// Validated multisite trial data. Immutable after construction.
#[derive(Debug, Clone)]
pub struct TrialDataset {
    site_ids: Vec<String>,
    site_index: HashMap<String, usize>,
    site_covariate_names: Vec<String>,
    phi: Vec<f64>,
    covariate_names: Vec<String>,
    site: Vec<usize>,
    z: Vec<u8>,
    y: Vec<f64>,
    x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub sites: usize,
    pub records: usize,
    pub treated: usize,
    pub control: usize,
    pub individual_covariates: usize,
    pub site_covariates: usize,
}

/// Column-wise record storage used by the generator and the CSV loader.
#[derive(Debug, Clone, Default)]
pub(crate) struct RecordColumns {
    pub site: Vec<usize>,
    pub z: Vec<u8>,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
}

impl TrialDataset {
    /// Builds and validates a dataset from owned records. Site order follows
    /// `sites`.
    pub fn new(
        sites: Vec<SiteCovariates>,
        site_covariate_names: Vec<String>,
        covariate_names: Vec<String>,
        records: impl IntoIterator<Item = IndividualRecord>,
    ) -> Result<Self> {
        let (site_ids, phi) = split_site_covariates(sites, site_covariate_names.len())?;
        let site_index = index_sites(&site_ids)?;
        let k = covariate_names.len();
        let mut cols = RecordColumns::default();
        for (i, r) in records.into_iter().enumerate() {
            let Some(&s) = site_index.get(&r.site_id) else {
                return Err(Error::Validation(format!(
                    "record {} references unknown site \"{}\"",
                    i + 1,
                    r.site_id
                )));
            };
            if r.x.len() != k {
                return Err(Error::Schema(format!(
                    "record {} has {} covariates, expected {k}",
                    i + 1,
                    r.x.len()
                )));
            }
            cols.site.push(s);
            cols.z.push(r.z);
            cols.y.push(r.y);
            cols.x.extend_from_slice(&r.x);
        }
        Self::from_columns(site_ids, site_covariate_names, phi, covariate_names, cols)
    }

    pub(crate) fn from_columns(
        site_ids: Vec<String>,
        site_covariate_names: Vec<String>,
        phi: Vec<f64>,
        covariate_names: Vec<String>,
        cols: RecordColumns,
    ) -> Result<Self> {
        let site_index = index_sites(&site_ids)?;
        let ds = Self {
            site_ids,
            site_index,
            site_covariate_names,
            phi,
            covariate_names,
            site: cols.site,
            z: cols.z,
            y: cols.y,
            x: cols.x,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let j = self.site_ids.len();
        if j < 2 {
            return Err(Error::Validation(format!("need at least 2 sites, found {j}")));
        }
        let m = self.site_covariate_names.len();
        if self.phi.len() != j * m {
            return Err(Error::Schema("site covariate table is ragged".into()));
        }
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite site covariate".into()));
        }
        let mut arms = vec![[0usize; 2]; j];
        for (i, ((&s, &z), &y)) in self.site.iter().zip(&self.z).zip(&self.y).enumerate() {
            if z > 1 {
                return Err(Error::Validation(format!("record {}: z = {z} not in {{0,1}}", i + 1)));
            }
            if !y.is_finite() {
                return Err(Error::Validation(format!("record {}: y is not finite", i + 1)));
            }
            arms[s][z as usize] += 1;
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite individual covariate".into()));
        }
        for (s, counts) in arms.iter().enumerate() {
            if counts[0] == 0 {
                return Err(Error::MissingArm {
                    site: self.site_ids[s].clone(),
                    arm: "control",
                });
            }
            if counts[1] == 0 {
                return Err(Error::MissingArm {
                    site: self.site_ids[s].clone(),
                    arm: "treated",
                });
            }
        }
        Ok(())
    }

    pub fn num_sites(&self) -> usize {
        self.site_ids.len()
    }

    pub fn num_records(&self) -> usize {
        self.y.len()
    }

    pub fn site_ids(&self) -> &[String] {
        &self.site_ids
    }

    pub fn site_position(&self, site_id: &str) -> Option<usize> {
        self.site_index.get(site_id).copied()
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn site_covariate_names(&self) -> &[String] {
        &self.site_covariate_names
    }

    /// Site-level covariates Φ_X of site `j`.
    pub fn phi(&self, j: usize) -> &[f64] {
        let m = self.site_covariate_names.len();
        &self.phi[j * m..(j + 1) * m]
    }

    pub fn site_covariates(&self) -> Vec<SiteCovariates> {
        (0..self.num_sites())
            .map(|j| SiteCovariates {
                site_id: self.site_ids[j].clone(),
                phi_x: self.phi(j).to_vec(),
            })
            .collect()
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = RecordRef<'_>> + '_ {
        let k = self.covariate_names.len();
        (0..self.y.len()).map(move |i| RecordRef {
            site: self.site[i],
            z: self.z[i],
            y: self.y[i],
            x: &self.x[i * k..(i + 1) * k],
        })
    }

    pub fn summary(&self) -> DatasetSummary {
        let treated = self.z.iter().filter(|&&z| z == 1).count();
        DatasetSummary {
            sites: self.num_sites(),
            records: self.num_records(),
            treated,
            control: self.num_records() - treated,
            individual_covariates: self.covariate_names.len(),
            site_covariates: self.site_covariate_names.len(),
        }
    }

    /// Same records with every outcome mapped through `f`.
    pub fn map_outcomes(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.y.iter_mut().for_each(|y| *y = f(*y));
        out
    }

    /// Writes `site,z,y[,x..]` and `site,phi..` files.
    pub fn write_csv(&self, records_path: &Path, sites_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(records_path).map_err(|e| csv_io(records_path, e))?;
        let mut header = vec!["site".to_string(), "z".into(), "y".into()];
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_io(records_path, e))?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for r in self.records() {
            row.clear();
            row.push(self.site_ids[r.site].clone());
            row.push(r.z.to_string());
            row.push(fmt_f64(r.y));
            row.extend(r.x.iter().map(|&v| fmt_f64(v)));
            w.write_record(&row).map_err(|e| csv_io(records_path, e))?;
        }
        w.flush().map_err(|e| Error::io(records_path, e))?;

        let mut w = csv::Writer::from_path(sites_path).map_err(|e| csv_io(sites_path, e))?;
        let mut header = vec!["site".to_string()];
        header.extend(self.site_covariate_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_io(sites_path, e))?;
        for j in 0..self.num_sites() {
            row.clear();
            row.push(self.site_ids[j].clone());
            row.extend(self.phi(j).iter().map(|&v| fmt_f64(v)));
            w.write_record(&row).map_err(|e| csv_io(sites_path, e))?;
        }
        w.flush().map_err(|e| Error::io(sites_path, e))?;
        Ok(())
    }
}

/// Shortest representation that round-trips exactly.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

fn split_site_covariates(sites: Vec<SiteCovariates>, m: usize) -> Result<(Vec<String>, Vec<f64>)> {
    let mut ids = Vec::with_capacity(sites.len());
    let mut phi = Vec::with_capacity(sites.len() * m);
    for s in sites {
        if s.phi_x.len() != m {
            return Err(Error::Schema(format!(
                "site \"{}\" has {} site covariates, expected {m}",
                s.site_id,
                s.phi_x.len()
            )));
        }
        ids.push(s.site_id);
        phi.extend(s.phi_x);
    }
    Ok((ids, phi))
}

fn index_sites(site_ids: &[String]) -> Result<HashMap<String, usize>> {
    let mut index = HashMap::with_capacity(site_ids.len());
    for (j, id) in site_ids.iter().enumerate() {
        if index.insert(id.clone(), j).is_some() {
            return Err(Error::Validation(format!("duplicate site id \"{id}\"")));
        }
    }
    Ok(index)
}

/// Column names to read from the individual-level file.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub site: String,
    pub z: String,
    pub y: String,
    /// `None` takes every remaining column, in file order.
    pub covariates: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            site: "site".into(),
            z: "z".into(),
            y: "y".into(),
            covariates: None,
        }
    }
}

/// Loads and validates a trial dataset.
///
/// Without a site-covariate file the sites get no Φ_X columns and are ordered
/// by first appearance.
pub fn load_csv(path: &Path, schema: &CsvSchema, site_covariates: Option<&Path>) -> Result<TrialDataset> {
    let (sites, site_cov_names) = match site_covariates {
        Some(p) => read_site_covariates(p)?,
        None => (Vec::new(), Vec::new()),
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{}: missing column \"{name}\"", path.display())))
    };
    let site_col = col(&schema.site)?;
    let z_col = col(&schema.z)?;
    let y_col = col(&schema.y)?;
    let (cov_names, cov_cols): (Vec<String>, Vec<usize>) = match &schema.covariates {
        Some(names) => {
            let cols = names.iter().map(|n| col(n)).collect::<Result<Vec<_>>>()?;
            (names.clone(), cols)
        }
        None => headers
            .iter()
            .enumerate()
            .filter(|(i, _)| ![site_col, z_col, y_col].contains(i))
            .map(|(i, h)| (h.to_string(), i))
            .unzip(),
    };

    let mut site_ids: Vec<String> = sites.iter().map(|s| s.site_id.clone()).collect();
    let mut index = index_sites(&site_ids)?;
    let restrict = site_covariates.is_some();
    let mut cols = RecordColumns::default();

    for result in reader.records() {
        let rec = result.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            Error::Parse {
                path: path.to_path_buf(),
                line,
                message: e.to_string(),
            }
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let field = |i: usize, what: &str| -> Result<&str> {
            match rec.get(i) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(parse_err(format!("missing {what}"))),
            }
        };
        let site_id = field(site_col, "site")?;
        let z: u8 = match field(z_col, "z")? {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("z must be 0 or 1, got \"{other}\""))),
        };
        let y: f64 = field(y_col, "y")?
            .parse()
            .map_err(|_| parse_err(format!("y is not a number: \"{}\"", &rec[y_col])))?;
        if !y.is_finite() {
            return Err(parse_err("y is not finite".into()));
        }
        let s = match index.get(site_id) {
            Some(&s) => s,
            None if restrict => {
                return Err(parse_err(format!(
                    "site \"{site_id}\" is not in the site covariate file"
                )))
            }
            None => {
                site_ids.push(site_id.to_string());
                index.insert(site_id.to_string(), site_ids.len() - 1);
                site_ids.len() - 1
            }
        };
        for (&c, name) in cov_cols.iter().zip(&cov_names) {
            let v: f64 = field(c, name)?
                .parse()
                .map_err(|_| parse_err(format!("covariate {name} is not a number")))?;
            cols.x.push(v);
        }
        cols.site.push(s);
        cols.z.push(z);
        cols.y.push(y);
    }

    let m = site_cov_names.len();
    let phi = if restrict {
        sites.into_iter().flat_map(|s| s.phi_x).collect()
    } else {
        Vec::new()
    };
    debug_assert_eq!(phi.len(), site_ids.len() * m);
    TrialDataset::from_columns(site_ids, site_cov_names, phi, cov_names, cols)
}

fn read_site_covariates(path: &Path) -> Result<(Vec<SiteCovariates>, Vec<String>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::Schema(format!("{}: empty header", path.display())));
    }
    let names: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut sites = Vec::new();
    for result in reader.records() {
        let rec = result.map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != headers.len() {
            return Err(Error::Schema(format!(
                "{}, line {line}: expected {} fields, found {}",
                path.display(),
                headers.len(),
                rec.len()
            )));
        }
        let phi_x = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("site covariate is not a number: \"{v}\""),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        sites.push(SiteCovariates {
            site_id: rec[0].to_string(),
            phi_x,
        });
    }
    Ok((sites, names))
}

/// Per-arm running mean and sum of squared deviations (Welford).
#[derive(Debug, Clone, Copy, Default)]
pub struct ArmAccumulator<F> {
    pub n: usize,
    pub mean: F,
    pub ss: F,
}

impl<F: Scalar> ArmAccumulator<F> {
    pub fn new() -> Self {
        Self {
            n: 0,
            mean: F::zero(),
            ss: F::zero(),
        }
    }

    #[inline]
    pub fn push(&mut self, y: F) {
        self.n += 1;
        let delta = y - self.mean;
        self.mean += delta / F::from_count(self.n);
        self.ss += delta * (y - self.mean);
    }
}

/// Normal equations of the per-site regression of `y` on `(1, z, x)`.
#[derive(Debug, Clone)]
pub struct SiteRegression {
    p: usize,
    xtx: Vec<f64>,
    xty: Vec<f64>,
    row: Vec<f64>,
}

impl SiteRegression {
    pub fn new(num_covariates: usize) -> Self {
        let p = num_covariates + 2;
        Self {
            p,
            xtx: vec![0.0; p * p],
            xty: vec![0.0; p],
            row: vec![0.0; p],
        }
    }

    #[inline]
    pub fn push(&mut self, z: u8, y: f64, x: &[f64]) {
        let p = self.p;
        self.row[0] = 1.0;
        self.row[1] = f64::from(z);
        self.row[2..].copy_from_slice(x);
        for r in 0..p {
            let a = self.row[r];
            self.xty[r] += a * y;
            for c in 0..=r {
                self.xtx[r * p + c] += a * self.row[c];
            }
        }
    }

    /// Coefficient on `z`; `None` when the site's design is singular.
    pub fn treatment_coef(&self) -> Option<f64> {
        let p = self.p;
        let mut a = self.xtx.clone();
        for r in 0..p {
            for c in r + 1..p {
                a[r * p + c] = a[c * p + r];
            }
        }
        crate::linalg::solve_spd(&a, p, &self.xty).ok().map(|b| b[1])
    }
}

/// Covariate-adjusted ITT per site, `None` where the regression is singular.
pub fn adjusted_itt(dataset: &TrialDataset) -> Vec<Option<f64>> {
    let k = dataset.covariate_names().len();
    let mut acc = vec![SiteRegression::new(k); dataset.num_sites()];
    for r in dataset.records() {
        acc[r.site].push(r.z, r.y, r.x);
    }
    acc.iter().map(SiteRegression::treatment_coef).collect()
}

/// Per-site arm counts, means and within-arm sums of squared deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct SiteSufficientStats<F: Scalar> {
    pub site_id: String,
    pub n0: usize,
    pub n1: usize,
    pub ybar0: F,
    pub ybar1: F,
    pub ss0: F,
    pub ss1: F,
}

impl<F: Scalar> SiteSufficientStats<F> {
    pub fn from_arms(site_id: String, control: ArmAccumulator<F>, treated: ArmAccumulator<F>) -> Self {
        Self {
            site_id,
            n0: control.n,
            n1: treated.n,
            ybar0: control.mean,
            ybar1: treated.mean,
            ss0: control.ss,
            ss1: treated.ss,
        }
    }

    /// OLS ITT estimate `ȳ1 − ȳ0`.
    pub fn itt(&self) -> F {
        self.ybar1 - self.ybar0
    }

    /// Control-arm sample SD (divisor `n0 − 1`), zero when `n0 == 1`.
    pub fn control_sd(&self) -> F {
        if self.n0 < 2 {
            F::zero()
        } else {
            (self.ss0 / F::from_count(self.n0 - 1)).sqrt()
        }
    }

    pub fn cast<G: Scalar>(&self) -> SiteSufficientStats<G> {
        let c = |v: F| G::lit(v.as_f64());
        SiteSufficientStats {
            site_id: self.site_id.clone(),
            n0: self.n0,
            n1: self.n1,
            ybar0: c(self.ybar0),
            ybar1: c(self.ybar1),
            ss0: c(self.ss0),
            ss1: c(self.ss1),
        }
    }
}

/// One pass over the records with Welford updates per site and arm.
pub fn summarize_sites<F: Scalar>(dataset: &TrialDataset) -> Vec<SiteSufficientStats<F>> {
    let mut acc = vec![[ArmAccumulator::<F>::new(); 2]; dataset.num_sites()];
    for r in dataset.records() {
        acc[r.site][r.z as usize].push(F::lit(r.y));
    }
    acc.into_iter()
        .zip(dataset.site_ids())
        .map(|([c, t], id)| SiteSufficientStats::from_arms(id.clone(), c, t))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingUnit {
    /// Average within-site control-arm SD.
    pub sigma: f64,
    /// Sites with a single control observation (contributing SD 0).
    pub warnings: Vec<String>,
}

/// Average across sites of the within-site control-arm SD.
pub fn scaling_unit(dataset: &TrialDataset) -> ScalingUnit {
    let stats = summarize_sites::<f64>(dataset);
    scaling_unit_from_stats(&stats)
}

pub fn scaling_unit_from_stats<F: Scalar>(stats: &[SiteSufficientStats<F>]) -> ScalingUnit {
    let warnings = stats
        .iter()
        .filter(|s| s.n0 < 2)
        .map(|s| format!("site \"{}\" has one control record; its SD counts as 0", s.site_id))
        .collect();
    let sigma = stats.iter().map(|s| s.control_sd().as_f64()).sum::<f64>() / stats.len().max(1) as f64;
    ScalingUnit { sigma, warnings }
}
