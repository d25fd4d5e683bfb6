//! Run configuration, data ingestion and the on-disk sample format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::covariates::CovariateMatrix;
use crate::dist::FamilyTag;
use crate::error::{Error, Result};
use crate::graph::SlopeUnitGraph;
use crate::mcmc::{ChainSamples, PosteriorSamples, SamplerConfig};
use crate::model::{param_names, Inventory, ModelConfig, Priors, Structure};
use crate::scoring::ScoreSettings;

pub const CONFIG_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Recorded in metadata; every code path is deterministic regardless.
    #[serde(default = "yes")]
    pub deterministic: bool,
    pub data: DataSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub hazard: HazardSection,
    #[serde(default)]
    pub score: ScoreSection,
    pub simulate: Option<SimulateSection>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_seed() -> u64 {
    1
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub adjacency: PathBuf,
    pub covariates: PathBuf,
    /// Training inventory; defaults to the simulated one under the output
    /// directory.
    pub inventory: Option<PathBuf>,
    /// Held-out inventory for scoring; defaults to the simulated held-out
    /// replicate, then to the training inventory.
    pub held_out: Option<PathBuf>,
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Covariate column holding unit exposure (e.g. area); its log enters
    /// the count predictor as an offset instead of as a covariate.
    pub offset_column: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub families: Vec<String>,
    pub structure: String,
    pub threshold_quantile: f64,
    pub threshold: Option<f64>,
    pub priors: Priors,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            families: vec!["egp".into(), "gp".into(), "split".into()],
            structure: "shared_plus".into(),
            threshold_quantile: 0.9,
            threshold: None,
            priors: Priors::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub adapt_window: usize,
    pub target_accept_single: f64,
    pub target_accept_block: f64,
    pub step_field: f64,
    pub step_beta: f64,
    pub step_globals: f64,
    pub init_jitter: f64,
    /// Fits with any R-hat above this value fail the convergence gate.
    pub rhat_gate: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            n_iter: d.n_iter,
            burn_in: d.burn_in,
            thin: d.thin,
            n_chains: d.n_chains,
            adapt_window: d.adapt_window,
            target_accept_single: d.target_accept_single,
            target_accept_block: d.target_accept_block,
            step_field: d.step_field,
            step_beta: d.step_beta,
            step_globals: d.step_globals,
            init_jitter: d.init_jitter,
            rhat_gate: 1.1,
        }
    }
}

impl SamplerSection {
    pub fn to_sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_iter: self.n_iter,
            burn_in: self.burn_in,
            thin: self.thin,
            n_chains: self.n_chains,
            seed,
            adapt_window: self.adapt_window,
            target_accept_single: self.target_accept_single,
            target_accept_block: self.target_accept_block,
            step_field: self.step_field,
            step_beta: self.step_beta,
            step_globals: self.step_globals,
            init_jitter: self.init_jitter,
            fixed_fields: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HazardSection {
    /// Evaluation sizes `s`, one hazard file each.
    pub thresholds: Vec<f64>,
}

impl Default for HazardSection {
    fn default() -> Self {
        Self { thresholds: vec![0.0] }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    pub quantiles: Vec<f64>,
    pub predictive_draws: usize,
    pub max_posterior_draws: usize,
    pub qq_pool: usize,
}

impl Default for ScoreSection {
    fn default() -> Self {
        let d = ScoreSettings::default();
        Self {
            quantiles: d.quantiles,
            predictive_draws: d.predictive_draws,
            max_posterior_draws: d.max_posterior_draws,
            qq_pool: d.qq_pool,
        }
    }
}

impl ScoreSection {
    pub fn to_settings(&self, seed: u64) -> ScoreSettings {
        ScoreSettings {
            quantiles: self.quantiles.clone(),
            predictive_draws: self.predictive_draws,
            max_posterior_draws: self.max_posterior_draws,
            qq_pool: self.qq_pool,
            seed,
        }
    }
}

/// True parameters for synthetic data.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    pub family: String,
    pub structure: String,
    pub beta_count: Vec<f64>,
    pub beta_size: Vec<f64>,
    #[serde(default)]
    pub gamma: f64,
    pub xi: f64,
    pub kappa: Option<f64>,
    #[serde(default = "default_tau")]
    pub tau1: f64,
    #[serde(default = "default_tau")]
    pub tau2: f64,
    pub bulk_shape: Option<f64>,
    pub bulk_rate: Option<f64>,
    pub tail_weight: Option<f64>,
    /// Split threshold of the truth (required for the split family).
    pub threshold: Option<f64>,
}

fn default_tau() -> f64 {
    4.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config_version {} (expected {CONFIG_VERSION})",
                self.config_version
            )));
        }
        if let Some(t) = self.hazard.thresholds.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("hazard threshold {t} must be finite and >= 0")));
        }
        if self.model.families.is_empty() {
            return Err(Error::Config("model.families is empty".into()));
        }
        let mut seen = Vec::new();
        for f in self.families()? {
            if seen.contains(&f) {
                return Err(Error::Config(format!("family `{f}` listed twice")));
            }
            seen.push(f);
        }
        self.structure()?;
        if !(self.model.threshold_quantile > 0.0 && self.model.threshold_quantile < 1.0) {
            return Err(Error::Config("model.threshold_quantile must lie in (0, 1)".into()));
        }
        if !(self.sampler.rhat_gate >= 1.0) {
            return Err(Error::Config("sampler.rhat_gate must be >= 1".into()));
        }
        self.sampler.to_sampler(self.seed).validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn families(&self) -> Result<Vec<FamilyTag>> {
        self.model.families.iter().map(|f| f.parse()).collect()
    }

    pub fn structure(&self) -> Result<Structure> {
        self.model.structure.parse()
    }

    /// Model configuration for one family (threshold not yet resolved
    /// unless fixed in the config).
    pub fn model_config(&self, family: FamilyTag) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(family, self.structure()?);
        m.priors = self.model.priors.clone();
        m.threshold_quantile = self.model.threshold_quantile;
        if family == FamilyTag::Split {
            m.threshold = self.model.threshold;
        }
        Ok(m)
    }
}

// ---------------------------------------------------------------------------
// Data ingestion
// ---------------------------------------------------------------------------

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn file_label(path: &Path) -> String {
    path.display().to_string()
}

/// Parses an edge list: one `i j` pair of zero-based indices per line,
/// `#` starts a comment.
pub fn parse_adjacency(text: &str, file: &str, n: usize) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(Error::ingestion(
                file,
                line_no,
                "edge",
                format!("expected two unit indices, found {} tokens", tokens.len()),
            ));
        }
        let mut ends = [0usize; 2];
        for (slot, (tok, field)) in ends.iter_mut().zip(tokens.iter().zip(["i", "j"])) {
            *slot = tok
                .parse::<usize>()
                .map_err(|_| Error::ingestion(file, line_no, field, format!("`{tok}` is not a unit index")))?;
            if *slot >= n {
                return Err(Error::ingestion(
                    file,
                    line_no,
                    field,
                    format!("unit index {slot} out of range for {n} units"),
                ));
            }
        }
        if ends[0] == ends[1] {
            return Err(Error::ingestion(file, line_no, "edge", format!("self-loop on unit {}", ends[0])));
        }
        edges.push((ends[0], ends[1]));
    }
    Ok(edges)
}

/// Parses a covariate table: header row, unit id first, numeric columns
/// after. Returns the unit labels in row order and the design matrix.
pub fn parse_covariates(text: &str, file: &str, standardize: bool) -> Result<(Vec<String>, CovariateMatrix<f64>)> {
    parse_covariates_with_offset(text, file, standardize, None)
}

/// As [`parse_covariates`], optionally taking column `offset` out of the
/// design as a log-exposure offset (values must be positive).
pub fn parse_covariates_with_offset(
    text: &str,
    file: &str,
    standardize: bool,
    offset: Option<&str>,
) -> Result<(Vec<String>, CovariateMatrix<f64>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::ingestion(file, 1, "header", e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::ingestion(file, 1, "header", "missing header row"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    for (k, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::ingestion(file, 1, format!("column {}", k + 2), "empty column name"));
        }
        if names[..k].contains(name) {
            return Err(Error::ingestion(file, 1, name.clone(), "duplicate column name"));
        }
    }
    let mut labels: Vec<String> = Vec::new();
    let mut seen = std::collections::HashMap::new();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); names.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::ingestion(file, line, "record", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != header.len() {
            return Err(Error::ingestion(
                file,
                line,
                "record",
                format!("expected {} fields, found {}", header.len(), rec.len()),
            ));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(Error::ingestion(file, line, header[0].to_string(), "empty unit id"));
        }
        if let Some(first) = seen.insert(id.clone(), line) {
            return Err(Error::ingestion(
                file,
                line,
                header[0].to_string(),
                format!("duplicate unit id `{id}` (first on line {first})"),
            ));
        }
        labels.push(id);
        for (k, (col, name)) in columns.iter_mut().zip(&names).enumerate() {
            let raw = &rec[k + 1];
            let v: f64 = raw
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| Error::ingestion(file, line, name.clone(), format!("`{raw}` is not a finite number")))?;
            col.push(v);
        }
    }
    if labels.is_empty() {
        return Err(Error::ingestion(file, 2, "record", "no unit rows"));
    }
    let n = labels.len();
    let mut names = names;
    let mut offset_values = None;
    if let Some(name) = offset {
        let k = names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::ingestion(file, 1, name.to_string(), "offset column not found"))?;
        let col = columns.remove(k);
        names.remove(k);
        if let Some(row) = col.iter().position(|&v| !(v > 0.0)) {
            return Err(Error::ingestion(file, row + 2, name.to_string(), "offset values must be > 0"));
        }
        offset_values = Some(col.into_iter().map(f64::ln).collect::<Vec<_>>());
    }
    if standardize {
        for (col, name) in columns.iter().zip(&names) {
            if col.iter().all(|&v| v == col[0]) {
                return Err(Error::ingestion(file, 1, name.clone(), "zero variance: cannot standardize"));
            }
        }
    }
    let mut x = CovariateMatrix::from_columns(n, names.into_iter().zip(columns).collect(), standardize)?;
    if let Some(o) = offset_values {
        x = x.with_offset(o)?;
    }
    Ok((labels, x))
}

/// Parses an event inventory (`unit_id,size`, one row per event) into
/// per-unit sizes ordered like `labels`.
pub fn parse_inventory(text: &str, file: &str, labels: &[String]) -> Result<Inventory<f64>> {
    let index: std::collections::HashMap<&str, usize> =
        labels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::ingestion(file, 1, "header", e.to_string()))?
        .clone();
    if header.len() != 2 || &header[0] != "unit_id" || &header[1] != "size" {
        return Err(Error::ingestion(file, 1, "header", "expected header `unit_id,size`"));
    }
    let mut sizes = vec![Vec::new(); labels.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::ingestion(file, line, "record", e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 2 {
            return Err(Error::ingestion(
                file,
                line,
                "record",
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let unit = *index
            .get(&rec[0])
            .ok_or_else(|| Error::ingestion(file, line, "unit_id", format!("unknown unit id `{}`", &rec[0])))?;
        let size: f64 = rec[1]
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite() && *v > 0.0)
            .ok_or_else(|| Error::ingestion(file, line, "size", format!("`{}` is not a positive finite size", &rec[1])))?;
        sizes[unit].push(size);
    }
    Inventory::new(sizes)
}

pub struct Dataset {
    pub graph: SlopeUnitGraph,
    pub covariates: CovariateMatrix<f64>,
    pub inventory: Option<Inventory<f64>>,
}

/// Loads and cross-validates the graph, covariates and (optionally) an
/// inventory. Unit labels come from the covariate table's first column.
pub fn load_dataset(
    adjacency: &Path,
    covariates: &Path,
    inventory: Option<&Path>,
    standardize: bool,
    offset_column: Option<&str>,
) -> Result<Dataset> {
    let cov_text = read_text(covariates)?;
    let adj_text = read_text(adjacency)?;
    let inv_text = inventory.map(read_text).transpose()?;
    let (labels, x) = parse_covariates_with_offset(&cov_text, &file_label(covariates), standardize, offset_column)?;
    let edges = parse_adjacency(&adj_text, &file_label(adjacency), labels.len())?;
    let inv = match (inventory, inv_text) {
        (Some(p), Some(t)) => Some(parse_inventory(&t, &file_label(p), &labels)?),
        _ => None,
    };
    let graph = SlopeUnitGraph::build_labelled(&edges, labels)?;
    Ok(Dataset {
        graph,
        covariates: x,
        inventory: inv,
    })
}

pub fn read_inventory(path: &Path, labels: &[String]) -> Result<Inventory<f64>> {
    parse_inventory(&read_text(path)?, &file_label(path), labels)
}

pub fn inventory_csv(inv: &Inventory<f64>, labels: &[String]) -> String {
    let mut out = String::from("unit_id,size\n");
    for (i, label) in labels.iter().enumerate() {
        for a in inv.sizes(i) {
            let _ = writeln!(out, "{label},{a}");
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Output helpers
// ---------------------------------------------------------------------------

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// TOML float literal that round-trips exactly.
pub fn toml_float(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:?}")
    }
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Config(format!("cannot serialize metadata: {e}")))
}

// ---------------------------------------------------------------------------
// Samples on disk
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub chain: usize,
    pub seed: u64,
    pub draws: usize,
    pub acceptance: BTreeMap<String, f64>,
}

/// Metadata sidecar written next to the per-chain sample files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub config_version: u32,
    pub family: String,
    pub structure: String,
    pub threshold: Option<f64>,
    pub threshold_quantile: f64,
    pub seed: u64,
    pub deterministic: bool,
    pub n_units: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub rhat_gate: f64,
    pub max_rhat: Option<f64>,
    pub min_ess: Option<f64>,
    pub gate_passed: bool,
    pub covariate_names: Vec<String>,
    pub covariate_means: Vec<f64>,
    pub covariate_scales: Vec<f64>,
    pub offset_column: Option<String>,
    /// Modelling conventions, recorded for downstream readers.
    pub adjacency_weights: String,
    pub shared_field_owner: String,
    pub priors: Priors,
    pub chains: Vec<ChainRecord>,
}

impl FitMetadata {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut m = ModelConfig::new(self.family.parse()?, self.structure.parse()?);
        m.priors = self.priors.clone();
        m.threshold = self.threshold;
        m.threshold_quantile = self.threshold_quantile;
        Ok(m)
    }
}

pub fn chain_file(dir: &Path, chain: usize) -> PathBuf {
    dir.join(format!("chain_{chain}.csv"))
}

pub fn chain_csv(names: &[String], draws: &[Vec<f64>]) -> String {
    let mut out = names.join(",");
    out.push('\n');
    for d in draws {
        let row: Vec<String> = d.iter().map(|v| v.to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn parse_chain_csv(text: &str, file: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let names: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::ingestion(file, 1, "header", "empty sample file"))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut draws = Vec::new();
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .zip(&names)
            .map(|(v, name)| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::ingestion(file, k + 2, name.clone(), format!("`{v}` is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != names.len() || line.split(',').count() != names.len() {
            return Err(Error::ingestion(file, k + 2, "record", "wrong number of fields"));
        }
        draws.push(row);
    }
    Ok((names, draws))
}

pub const METADATA_FILE: &str = "metadata.toml";

/// Reads a fit directory back into posterior samples.
pub fn load_samples(dir: &Path) -> Result<(FitMetadata, PosteriorSamples)> {
    let meta_path = dir.join(METADATA_FILE);
    let meta: FitMetadata = toml::from_str(&read_text(&meta_path)?)
        .map_err(|e| Error::ingestion(file_label(&meta_path), 0, "metadata", e.message().to_string()))?;
    let config = meta.model_config()?;
    let p = meta.covariate_names.len() + 1;
    let names = param_names(&config, meta.n_units, p);
    let mut chains = Vec::with_capacity(meta.chains.len());
    for rec in &meta.chains {
        let path = chain_file(dir, rec.chain);
        let (header, draws) = parse_chain_csv(&read_text(&path)?, &file_label(&path))?;
        if header != names {
            return Err(Error::ingestion(
                file_label(&path),
                1,
                "header",
                "columns do not match the model recorded in the metadata",
            ));
        }
        chains.push(ChainSamples {
            chain: rec.chain,
            seed: rec.seed,
            draws,
            acceptance: rec.acceptance.iter().map(|(k, v)| (k.clone(), *v)).collect(),
            adaptation: Vec::new(),
        });
    }
    if chains.is_empty() {
        return Err(Error::EmptySamples(format!("{} lists no chains", meta_path.display())));
    }
    Ok((
        meta.clone(),
        PosteriorSamples {
            names,
            config,
            n_units: meta.n_units,
            p,
            chains,
        },
    ))
}
