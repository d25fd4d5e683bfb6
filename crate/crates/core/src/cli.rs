//! Command-line surface: simulate, fit, predict, score, diagnose.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::diagnostics::{diagnostics, Diagnostics};
use crate::dist::FamilyTag;
use crate::error::{Error, Result};
use crate::graph::IcarField;
use crate::hazard::hazard_surface;
use crate::io::{
    chain_csv, chain_file, ensure_dir, inventory_csv, load_dataset, load_samples, read_inventory, to_toml, toml_float,
    write_file, ChainRecord, Dataset, FitMetadata, RunConfig, CONFIG_VERSION, METADATA_FILE,
};
use crate::mcmc::{run_chain, PosteriorSamples};
use crate::model::{param_names, simulate_inventory_with, LatentState, SplitExtras};
use crate::rng::{substream, substream_seed};
use crate::scoring::{qq_csv, qq_points, score_models};

/// Environment variable giving the default worker-thread count.
pub const THREADS_ENV: &str = "HAZMARK_THREADS";

#[derive(Debug, Parser)]
#[command(name = "hazmark", version, about = "Joint count-size hazard modelling on slope-unit graphs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (overrides the HAZMARK_THREADS environment variable).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides the configured one).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a synthetic inventory from the configured true parameters.
    Simulate,
    /// Fit every configured size family.
    Fit,
    /// Hazard surfaces from fitted samples.
    Predict,
    /// Score fitted families on held-out data.
    Score,
    /// Convergence diagnostics, trace and QQ data.
    Diagnose,
}

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Ingestion { .. } => 2,
        Error::Convergence(_) => 3,
        Error::Io { .. } => 4,
        _ => 1,
    }
}

/// Thread count from the flag, else the environment, else `None`.
pub fn thread_count(flag: Option<usize>, env: Option<&str>) -> Result<Option<usize>> {
    if let Some(n) = flag {
        return Ok(Some(n));
    }
    match env.map(str::trim).filter(|s| !s.is_empty()) {
        Some(s) => s
            .parse::<usize>()
            .map(Some)
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a thread count, got `{s}`"))),
        None => Ok(None),
    }
}

/// Resolved command context.
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Context {
    pub fn new(common: &CommonArgs) -> Result<Self> {
        let path = common
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
        let mut config = RunConfig::load(path)?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let out = match &common.out {
            Some(o) => o.clone(),
            None => config.resolve(&config.output.dir),
        };
        Ok(Self { config, out })
    }

    fn sim_dir(&self) -> PathBuf {
        self.out.join("sim")
    }

    fn fit_dir(&self, family: FamilyTag) -> PathBuf {
        self.out.join("fit").join(family.short())
    }

    fn dataset(&self, inventory: Option<&Path>) -> Result<Dataset> {
        let d = &self.config.data;
        load_dataset(
            &self.config.resolve(&d.adjacency),
            &self.config.resolve(&d.covariates),
            inventory,
            d.standardize,
            d.offset_column.as_deref(),
        )
    }

    fn training_inventory_path(&self) -> PathBuf {
        match &self.config.data.inventory {
            Some(p) => self.config.resolve(p),
            None => self.sim_dir().join("inventory.csv"),
        }
    }

    fn held_out_path(&self) -> PathBuf {
        if let Some(p) = &self.config.data.held_out {
            return self.config.resolve(p);
        }
        let sim = self.sim_dir().join("heldout.csv");
        if self.config.data.inventory.is_none() && sim.exists() {
            sim
        } else {
            self.training_inventory_path()
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let env = std::env::var(THREADS_ENV).ok();
    let threads = thread_count(cli.common.threads, env.as_deref())?;
    let ctx = Context::new(&cli.common)?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Simulate => cmd_simulate(&ctx),
        Command::Fit => cmd_fit(&ctx),
        Command::Predict => cmd_predict(&ctx),
        Command::Score => cmd_score(&ctx),
        Command::Diagnose => cmd_diagnose(&ctx),
    })
}

// ---------------------------------------------------------------------------
// simulate
// ---------------------------------------------------------------------------

pub fn cmd_simulate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let sim = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [simulate] section".into()))?;
    let data = ctx.dataset(None)?;
    let (n, p) = (data.graph.n(), data.covariates.p());
    let family: FamilyTag = sim.family.parse()?;
    let mut model = crate::model::ModelConfig::new(family, sim.structure.parse()?);
    model.threshold = sim.threshold;
    if family == FamilyTag::Split && sim.threshold.is_none() {
        return Err(Error::Config("split truth needs simulate.threshold".into()));
    }
    for (name, v) in [("beta_count", &sim.beta_count), ("beta_size", &sim.beta_size)] {
        if v.len() != p {
            return Err(Error::Config(format!(
                "simulate.{name} has {} entries; the design has {p} columns (intercept + covariates)",
                v.len()
            )));
        }
    }
    let mut truth = LatentState::zeros(&model, n, p);
    truth.beta_count = sim.beta_count.clone();
    truth.beta_size = sim.beta_size.clone();
    truth.gamma = sim.gamma;
    truth.xi = sim.xi;
    if family == FamilyTag::Egp {
        truth.kappa = Some(sim.kappa.ok_or_else(|| Error::Config("egp truth needs simulate.kappa".into()))?);
    }
    if family == FamilyTag::Split {
        let need = |v: Option<f64>, k: &str| v.ok_or_else(|| Error::Config(format!("split truth needs simulate.{k}")));
        truth.split = Some(SplitExtras {
            bulk_shape: need(sim.bulk_shape, "bulk_shape")?,
            bulk_rate: need(sim.bulk_rate, "bulk_rate")?,
            tail_weight: need(sim.tail_weight, "tail_weight")?,
        });
    }
    if !truth.size_globals(&model).is_valid() {
        return Err(Error::Config("simulate: true size parameters are out of domain".into()));
    }
    if let Some(f) = truth.w1.as_mut() {
        *f = IcarField {
            w: data.graph.simulate_icar_with(sim.tau1, &mut substream(cfg.seed, "sim-w1"))?,
            tau: sim.tau1,
        };
    }
    if let Some(f) = truth.w2.as_mut() {
        *f = IcarField {
            w: data.graph.simulate_icar_with(sim.tau2, &mut substream(cfg.seed, "sim-w2"))?,
            tau: sim.tau2,
        };
    }
    let x = &data.covariates;
    let train = simulate_inventory_with(&truth, &data.graph, x, &model, &mut substream(cfg.seed, "sim-inventory"))?;
    let held = simulate_inventory_with(&truth, &data.graph, x, &model, &mut substream(cfg.seed, "sim-heldout"))?;

    let dir = ctx.sim_dir();
    ensure_dir(&dir)?;
    let labels = data.graph.labels();
    copy_file(&cfg.resolve(&cfg.data.adjacency), &dir.join("adjacency.txt"))?;
    copy_file(&cfg.resolve(&cfg.data.covariates), &dir.join("covariates.csv"))?;
    write_file(&dir.join("inventory.csv"), inventory_csv(&train, labels))?;
    write_file(&dir.join("heldout.csv"), inventory_csv(&held, labels))?;

    let mut side = String::new();
    let _ = writeln!(side, "config_version = {CONFIG_VERSION}");
    let _ = writeln!(side, "seed = {}", cfg.seed);
    let _ = writeln!(side, "family = \"{}\"", family.short());
    let _ = writeln!(side, "structure = \"{}\"", model.structure.label());
    if let Some(u) = model.threshold {
        let _ = writeln!(side, "threshold = {}", toml_float(u));
    }
    let _ = writeln!(side, "events = {}", train.total_count());
    let _ = writeln!(side, "held_out_events = {}", held.total_count());
    let _ = writeln!(side, "\n[parameters]");
    for (name, v) in param_names(&model, n, p).iter().zip(truth.to_flat()) {
        let _ = writeln!(side, "\"{name}\" = {}", toml_float(v));
    }
    write_file(&dir.join("truth.toml"), side)?;
    println!(
        "simulate: {} units, {} events ({} held out) -> {}",
        n,
        train.total_count(),
        held.total_count(),
        dir.display()
    );
    Ok(())
}

fn copy_file(from: &Path, to: &Path) -> Result<()> {
    let bytes = fs::read(from).map_err(|e| Error::io(from, e))?;
    write_file(to, bytes)
}

// ---------------------------------------------------------------------------
// fit
// ---------------------------------------------------------------------------

pub fn diagnostics_csv(d: &Diagnostics) -> String {
    let mut out = String::from("parameter,mean,sd,rhat,ess,mcse,degenerate\n");
    for p in &d.params {
        let rhat = p.rhat.map_or_else(String::new, |r| r.to_string());
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            p.name, p.mean, p.sd, rhat, p.ess, p.mcse, p.degenerate
        );
    }
    out
}

fn adaptation_csv(samples: &PosteriorSamples) -> String {
    let mut out = String::from("chain,iteration,block,scale\n");
    for c in &samples.chains {
        for e in &c.adaptation {
            let _ = writeln!(out, "{},{},{},{}", c.chain, e.iteration, e.block, e.scale);
        }
    }
    out
}

pub fn cmd_fit(ctx: &Context) -> Result<()> {
    let cfg = &ctx.config;
    let inv_path = ctx.training_inventory_path();
    let data = ctx.dataset(Some(&inv_path))?;
    let inventory = data.inventory.as_ref().expect("inventory requested");
    let mut failures = Vec::new();
    for family in cfg.families()? {
        let mut model = cfg.model_config(family)?;
        model.resolve_threshold(inventory)?;
        let sampler = cfg
            .sampler
            .to_sampler(substream_seed(cfg.seed, &format!("fit-{}", family.short())));
        let md = crate::mcmc::ModelData::new(inventory, &data.graph, &data.covariates, &model)?;
        let samples = run_chain(&md, &sampler)?;

        let dir = ctx.fit_dir(family);
        ensure_dir(&dir)?;
        for c in &samples.chains {
            write_file(&chain_file(&dir, c.chain), chain_csv(&samples.names, &c.draws))?;
        }
        write_file(&dir.join("adaptation.csv"), adaptation_csv(&samples))?;

        let diag = diagnostics(&samples);
        let (max_rhat, min_ess, gate_passed) = match &diag {
            Ok(d) => {
                write_file(&dir.join("diagnostics.csv"), diagnostics_csv(d))?;
                let r = d.max_rhat();
                (r, Some(d.min_ess()), r.is_none_or(|r| r <= cfg.sampler.rhat_gate))
            }
            Err(_) => (None, None, false),
        };
        let meta = FitMetadata {
            config_version: CONFIG_VERSION,
            family: family.short().to_string(),
            structure: model.structure.label().to_string(),
            threshold: model.threshold,
            threshold_quantile: model.threshold_quantile,
            seed: sampler.seed,
            deterministic: cfg.deterministic,
            n_units: data.graph.n(),
            n_iter: sampler.n_iter,
            burn_in: sampler.burn_in,
            thin: sampler.thin,
            n_chains: sampler.n_chains,
            rhat_gate: cfg.sampler.rhat_gate,
            max_rhat,
            min_ess,
            gate_passed,
            covariate_names: data.covariates.names()[1..].to_vec(),
            covariate_means: data.covariates.means()[1..].to_vec(),
            covariate_scales: data.covariates.scales()[1..].to_vec(),
            offset_column: cfg.data.offset_column.clone(),
            adjacency_weights: "binary".into(),
            shared_field_owner: "count".into(),
            priors: model.priors.clone(),
            chains: samples
                .chains
                .iter()
                .map(|c| ChainRecord {
                    chain: c.chain,
                    seed: c.seed,
                    draws: c.draws.len(),
                    acceptance: c.acceptance.iter().cloned().collect(),
                })
                .collect(),
        };
        write_file(&dir.join(METADATA_FILE), to_toml(&meta)?)?;

        match (&diag, max_rhat) {
            (Err(e), _) => {
                println!("fit {}: {e}", family.short());
                failures.push(format!("{}: {e}", family.short()));
            }
            (Ok(d), _) if d.n_chains < 2 => {
                println!("fit {}: single chain, R-hat gate not evaluated", family.short());
            }
            (Ok(_), Some(r)) => {
                println!("fit {}: max R-hat {r:.4} (gate {})", family.short(), cfg.sampler.rhat_gate);
                if !gate_passed {
                    failures.push(format!("{}: max R-hat {r:.4} > {}", family.short(), cfg.sampler.rhat_gate));
                }
            }
            (Ok(_), None) => {}
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Convergence(failures.join("; ")))
    }
}

// ---------------------------------------------------------------------------
// predict / score / diagnose
// ---------------------------------------------------------------------------

fn load_fit(ctx: &Context, family: FamilyTag) -> Result<(FitMetadata, PosteriorSamples)> {
    let dir = ctx.fit_dir(family);
    if !dir.join(METADATA_FILE).exists() {
        return Err(Error::io(
            dir.join(METADATA_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no fitted samples; run `fit` first"),
        ));
    }
    load_samples(&dir)
}

fn check_units(samples: &PosteriorSamples, data: &Dataset) -> Result<()> {
    if samples.n_units != data.graph.n() || samples.p != data.covariates.p() {
        return Err(Error::Contract(format!(
            "samples were fitted on {} units x {} columns; the data has {} x {}",
            samples.n_units,
            samples.p,
            data.graph.n(),
            data.covariates.p()
        )));
    }
    Ok(())
}

pub fn cmd_predict(ctx: &Context) -> Result<()> {
    let data = ctx.dataset(None)?;
    for family in ctx.config.families()? {
        let (_, samples) = load_fit(ctx, family)?;
        check_units(&samples, &data)?;
        let dir = ctx.out.join("predict").join(family.short());
        ensure_dir(&dir)?;
        for (k, &s) in ctx.config.hazard.thresholds.iter().enumerate() {
            let surface = hazard_surface(&samples, &data.covariates, s)?;
            write_file(
                &dir.join(format!("hazard_{k}.csv")),
                surface.to_csv(Some(data.graph.labels())),
            )?;
        }
        let mut meta = String::new();
        let _ = writeln!(meta, "family = \"{}\"", samples.config.family.label());
        let _ = writeln!(meta, "hazard = \"poisson-thinning\"");
        let _ = writeln!(meta, "definition = \"1 - exp(-lambda * (1 - F(s)))\"");
        let _ = writeln!(meta, "period = \"per-trigger\"");
        let _ = writeln!(meta, "draws = {}", samples.total_draws());
        let list: Vec<String> = ctx.config.hazard.thresholds.iter().map(|&t| toml_float(t)).collect();
        let _ = writeln!(meta, "thresholds = [{}]", list.join(", "));
        write_file(&dir.join("metadata.toml"), meta)?;
        println!(
            "predict {}: {} threshold(s) -> {}",
            family.short(),
            ctx.config.hazard.thresholds.len(),
            dir.display()
        );
    }
    Ok(())
}

pub fn cmd_score(ctx: &Context) -> Result<()> {
    let data = ctx.dataset(None)?;
    let held_path = ctx.held_out_path();
    let held = read_inventory(&held_path, data.graph.labels())?;
    let mut fits = Vec::new();
    for family in ctx.config.families()? {
        let (_, samples) = load_fit(ctx, family)?;
        check_units(&samples, &data)?;
        fits.push((family.short().to_string(), samples));
    }
    let models: Vec<(String, &PosteriorSamples)> = fits.iter().map(|(n, s)| (n.clone(), s)).collect();
    let settings = ctx.config.score.to_settings(substream_seed(ctx.config.seed, "score"));
    let report = score_models(&held, &models, &data.covariates, &settings)?;
    let dir = ctx.out.join("score");
    write_file(&dir.join("report.txt"), report.to_text())?;
    write_file(&dir.join("report.csv"), report.to_csv())?;
    for m in &report.models {
        write_file(&dir.join(format!("qq_{}.csv", m.model)), qq_csv(&m.qq))?;
    }
    print!("{}", report.to_text());
    Ok(())
}

/// Trace columns: everything except the latent field values.
fn trace_csv(samples: &PosteriorSamples) -> String {
    let cols: Vec<usize> = samples
        .names
        .iter()
        .enumerate()
        .filter(|(_, n)| !n.starts_with("w1[") && !n.starts_with("w2["))
        .map(|(i, _)| i)
        .collect();
    let mut out = String::from("chain,draw");
    for &c in &cols {
        let _ = write!(out, ",{}", samples.names[c]);
    }
    out.push('\n');
    for ch in &samples.chains {
        for (k, d) in ch.draws.iter().enumerate() {
            let _ = write!(out, "{},{k}", ch.chain);
            for &c in &cols {
                let _ = write!(out, ",{}", d[c]);
            }
            out.push('\n');
        }
    }
    out
}

pub fn cmd_diagnose(ctx: &Context) -> Result<()> {
    let inv_path = ctx.training_inventory_path();
    let data = ctx.dataset(Some(&inv_path))?;
    let inventory = data.inventory.as_ref().expect("inventory requested");
    let settings = ctx.config.score.to_settings(substream_seed(ctx.config.seed, "diagnose"));
    for family in ctx.config.families()? {
        let (_, samples) = load_fit(ctx, family)?;
        check_units(&samples, &data)?;
        let d = diagnostics(&samples)?;
        let dir = ctx.out.join("diagnose").join(family.short());
        write_file(&dir.join("diagnostics.csv"), diagnostics_csv(&d))?;
        write_file(&dir.join("trace.csv"), trace_csv(&samples))?;
        let mut acc = String::from("block,acceptance\n");
        for (b, r) in &d.acceptance {
            let _ = writeln!(acc, "{b},{r}");
        }
        write_file(&dir.join("acceptance.csv"), acc)?;
        if inventory.total_count() > 0 {
            write_file(
                &dir.join("qq.csv"),
                qq_csv(&qq_points(inventory, &samples, &data.covariates, &settings)?),
            )?;
        }
        match (&d.notice, d.max_rhat()) {
            (Some(n), _) => println!("diagnose {}: {n}", family.short()),
            (None, Some(r)) => println!(
                "diagnose {}: max R-hat {r:.4}, min ESS {:.1}",
                family.short(),
                d.min_ess()
            ),
            (None, None) => {}
        }
    }
    Ok(())
}
