//! Adaptive Metropolis-within-Gibbs sampler for the joint model.
//!
//! One sweep:
//! 1. single-site random-walk updates of every non-isolated `w1_i` (and
//!    `w2_i`), accepted on the local posterior ratio;
//! 2. per-component re-centering of each field, with the removed mean moved
//!    into the matching intercept(s);
//! 3. block random-walk updates of `beta_count`, `beta_size` and the global
//!    size block on unconstrained scales (Jacobians included);
//! 4. conjugate Gamma draws of the field precisions.
//!
//! Step sizes adapt only during burn-in, at `adapt_window` boundaries.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;

use crate::covariates::CovariateMatrix;
use crate::dist::FamilyTag;
use crate::error::{Error, Result};
use crate::graph::{SlopeUnitGraph, NULL_EIGEN_TOL};
use crate::model::{
    count_eta, logposterior, logprior, logprior_globals, loglik, normal_logpdf, param_names, size_eta, Inventory,
    LatentState, ModelConfig, Priors, SplitExtras,
};
use crate::rng::{substream, substream_seed};
use crate::special::{gamma_logpdf, ln_gamma};

pub const SCALE_MIN: f64 = 1e-8;
pub const SCALE_MAX: f64 = 1e8;

/// Borrowed data and configuration of one fit.
#[derive(Debug, Clone, Copy)]
pub struct ModelData<'a> {
    pub inventory: &'a Inventory<f64>,
    pub graph: &'a SlopeUnitGraph,
    pub covariates: &'a CovariateMatrix<f64>,
    pub config: &'a ModelConfig,
}

impl<'a> ModelData<'a> {
    pub fn new(
        inventory: &'a Inventory<f64>,
        graph: &'a SlopeUnitGraph,
        covariates: &'a CovariateMatrix<f64>,
        config: &'a ModelConfig,
    ) -> Result<Self> {
        let n = graph.n();
        if inventory.n_units() != n || covariates.n() != n {
            return Err(Error::Contract(format!(
                "unit counts disagree: graph {n}, covariates {}, inventory {}",
                covariates.n(),
                inventory.n_units()
            )));
        }
        if config.family == FamilyTag::Split && config.threshold.is_none() {
            return Err(Error::Config("split threshold must be resolved before sampling".into()));
        }
        Ok(Self {
            inventory,
            graph,
            covariates,
            config,
        })
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn p(&self) -> usize {
        self.covariates.p()
    }

    pub fn logposterior(&self, state: &LatentState<f64>) -> f64 {
        logposterior(self.inventory, state, self.graph, self.covariates, self.config)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub adapt_window: usize,
    pub target_accept_single: f64,
    pub target_accept_block: f64,
    pub step_field: f64,
    pub step_beta: f64,
    pub step_globals: f64,
    /// Standard deviation of the per-chain jitter applied to the starting
    /// fixed effects and global parameters (unconstrained scale).
    pub init_jitter: f64,
    /// Keep latent fields at their initial values (precisions still update).
    pub fixed_fields: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_iter: 2000,
            burn_in: 1000,
            thin: 1,
            n_chains: 2,
            seed: 1,
            adapt_window: 50,
            target_accept_single: 0.44,
            target_accept_block: 0.234,
            step_field: 0.5,
            step_beta: 0.05,
            step_globals: 0.05,
            init_jitter: 0.1,
            fixed_fields: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_iter == 0 || self.burn_in >= self.n_iter {
            return fail("need 0 <= burn_in < n_iter");
        }
        if self.thin == 0 {
            return fail("thin must be >= 1");
        }
        if self.n_chains == 0 {
            return fail("n_chains must be >= 1");
        }
        if self.adapt_window == 0 {
            return fail("adapt_window must be >= 1");
        }
        for (name, t) in [
            ("target_accept_single", self.target_accept_single),
            ("target_accept_block", self.target_accept_block),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1)")));
            }
        }
        for (name, s) in [
            ("step_field", self.step_field),
            ("step_beta", self.step_beta),
            ("step_globals", self.step_globals),
        ] {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and > 0")));
            }
        }
        if !(self.init_jitter >= 0.0) {
            return fail("init_jitter must be >= 0");
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Acceptance counts for one adaptation window plus run totals.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AcceptanceLedger {
    pub window_accepted: u64,
    pub window_proposed: u64,
    pub accepted: u64,
    pub proposed: u64,
    /// Adaptation events applied so far.
    pub adaptations: u64,
}

impl AcceptanceLedger {
    #[inline]
    pub fn record(&mut self, accepted: bool) {
        self.window_proposed += 1;
        self.proposed += 1;
        if accepted {
            self.window_accepted += 1;
            self.accepted += 1;
        }
    }

    pub fn window_rate(&self) -> Option<f64> {
        (self.window_proposed > 0).then(|| self.window_accepted as f64 / self.window_proposed as f64)
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn close_window(&mut self) {
        self.window_accepted = 0;
        self.window_proposed = 0;
    }

    fn reset_totals(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
    }
}

/// Robbins-Monro scale update: the log-scale moves by
/// `(observed - target) / sqrt(k)` where `k` counts adaptation events
/// including this one.
pub fn adapt_step(ledger: &AcceptanceLedger, current_scale: f64, target: f64) -> f64 {
    let Some(observed) = ledger.window_rate() else {
        return current_scale;
    };
    let k = (ledger.adaptations + 1) as f64;
    (current_scale.ln() + (observed - target) / k.sqrt())
        .exp()
        .clamp(SCALE_MIN, SCALE_MAX)
}

/// One adaptation event in the trace.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEvent {
    pub iteration: usize,
    pub block: String,
    /// New scale (geometric mean over sites for field blocks).
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainSamples {
    pub chain: usize,
    pub seed: u64,
    /// Flattened retained states, in [`param_names`] order.
    pub draws: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate per block.
    pub acceptance: Vec<(String, f64)>,
    pub adaptation: Vec<AdaptEvent>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub names: Vec<String>,
    pub config: ModelConfig,
    pub n_units: usize,
    pub p: usize,
    pub chains: Vec<ChainSamples>,
}

impl PosteriorSamples {
    pub fn total_draws(&self) -> usize {
        self.chains.iter().map(|c| c.draws.len()).sum()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain trace of one scalar.
    pub fn traces(&self, column: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|c| c.draws.iter().map(|d| d[column]).collect())
            .collect()
    }

    /// Every retained draw (chain-major order) as a state.
    pub fn states(&self) -> Result<Vec<LatentState<f64>>> {
        self.chains
            .iter()
            .flat_map(|c| c.draws.iter())
            .map(|d| LatentState::from_flat(&self.config, self.n_units, self.p, d))
            .collect()
    }
}

/// Which latent field a single-site move touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldKind {
    /// `w1`, the count field (shared into sizes when the structure says so).
    Count,
    /// `w2`, the size-only field.
    Size,
}

/// Change in the log-posterior from setting one field value, computed from
/// the unit's own likelihood terms and its neighbourhood in the iCAR prior.
pub fn local_delta(
    data: &ModelData<'_>,
    state: &LatentState<f64>,
    field: FieldKind,
    unit: usize,
    value: f64,
) -> Result<f64> {
    let cfg = data.config;
    let x = data.covariates;
    let f = match field {
        FieldKind::Count => state.w1.as_ref(),
        FieldKind::Size => state.w2.as_ref(),
    }
    .ok_or_else(|| Error::Contract(format!("{field:?} field is not active")))?;
    if unit >= f.w.len() {
        return Err(Error::Contract(format!("unit {unit} out of range")));
    }
    let step = value - f.w[unit];
    let sizes = data.inventory.sizes(unit);
    let globals = state.size_globals(cfg);
    let mut delta = -0.5 * f.tau * data.graph.quadform_site_delta(&f.w, unit, value);
    let k = data.inventory.count(unit);
    let lg = ln_gamma((k + 1) as f64);
    if field == FieldKind::Count {
        let eta = count_eta(state, x, unit);
        delta += count_term(k, eta + step, lg) - count_term(k, eta, lg);
    }
    let size_moves = match field {
        FieldKind::Count => cfg.structure.uses_sharing(),
        FieldKind::Size => true,
    };
    if size_moves && !sizes.is_empty() {
        let eta2 = size_eta(state, x, cfg.structure, unit);
        let shift = if field == FieldKind::Count { state.gamma * step } else { step };
        delta += globals.sizes_loglik(eta2 + shift, sizes) - globals.sizes_loglik(eta2, sizes);
    }
    Ok(delta)
}

#[inline]
fn count_term(k: u64, eta: f64, ln_fact: f64) -> f64 {
    k as f64 * eta - eta.exp() - ln_fact
}

/// Conjugate draw of an iCAR precision given the field's quadratic form.
pub fn tau_gibbs_draw<R: Rng + ?Sized>(rng: &mut R, priors: &Priors, rank: usize, quadform: f64) -> f64 {
    let shape = priors.tau_shape + 0.5 * rank as f64;
    let rate = priors.tau_rate + 0.5 * quadform;
    Gamma::new(shape, 1.0 / rate)
        .expect("posterior gamma parameters are positive")
        .sample(rng)
        .max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Unconstrained parameterization of the global block
// ---------------------------------------------------------------------------

#[inline]
fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Maps the global block (gamma if shared, xi, kappa, split extras) to and
/// from an unconstrained vector.
#[derive(Debug, Clone, Copy)]
struct GlobalMap {
    sharing: bool,
    family: FamilyTag,
    xi_lo: f64,
    xi_hi: f64,
}

impl GlobalMap {
    fn new(cfg: &ModelConfig) -> Self {
        Self {
            sharing: cfg.structure.uses_sharing(),
            family: cfg.family,
            xi_lo: cfg.priors.xi_lower,
            xi_hi: cfg.priors.xi_upper,
        }
    }

    fn dim(&self) -> usize {
        self.sharing as usize
            + 1
            + match self.family {
                FamilyTag::Gp => 0,
                FamilyTag::Egp => 1,
                FamilyTag::Split => 3,
            }
    }

    fn forward(&self, s: &LatentState<f64>) -> Vec<f64> {
        let mut u = Vec::with_capacity(self.dim());
        if self.sharing {
            u.push(s.gamma);
        }
        u.push(logit((s.xi - self.xi_lo) / (self.xi_hi - self.xi_lo)));
        match self.family {
            FamilyTag::Gp => {}
            FamilyTag::Egp => u.push(s.kappa.expect("egp kappa").ln()),
            FamilyTag::Split => {
                let e = s.split.expect("split extras");
                u.extend([e.bulk_shape.ln(), e.bulk_rate.ln(), logit(e.tail_weight)]);
            }
        }
        u
    }

    /// Writes `u` into `s` and returns the log-Jacobian of the inverse map.
    fn apply(&self, u: &[f64], s: &mut LatentState<f64>) -> f64 {
        let mut it = u.iter().copied();
        if self.sharing {
            s.gamma = it.next().unwrap();
        }
        let t = logistic(it.next().unwrap());
        let width = self.xi_hi - self.xi_lo;
        s.xi = self.xi_lo + width * t;
        let mut log_jac = (width * t * (1.0 - t)).ln();
        match self.family {
            FamilyTag::Gp => {}
            FamilyTag::Egp => {
                let lk = it.next().unwrap();
                s.kappa = Some(lk.exp());
                log_jac += lk;
            }
            FamilyTag::Split => {
                let (la, lb, lt) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                let tw = logistic(lt);
                s.split = Some(SplitExtras {
                    bulk_shape: la.exp(),
                    bulk_rate: lb.exp(),
                    tail_weight: tw,
                });
                log_jac += la + lb + (tw * (1.0 - tw)).ln();
            }
        }
        if !log_jac.is_finite() {
            return f64::NEG_INFINITY;
        }
        log_jac
    }
}

// ---------------------------------------------------------------------------
// Block proposals
// ---------------------------------------------------------------------------

/// Running mean/covariance (Welford).
#[derive(Debug, Clone)]
struct RunningCov {
    count: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl RunningCov {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            m2: DMatrix::zeros(dim, dim),
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1;
        let x = DVector::from_column_slice(x);
        let d = &x - &self.mean;
        self.mean += &d / self.count as f64;
        let d2 = &x - &self.mean;
        self.m2 += &d * d2.transpose();
    }

    fn covariance(&self) -> Option<DMatrix<f64>> {
        (self.count > 1).then(|| &self.m2 / (self.count - 1) as f64)
    }
}

#[derive(Debug, Clone)]
struct BlockProposal {
    name: &'static str,
    dim: usize,
    scale: f64,
    chol: DMatrix<f64>,
    history: RunningCov,
    ledger: AcceptanceLedger,
    empirical: bool,
}

impl BlockProposal {
    fn new(name: &'static str, dim: usize, scale: f64) -> Self {
        Self {
            name,
            dim,
            scale,
            chol: DMatrix::identity(dim, dim),
            history: RunningCov::new(dim),
            ledger: AcceptanceLedger::default(),
            empirical: false,
        }
    }

    fn propose(&self, current: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let step = &self.chol * z * self.scale;
        current.iter().zip(step.iter()).map(|(c, s)| c + s).collect()
    }

    fn adapt(&mut self, target: f64) {
        self.scale = adapt_step(&self.ledger, self.scale, target);
        self.ledger.adaptations += 1;
        self.ledger.close_window();
        let min_draws = (10 * self.dim).max(100);
        if self.history.count >= min_draws {
            if let Some(cov) = self.history.covariance() {
                let d = self.dim;
                let ridge = DMatrix::identity(d, d) * 1e-10;
                if let Some(ch) = (cov + ridge).cholesky() {
                    self.chol = ch.l();
                    if !self.empirical {
                        self.empirical = true;
                        self.scale = 2.38 / (d as f64).sqrt();
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Chain
// ---------------------------------------------------------------------------

/// Largest graph for which the smooth-mode move is set up (dense
/// eigen-decomposition).
pub const MODE_MAX_UNITS: usize = 600;
/// Number of smooth modes moved jointly.
pub const MODE_COUNT: usize = 8;
/// Rounds of (rescale, smooth modes, gamma shear, precision Gibbs) per
/// sweep; these moves are cheap next to the single-site sweep and carry the
/// field scale.
pub const FIELD_ROUNDS: usize = 4;

#[derive(Debug, Clone)]
struct ModeBasis {
    vectors: Vec<Vec<f64>>,
    inv_sqrt_lambda: Vec<f64>,
}

impl ModeBasis {
    fn new(graph: &SlopeUnitGraph) -> Option<Self> {
        if graph.n() > MODE_MAX_UNITS || graph.rank() == 0 {
            return None;
        }
        let eig = nalgebra::SymmetricEigen::new(graph.dense_laplacian());
        let mut order: Vec<usize> = (0..graph.n())
            .filter(|&k| eig.eigenvalues[k] > NULL_EIGEN_TOL * graph.n() as f64)
            .collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        order.truncate(MODE_COUNT);
        Some(Self {
            vectors: order.iter().map(|&k| eig.eigenvectors.column(k).iter().copied().collect()).collect(),
            inv_sqrt_lambda: order.iter().map(|&k| 1.0 / eig.eigenvalues[k].sqrt()).collect(),
        })
    }
}

struct SiteScales {
    scales: Vec<f64>,
    ledgers: Vec<AcceptanceLedger>,
}

impl SiteScales {
    fn new(n: usize, step: f64) -> Self {
        Self {
            scales: vec![step; n],
            ledgers: vec![AcceptanceLedger::default(); n],
        }
    }

    fn adapt(&mut self, target: f64) -> f64 {
        let mut log_sum = 0.0;
        for (s, l) in self.scales.iter_mut().zip(self.ledgers.iter_mut()) {
            *s = adapt_step(l, *s, target);
            l.adaptations += 1;
            l.close_window();
            log_sum += s.ln();
        }
        (log_sum / self.scales.len().max(1) as f64).exp()
    }

    fn rate(&self) -> f64 {
        let (a, p) = self
            .ledgers
            .iter()
            .fold((0u64, 0u64), |(a, p), l| (a + l.accepted, p + l.proposed));
        if p == 0 {
            0.0
        } else {
            a as f64 / p as f64
        }
    }

    fn reset_totals(&mut self) {
        self.ledgers.iter_mut().for_each(AcceptanceLedger::reset_totals);
    }
}

struct Chain<'d, 'a> {
    data: &'d ModelData<'a>,
    sampler: &'d SamplerConfig,
    rng: ChaCha8Rng,
    state: LatentState<f64>,
    ln_fact: Vec<f64>,
    count_ll: Vec<f64>,
    size_ll: Vec<f64>,
    movable: Vec<usize>,
    sites_w1: SiteScales,
    sites_w2: SiteScales,
    beta_count: BlockProposal,
    beta_size: BlockProposal,
    globals: BlockProposal,
    size_joint: BlockProposal,
    rescale_w1: BlockProposal,
    rescale_w2: BlockProposal,
    modes: Option<ModeBasis>,
    modes_w1: BlockProposal,
    modes_w2: BlockProposal,
    map: GlobalMap,
    trace: Vec<AdaptEvent>,
}

impl<'d, 'a> Chain<'d, 'a> {
    fn new(data: &'d ModelData<'a>, sampler: &'d SamplerConfig, rng: ChaCha8Rng, state: LatentState<f64>) -> Self {
        let n = data.n();
        let p = data.p();
        let map = GlobalMap::new(data.config);
        let ln_fact = (0..n).map(|i| ln_gamma((data.inventory.count(i) + 1) as f64)).collect();
        let movable = (0..n).filter(|&i| !data.graph.is_isolated(i)).collect();
        let modes = if sampler.fixed_fields { None } else { ModeBasis::new(data.graph) };
        let mut chain = Self {
            data,
            sampler,
            rng,
            state,
            ln_fact,
            count_ll: vec![0.0; n],
            size_ll: vec![0.0; n],
            movable,
            sites_w1: SiteScales::new(n, sampler.step_field),
            sites_w2: SiteScales::new(n, sampler.step_field),
            beta_count: BlockProposal::new("beta_count", p, sampler.step_beta),
            beta_size: BlockProposal::new("beta_size", p, sampler.step_beta),
            globals: BlockProposal::new("globals", map.dim(), sampler.step_globals),
            size_joint: BlockProposal::new("size_joint", p + map.dim(), sampler.step_globals),
            rescale_w1: BlockProposal::new("rescale_w1", 1, sampler.step_globals),
            rescale_w2: BlockProposal::new("rescale_w2", 1, sampler.step_globals),
            modes_w1: BlockProposal::new("modes_w1", modes.as_ref().map_or(0, |m| m.vectors.len()), 0.5),
            modes_w2: BlockProposal::new("modes_w2", modes.as_ref().map_or(0, |m| m.vectors.len()), 0.5),
            modes,
            map,
            trace: Vec::new(),
        };
        chain.refresh_caches();
        chain
    }

    fn refresh_caches(&mut self) {
        let globals = self.state.size_globals(self.data.config);
        for i in 0..self.data.n() {
            self.count_ll[i] = self.unit_count_ll(i, count_eta(&self.state, self.data.covariates, i));
            let eta2 = size_eta(&self.state, self.data.covariates, self.data.config.structure, i);
            self.size_ll[i] = globals.sizes_loglik(eta2, self.data.inventory.sizes(i));
        }
    }

    #[inline]
    fn unit_count_ll(&self, i: usize, eta: f64) -> f64 {
        count_term(self.data.inventory.count(i), eta, self.ln_fact[i])
    }

    #[inline]
    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn sweep_field(&mut self, kind: FieldKind) {
        let cfg = self.data.config;
        let x = self.data.covariates;
        let globals = self.state.size_globals(cfg);
        let sharing = cfg.structure.uses_sharing();
        // Each accepted step moves the field mean by step/n, which the
        // recentering below hands to the intercepts. Scoring the intercept
        // prior at its post-recentering value keeps the move exact on the
        // centered space.
        let inv_n = 1.0 / self.data.n() as f64;
        let sd = cfg.priors.beta_sd;
        let mut level_count = self.state.beta_count[0];
        let mut level_size = self.state.beta_size[0];
        let prior_shift = |level: f64, by: f64| normal_logpdf(level + by, sd) - normal_logpdf(level, sd);
        for idx in 0..self.movable.len() {
            let i = self.movable[idx];
            let scale = match kind {
                FieldKind::Count => self.sites_w1.scales[i],
                FieldKind::Size => self.sites_w2.scales[i],
            };
            let z: f64 = self.rng.sample(StandardNormal);
            let step = scale * z;
            let (w_old, tau) = {
                let f = match kind {
                    FieldKind::Count => self.state.w1.as_ref(),
                    FieldKind::Size => self.state.w2.as_ref(),
                }
                .expect("active field");
                (f.w[i], f.tau)
            };
            let value = w_old + step;
            let f = match kind {
                FieldKind::Count => self.state.w1.as_ref(),
                FieldKind::Size => self.state.w2.as_ref(),
            }
            .expect("active field");
            let mut delta = -0.5 * tau * self.data.graph.quadform_site_delta(&f.w, i, value);
            let (shift_count, shift_size) = match kind {
                FieldKind::Count if sharing => (step * inv_n, self.state.gamma * step * inv_n),
                FieldKind::Count => (step * inv_n, 0.0),
                FieldKind::Size => (0.0, step * inv_n),
            };
            delta += prior_shift(level_count, shift_count) + prior_shift(level_size, shift_size);

            let mut new_count = self.count_ll[i];
            let mut new_size = self.size_ll[i];
            if kind == FieldKind::Count {
                let eta = count_eta(&self.state, x, i) + step;
                new_count = self.unit_count_ll(i, eta);
                delta += new_count - self.count_ll[i];
            }
            let sizes = self.data.inventory.sizes(i);
            let size_moves = kind == FieldKind::Size || sharing;
            if size_moves && !sizes.is_empty() {
                let shift = if kind == FieldKind::Count { self.state.gamma * step } else { step };
                let eta2 = size_eta(&self.state, x, cfg.structure, i) + shift;
                new_size = globals.sizes_loglik(eta2, sizes);
                delta += new_size - self.size_ll[i];
            }

            let ok = self.accept(delta);
            match kind {
                FieldKind::Count => self.sites_w1.ledgers[i].record(ok),
                FieldKind::Size => self.sites_w2.ledgers[i].record(ok),
            }
            if ok {
                let f = match kind {
                    FieldKind::Count => self.state.w1.as_mut(),
                    FieldKind::Size => self.state.w2.as_mut(),
                }
                .expect("active field");
                f.w[i] = value;
                level_count += shift_count;
                level_size += shift_size;
                self.count_ll[i] = new_count;
                self.size_ll[i] = new_size;
            }
        }
    }

    /// Centres both fields per component and moves the removed level into
    /// the intercepts.
    fn recenter(&mut self) {
        let graph = self.data.graph;
        let n = graph.n() as f64;
        let exact = graph.n_components() == 1;
        let sharing = self.data.config.structure.uses_sharing();
        if let Some(f) = self.state.w1.as_mut() {
            let means = graph.center_in_place(&mut f.w);
            let level = weighted_level(graph, &means, n);
            self.state.beta_count[0] += level;
            if sharing {
                self.state.beta_size[0] += self.state.gamma * level;
            }
        }
        if let Some(f) = self.state.w2.as_mut() {
            let means = graph.center_in_place(&mut f.w);
            self.state.beta_size[0] += weighted_level(graph, &means, n);
        }
        if !exact {
            self.refresh_caches();
        }
    }

    fn update_beta_count(&mut self) {
        let cur = self.state.beta_count.clone();
        let prop = self.beta_count.propose(&cur, &mut self.rng);
        let sd = self.data.config.priors.beta_sd;
        let x = self.data.covariates;
        let mut new_ll = vec![0.0; self.data.n()];
        let mut delta: f64 = prop.iter().map(|&b| normal_logpdf(b, sd)).sum::<f64>()
            - cur.iter().map(|&b| normal_logpdf(b, sd)).sum::<f64>();
        self.state.beta_count = prop;
        for (i, slot) in new_ll.iter_mut().enumerate() {
            *slot = self.unit_count_ll(i, count_eta(&self.state, x, i));
            delta += *slot - self.count_ll[i];
        }
        let ok = self.accept(delta);
        self.beta_count.ledger.record(ok);
        if ok {
            self.count_ll = new_ll;
        } else {
            self.state.beta_count = cur;
        }
    }

    fn size_terms(&self, state: &LatentState<f64>) -> Vec<f64> {
        let cfg = self.data.config;
        let globals = state.size_globals(cfg);
        let valid = globals.is_valid();
        (0..self.data.n())
            .map(|i| {
                let sizes = self.data.inventory.sizes(i);
                if sizes.is_empty() {
                    0.0
                } else if !valid {
                    f64::NEG_INFINITY
                } else {
                    globals.sizes_loglik(size_eta(state, self.data.covariates, cfg.structure, i), sizes)
                }
            })
            .collect()
    }

    fn update_beta_size(&mut self) {
        let cur = self.state.beta_size.clone();
        let prop = self.beta_size.propose(&cur, &mut self.rng);
        let sd = self.data.config.priors.beta_sd;
        let prior_delta = prop.iter().map(|&b| normal_logpdf(b, sd)).sum::<f64>()
            - cur.iter().map(|&b| normal_logpdf(b, sd)).sum::<f64>();
        self.state.beta_size = prop;
        let new_ll = self.size_terms(&self.state);
        let delta = prior_delta + sum_diff(&new_ll, &self.size_ll);
        let ok = self.accept(delta);
        self.beta_size.ledger.record(ok);
        if ok {
            self.size_ll = new_ll;
        } else {
            self.state.beta_size = cur;
        }
    }

    fn globals_logprior(&self, state: &LatentState<f64>) -> f64 {
        let cfg = self.data.config;
        let mut lp = logprior_globals(state, cfg);
        if cfg.structure.uses_sharing() {
            lp += normal_logpdf(state.gamma, cfg.priors.gamma_sd);
        }
        lp
    }

    fn update_globals(&mut self) {
        let cur_u = self.map.forward(&self.state);
        let prop_u = self.globals.propose(&cur_u, &mut self.rng);
        let mut cand = self.state.clone();
        let cur_jac = self.map.apply(&cur_u, &mut cand);
        let cur_lp = self.globals_logprior(&self.state) + cur_jac;
        let prop_jac = self.map.apply(&prop_u, &mut cand);
        let prop_lp = self.globals_logprior(&cand) + prop_jac;
        let mut ok = false;
        let mut new_ll = Vec::new();
        if prop_lp.is_finite() {
            new_ll = self.size_terms(&cand);
            // gamma also moves nothing else: counts do not depend on these
            let delta = prop_lp - cur_lp + sum_diff(&new_ll, &self.size_ll);
            ok = self.accept(delta);
        }
        self.globals.ledger.record(ok);
        if ok {
            self.state = cand;
            self.size_ll = new_ll;
        }
    }

    /// Joint (beta_size, globals) move; captures the scale/shape
    /// correlation the separate blocks cannot.
    fn update_size_joint(&mut self) {
        let p = self.state.beta_size.len();
        let mut cur = self.state.beta_size.clone();
        cur.extend(self.map.forward(&self.state));
        let prop = self.size_joint.propose(&cur, &mut self.rng);
        let sd = self.data.config.priors.beta_sd;
        let mut cand = self.state.clone();
        let cur_jac = self.map.apply(&cur[p..], &mut cand);
        cand.beta_size.copy_from_slice(&prop[..p]);
        let prop_jac = self.map.apply(&prop[p..], &mut cand);
        let beta_lp = |b: &[f64]| b.iter().map(|&v| normal_logpdf(v, sd)).sum::<f64>();
        let cur_lp = self.globals_logprior(&self.state) + cur_jac + beta_lp(&cur[..p]);
        let prop_lp = self.globals_logprior(&cand) + prop_jac + beta_lp(&prop[..p]);
        let mut ok = false;
        let mut new_ll = Vec::new();
        if prop_lp.is_finite() {
            new_ll = self.size_terms(&cand);
            ok = self.accept(prop_lp - cur_lp + sum_diff(&new_ll, &self.size_ll));
        }
        self.size_joint.ledger.record(ok);
        if ok {
            self.state = cand;
            self.size_ll = new_ll;
        }
    }

    /// Rescales a whole field and its precision together,
    /// `(w, tau) -> (e^d w, e^{-2d} tau)`. The iCAR prior term cancels
    /// against the Jacobian except for `e^{-2d}`, which breaks the
    /// field/precision funnel.
    fn update_field_rescale(&mut self, kind: FieldKind) {
        let cfg = self.data.config;
        let block = match kind {
            FieldKind::Count => &self.rescale_w1,
            FieldKind::Size => &self.rescale_w2,
        };
        let d = block.propose(&[0.0], &mut self.rng)[0];
        let c = d.exp();
        let mut cand = self.state.clone();
        let f = match kind {
            FieldKind::Count => cand.w1.as_mut(),
            FieldKind::Size => cand.w2.as_mut(),
        }
        .expect("active field");
        f.w.iter_mut().for_each(|v| *v *= c);
        let tau_old = f.tau;
        f.tau /= c * c;
        let priors = &cfg.priors;
        let mut delta = gamma_logpdf(f.tau, priors.tau_shape, priors.tau_rate)
            - gamma_logpdf(tau_old, priors.tau_shape, priors.tau_rate)
            - 2.0 * d;
        let (ll_delta, new_count, new_size) = self.field_loglik_change(kind, &cand);
        delta += ll_delta;
        let ok = delta.is_finite() && cand.w1.iter().chain(cand.w2.iter()).all(|f| f.tau > 0.0) && self.accept(delta);
        match kind {
            FieldKind::Count => self.rescale_w1.ledger.record(ok),
            FieldKind::Size => self.rescale_w2.ledger.record(ok),
        }
        if ok {
            self.commit_field_move(cand, new_count, new_size);
        }
    }

    /// Exact Gibbs draw along `(gamma, w2) -> (gamma + d, w2 - d * w1)`,
    /// which leaves every linear predictor unchanged. Only the gamma prior
    /// and the w2 prior see `d`, and both are Gaussian in it.
    fn update_gamma_shear(&mut self) {
        let cfg = self.data.config;
        if !cfg.structure.uses_sharing() {
            return;
        }
        let (Some(w1), Some(w2)) = (self.state.w1.as_ref(), self.state.w2.as_ref()) else {
            return;
        };
        let graph = self.data.graph;
        let (mut q11, mut q12) = (0.0, 0.0);
        for &(a, b) in graph.edges() {
            let d1 = w1.w[a] - w1.w[b];
            q11 += d1 * d1;
            q12 += d1 * (w2.w[a] - w2.w[b]);
        }
        let prec_gamma = 1.0 / (cfg.priors.gamma_sd * cfg.priors.gamma_sd);
        let prec = prec_gamma + w2.tau * q11;
        let mean = (w2.tau * q12 - self.state.gamma * prec_gamma) / prec;
        let d = mean + self.rng.sample::<f64, _>(StandardNormal) / prec.sqrt();
        self.state.gamma += d;
        let w1 = self.state.w1.as_ref().expect("active field").w.clone();
        let w2 = self.state.w2.as_mut().expect("active field");
        for (v, u) in w2.w.iter_mut().zip(&w1) {
            *v -= d * u;
        }
        self.size_ll = self.size_terms(&self.state);
    }

    /// Likelihood change of a candidate that differs from the current state
    /// only in one field (and possibly its precision).
    fn field_loglik_change(
        &self,
        kind: FieldKind,
        cand: &LatentState<f64>,
    ) -> (f64, Option<Vec<f64>>, Option<Vec<f64>>) {
        let cfg = self.data.config;
        let mut delta = 0.0;
        let mut new_count = None;
        if kind == FieldKind::Count {
            let v: Vec<f64> = (0..self.data.n())
                .map(|i| self.unit_count_ll(i, count_eta(cand, self.data.covariates, i)))
                .collect();
            delta += sum_diff(&v, &self.count_ll);
            new_count = Some(v);
        }
        let mut new_size = None;
        if kind == FieldKind::Size || cfg.structure.uses_sharing() {
            let v = self.size_terms(cand);
            delta += sum_diff(&v, &self.size_ll);
            new_size = Some(v);
        }
        (delta, new_count, new_size)
    }

    fn commit_field_move(&mut self, cand: LatentState<f64>, new_count: Option<Vec<f64>>, new_size: Option<Vec<f64>>) {
        self.state = cand;
        if let Some(v) = new_count {
            self.count_ll = v;
        }
        if let Some(v) = new_size {
            self.size_ll = v;
        }
    }

    /// Random walk along the smoothest Laplacian eigenvectors, scaled like
    /// the prior; single-site updates move these modes slowly.
    fn update_field_modes(&mut self, kind: FieldKind) {
        let Some(basis) = self.modes.as_ref() else {
            return;
        };
        let k = basis.inv_sqrt_lambda.len();
        let block = match kind {
            FieldKind::Count => &self.modes_w1,
            FieldKind::Size => &self.modes_w2,
        };
        let z = block.propose(&vec![0.0; k], &mut self.rng);
        let mut cand = self.state.clone();
        let f = match kind {
            FieldKind::Count => cand.w1.as_mut(),
            FieldKind::Size => cand.w2.as_mut(),
        }
        .expect("active field");
        let inv_sqrt_tau = 1.0 / f.tau.sqrt();
        for ((v, zk), c) in basis.vectors.iter().zip(&z).zip(&basis.inv_sqrt_lambda) {
            let a = zk * c * inv_sqrt_tau;
            for (w, e) in f.w.iter_mut().zip(v) {
                *w += a * e;
            }
        }
        let graph = self.data.graph;
        let old_q = match kind {
            FieldKind::Count => graph.quadform_unchecked(&self.state.w1.as_ref().expect("active field").w),
            FieldKind::Size => graph.quadform_unchecked(&self.state.w2.as_ref().expect("active field").w),
        };
        let mut delta = -0.5 * f.tau * (graph.quadform_unchecked(&f.w) - old_q);
        let (ll_delta, new_count, new_size) = self.field_loglik_change(kind, &cand);
        delta += ll_delta;
        let ok = self.accept(delta);
        match kind {
            FieldKind::Count => self.modes_w1.ledger.record(ok),
            FieldKind::Size => self.modes_w2.ledger.record(ok),
        }
        if ok {
            self.commit_field_move(cand, new_count, new_size);
        }
    }

    fn update_taus(&mut self) {
        let graph = self.data.graph;
        let priors = &self.data.config.priors;
        for f in [self.state.w1.as_mut(), self.state.w2.as_mut()].into_iter().flatten() {
            let q = graph.quadform_unchecked(&f.w);
            f.tau = tau_gibbs_draw(&mut self.rng, priors, graph.rank(), q);
        }
    }

    fn adapt(&mut self, iteration: usize) {
        let single = self.sampler.target_accept_single;
        let block = self.sampler.target_accept_block;
        if self.state.w1.is_some() && !self.sampler.fixed_fields {
            let s = self.sites_w1.adapt(single);
            self.trace.push(AdaptEvent {
                iteration,
                block: "w1".into(),
                scale: s,
            });
        }
        if self.state.w2.is_some() && !self.sampler.fixed_fields {
            let s = self.sites_w2.adapt(single);
            self.trace.push(AdaptEvent {
                iteration,
                block: "w2".into(),
                scale: s,
            });
        }
        let fields = !self.sampler.fixed_fields;
        let has = [
            true,
            true,
            self.globals.dim > 0,
            true,
            fields && self.state.w1.is_some(),
            fields && self.state.w2.is_some(),
            fields && self.modes.is_some() && self.state.w1.is_some(),
            fields && self.modes.is_some() && self.state.w2.is_some(),
        ];
        let mut events = Vec::new();
        for (k, b) in self.blocks_mut().into_iter().enumerate() {
            if !has[k] {
                continue;
            }
            // the rescaling moves are one-dimensional
            b.adapt(if k == 4 || k == 5 { single } else { block });
            events.push(AdaptEvent {
                iteration,
                block: b.name.into(),
                scale: b.scale,
            });
        }
        self.trace.extend(events);
    }

    fn blocks_mut(&mut self) -> [&mut BlockProposal; 8] {
        [
            &mut self.beta_count,
            &mut self.beta_size,
            &mut self.globals,
            &mut self.size_joint,
            &mut self.rescale_w1,
            &mut self.rescale_w2,
            &mut self.modes_w1,
            &mut self.modes_w2,
        ]
    }

    fn run(mut self, chain: usize, seed: u64) -> ChainSamples {
        let s = self.sampler;
        let mut draws = Vec::with_capacity(s.draws_per_chain());
        let history_reset = s.burn_in / 2;
        for t in 0..s.n_iter {
            if !s.fixed_fields {
                if self.state.w1.is_some() {
                    self.sweep_field(FieldKind::Count);
                }
                if self.state.w2.is_some() {
                    self.sweep_field(FieldKind::Size);
                }
                self.recenter();
            }
            self.update_beta_count();
            self.update_beta_size();
            if self.globals.dim > 0 {
                self.update_globals();
            }
            self.update_size_joint();
            let rounds = if s.fixed_fields { 1 } else { FIELD_ROUNDS };
            for _ in 0..rounds {
                if !s.fixed_fields {
                    if self.state.w1.is_some() {
                        self.update_field_rescale(FieldKind::Count);
                        self.update_field_modes(FieldKind::Count);
                    }
                    if self.state.w2.is_some() {
                        self.update_field_rescale(FieldKind::Size);
                        self.update_field_modes(FieldKind::Size);
                    }
                    self.update_gamma_shear();
                }
                self.update_taus();
            }

            if t < s.burn_in {
                let u = self.map.forward(&self.state);
                self.globals.history.push(&u);
                let bc = self.state.beta_count.clone();
                self.beta_count.history.push(&bc);
                let mut joint = self.state.beta_size.clone();
                self.beta_size.history.push(&joint);
                joint.extend(u);
                self.size_joint.history.push(&joint);
                if t + 1 == history_reset && s.burn_in >= 4 * s.adapt_window {
                    for b in self.blocks_mut() {
                        b.history = RunningCov::new(b.dim);
                    }
                }
                if (t + 1) % s.adapt_window == 0 {
                    self.adapt(t + 1);
                }
            }
            if t + 1 == s.burn_in {
                self.sites_w1.reset_totals();
                self.sites_w2.reset_totals();
                for b in self.blocks_mut() {
                    b.ledger.reset_totals();
                }
            }
            if t >= s.burn_in && (t + 1 - s.burn_in) % s.thin == 0 {
                draws.push(self.state.to_flat());
            }
        }
        let mut acceptance = Vec::new();
        let fields = !s.fixed_fields;
        if self.state.w1.is_some() && fields {
            acceptance.push(("w1".to_string(), self.sites_w1.rate()));
            acceptance.push(("rescale_w1".to_string(), self.rescale_w1.ledger.rate()));
            if self.modes.is_some() {
                acceptance.push(("modes_w1".to_string(), self.modes_w1.ledger.rate()));
            }
        }
        if self.state.w2.is_some() && fields {
            acceptance.push(("w2".to_string(), self.sites_w2.rate()));
            acceptance.push(("rescale_w2".to_string(), self.rescale_w2.ledger.rate()));
            if self.modes.is_some() {
                acceptance.push(("modes_w2".to_string(), self.modes_w2.ledger.rate()));
            }
        }
        acceptance.push(("beta_count".into(), self.beta_count.ledger.rate()));
        acceptance.push(("beta_size".into(), self.beta_size.ledger.rate()));
        if self.globals.dim > 0 {
            acceptance.push(("globals".into(), self.globals.ledger.rate()));
        }
        acceptance.push(("size_joint".into(), self.size_joint.ledger.rate()));
        ChainSamples {
            chain,
            seed,
            draws,
            acceptance,
            adaptation: self.trace,
        }
    }
}

fn weighted_level(graph: &SlopeUnitGraph, means: &[f64], n: f64) -> f64 {
    graph
        .components()
        .iter()
        .zip(means)
        .map(|(members, m)| m * members.len() as f64)
        .sum::<f64>()
        / n
}

fn sum_diff(new: &[f64], old: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in new.iter().zip(old) {
        if *a == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        acc += a - b;
    }
    acc
}

// ---------------------------------------------------------------------------
// Initialization and drivers
// ---------------------------------------------------------------------------

/// Deterministic starting state before per-chain jitter.
pub fn initial_state(data: &ModelData<'_>) -> LatentState<f64> {
    let cfg = data.config;
    let n = data.n();
    let mut s = LatentState::zeros(cfg, n, data.p());
    let total = data.inventory.total_count() as f64;
    let mean_offset = data
        .covariates
        .offset()
        .map_or(0.0, |o| o.iter().sum::<f64>() / n as f64);
    if n > 0 {
        s.beta_count[0] = (total.max(0.5) / n as f64).ln() - mean_offset;
    }
    s.xi = 0.1;

    let sizes: Vec<f64> = data.inventory.all_sizes().collect();
    match (cfg.family, cfg.threshold) {
        (FamilyTag::Split, Some(u)) => {
            let bulk: Vec<f64> = sizes.iter().copied().filter(|&a| a <= u).collect();
            let excess: Vec<f64> = sizes.iter().filter(|&&a| a > u).map(|a| a - u).collect();
            let bulk_mean = if bulk.is_empty() { u / 2.0 } else { mean(&bulk) };
            let tail_frac = if sizes.is_empty() {
                0.1
            } else {
                excess.len() as f64 / sizes.len() as f64
            };
            s.split = Some(SplitExtras {
                bulk_shape: 1.0,
                bulk_rate: 1.0 / bulk_mean,
                tail_weight: tail_frac.clamp(0.01, 0.99),
            });
            if !excess.is_empty() {
                s.beta_size[0] = mean(&excess).ln();
            }
        }
        _ => {
            if !sizes.is_empty() {
                s.beta_size[0] = mean(&sizes).ln();
            }
        }
    }
    s
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Names the first component of `state` with a non-finite contribution.
pub fn nonfinite_component(data: &ModelData<'_>, state: &LatentState<f64>) -> Option<String> {
    let cfg = data.config;
    if !logprior_globals(state, cfg).is_finite() {
        return Some("size-parameter prior (xi/kappa/split extras)".into());
    }
    if !logprior(state, data.graph, cfg).is_finite() {
        return Some("prior (fixed effects, sharing coefficient or precisions)".into());
    }
    let ll = loglik(data.inventory, state, data.covariates, cfg);
    if !ll.is_finite() {
        let globals = state.size_globals(cfg);
        for i in 0..data.n() {
            let eta2 = size_eta(state, data.covariates, cfg.structure, i);
            if !globals.sizes_loglik(eta2, data.inventory.sizes(i)).is_finite() {
                return Some(format!("size likelihood of unit {i} (observation outside support)"));
            }
        }
        return Some("count likelihood".into());
    }
    None
}

fn jittered_start(data: &ModelData<'_>, sampler: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<LatentState<f64>> {
    let base = initial_state(data);
    if let Some(component) = nonfinite_component(data, &base) {
        return Err(Error::Initialization { component });
    }
    let map = GlobalMap::new(data.config);
    let mut jitter = sampler.init_jitter;
    for _ in 0..60 {
        let mut s = base.clone();
        for b in s.beta_count.iter_mut().chain(s.beta_size.iter_mut()) {
            *b += jitter * rng.sample::<f64, _>(StandardNormal);
        }
        let mut u = map.forward(&s);
        for v in u.iter_mut() {
            *v += 0.5 * jitter * rng.sample::<f64, _>(StandardNormal);
        }
        map.apply(&u, &mut s);
        if data.logposterior(&s).is_finite() {
            return Ok(s);
        }
        jitter *= 0.5;
    }
    Ok(base)
}

/// Runs one chain from a given starting state.
pub fn run_chain_from(
    data: &ModelData<'_>,
    sampler: &SamplerConfig,
    chain: usize,
    start: LatentState<f64>,
) -> Result<ChainSamples> {
    sampler.validate()?;
    start.check_layout(data.config, data.n(), data.p())?;
    if let Some(component) = nonfinite_component(data, &start) {
        return Err(Error::Initialization { component });
    }
    let name = format!("chain-{chain}");
    let seed = substream_seed(sampler.seed, &name);
    let rng = substream(sampler.seed, &name);
    Ok(Chain::new(data, sampler, rng, start).run(chain, seed))
}

/// Runs one chain from the jittered default start.
pub fn run_single_chain(data: &ModelData<'_>, sampler: &SamplerConfig, chain: usize) -> Result<ChainSamples> {
    sampler.validate()?;
    let mut rng = substream(sampler.seed, &format!("init-{chain}"));
    let start = jittered_start(data, sampler, &mut rng)?;
    run_chain_from(data, sampler, chain, start)
}

/// Runs every chain (in parallel on the current rayon pool) and collects
/// the retained draws.
pub fn run_chain(data: &ModelData<'_>, sampler: &SamplerConfig) -> Result<PosteriorSamples> {
    sampler.validate()?;
    let chains = (0..sampler.n_chains)
        .into_par_iter()
        .map(|c| run_single_chain(data, sampler, c))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSamples {
        names: param_names(data.config, data.n(), data.p()),
        config: data.config.clone(),
        n_units: data.n(),
        p: data.p(),
        chains,
    })
}
