//! Joint count/size hierarchical model.
//!
//! Counts: `N_i ~ Poisson(exp(eta1_i))`, `eta1_i = x_i' beta_count + offset_i + w1_i`.
//! Sizes: `A_ij ~ F(sigma_i, globals)`, `log sigma_i = x_i' beta_size + gamma w1_i + w2_i`
//! with the terms present according to [`Structure`].

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::covariates::CovariateMatrix;
use crate::dist::{poisson_logpmf_log_rate, EgpParams, FamilyTag, GpParams, SizeFamily, SizeLaw, SplitParams};
use crate::error::{Error, Result};
use crate::graph::{IcarField, SlopeUnitGraph};
use crate::scalar::Scalar;
use crate::special::{gamma_logpdf, std_normal_cdf};

/// Which latent fields enter the two predictors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Structure {
    /// Size predictor uses `gamma * w1`; no `w2`.
    Shared,
    /// Separate `w1` (counts) and `w2` (sizes); no sharing.
    Independent,
    /// `gamma * w1 + w2` in the size predictor.
    SharedPlus,
    /// Covariates only.
    FixedOnly,
}

impl Structure {
    pub fn has_w1(self) -> bool {
        !matches!(self, Structure::FixedOnly)
    }

    pub fn has_w2(self) -> bool {
        matches!(self, Structure::Independent | Structure::SharedPlus)
    }

    pub fn uses_sharing(self) -> bool {
        matches!(self, Structure::Shared | Structure::SharedPlus)
    }

    pub fn label(self) -> &'static str {
        match self {
            Structure::Shared => "shared",
            Structure::Independent => "independent",
            Structure::SharedPlus => "shared_plus",
            Structure::FixedOnly => "fixed_only",
        }
    }
}

impl fmt::Display for Structure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Structure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "shared" => Ok(Structure::Shared),
            "independent" => Ok(Structure::Independent),
            "shared_plus" => Ok(Structure::SharedPlus),
            "fixed_only" => Ok(Structure::FixedOnly),
            other => Err(Error::Config(format!("unknown latent structure `{other}`"))),
        }
    }
}

/// Prior hyperparameters. Gamma priors are (shape, rate).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Priors {
    pub beta_sd: f64,
    pub gamma_sd: f64,
    pub tau_shape: f64,
    pub tau_rate: f64,
    pub xi_sd: f64,
    pub xi_lower: f64,
    pub xi_upper: f64,
    pub kappa_shape: f64,
    pub kappa_rate: f64,
    pub bulk_shape_shape: f64,
    pub bulk_shape_rate: f64,
    pub bulk_rate_shape: f64,
    pub bulk_rate_rate: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Self {
            beta_sd: 10.0,
            gamma_sd: 1.0,
            tau_shape: 1.0,
            tau_rate: 0.01,
            xi_sd: 0.25,
            xi_lower: -0.49,
            xi_upper: 0.99,
            kappa_shape: 1.0,
            kappa_rate: 0.1,
            bulk_shape_shape: 1.0,
            bulk_shape_rate: 1.0,
            bulk_rate_shape: 1.0,
            bulk_rate_rate: 1.0,
        }
    }
}

impl Priors {
    /// Log normalizer of the truncated normal prior on `xi`.
    fn xi_log_mass<T: Scalar>(&self) -> T {
        let sd = T::c(self.xi_sd);
        (std_normal_cdf(T::c(self.xi_upper) / sd) - std_normal_cdf(T::c(self.xi_lower) / sd)).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: FamilyTag,
    pub structure: Structure,
    pub priors: Priors,
    /// Empirical quantile of pooled sizes used as the split threshold.
    pub threshold_quantile: f64,
    /// Split threshold actually in use; resolved from data before fitting.
    pub threshold: Option<f64>,
}

impl ModelConfig {
    pub fn new(family: FamilyTag, structure: Structure) -> Self {
        Self {
            family,
            structure,
            priors: Priors::default(),
            threshold_quantile: 0.9,
            threshold: None,
        }
    }

    /// Fixes the split threshold at the configured quantile of the pooled
    /// sizes (no-op for other families or when already set).
    pub fn resolve_threshold<T: Scalar>(&mut self, inventory: &Inventory<T>) -> Result<()> {
        if self.family != FamilyTag::Split || self.threshold.is_some() {
            return Ok(());
        }
        let mut all: Vec<f64> = inventory.all_sizes().map(|a| a.to_f64_lossy()).collect();
        if all.is_empty() {
            return Err(Error::Config("split family needs observed sizes to fix its threshold".into()));
        }
        all.sort_by(|a, b| a.total_cmp(b));
        self.threshold = Some(empirical_quantile(&all, self.threshold_quantile));
        Ok(())
    }

    fn split_threshold(&self) -> Option<f64> {
        self.threshold
    }
}

/// Type-7 empirical quantile of sorted data.
pub fn empirical_quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-unit event sizes; the count of unit `i` is `sizes[i].len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Inventory<T> {
    sizes: Vec<Vec<T>>,
}

impl<T: Scalar> Inventory<T> {
    pub fn new(sizes: Vec<Vec<T>>) -> Result<Self> {
        for (i, s) in sizes.iter().enumerate() {
            if let Some(a) = s.iter().find(|a| !(**a > T::zero()) || !a.is_finite()) {
                return Err(Error::Contract(format!("unit {i} has non-positive size {a}")));
            }
        }
        Ok(Self { sizes })
    }

    pub fn empty(n: usize) -> Self {
        Self { sizes: vec![Vec::new(); n] }
    }

    pub fn n_units(&self) -> usize {
        self.sizes.len()
    }

    pub fn count(&self, i: usize) -> u64 {
        self.sizes[i].len() as u64
    }

    pub fn counts(&self) -> Vec<u64> {
        self.sizes.iter().map(|s| s.len() as u64).collect()
    }

    pub fn sizes(&self, i: usize) -> &[T] {
        &self.sizes[i]
    }

    pub fn total_count(&self) -> u64 {
        self.sizes.iter().map(|s| s.len() as u64).sum()
    }

    pub fn all_sizes(&self) -> impl Iterator<Item = T> + '_ {
        self.sizes.iter().flatten().copied()
    }
}

/// Split-family global parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitExtras<T> {
    pub bulk_shape: T,
    pub bulk_rate: T,
    pub tail_weight: T,
}

/// Every unknown of the model for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T> {
    pub beta_count: Vec<T>,
    pub beta_size: Vec<T>,
    pub w1: Option<IcarField<T>>,
    pub w2: Option<IcarField<T>>,
    /// Sharing coefficient; ignored unless the structure shares `w1`.
    pub gamma: T,
    pub xi: T,
    pub kappa: Option<T>,
    pub split: Option<SplitExtras<T>>,
}

impl<T: Scalar> LatentState<T> {
    /// All-zero effects, unit precisions, `xi = 0`, `kappa = 1`, split extras
    /// at (1, 1, 0.1).
    pub fn zeros(config: &ModelConfig, n: usize, p: usize) -> Self {
        let s = config.structure;
        Self {
            beta_count: vec![T::zero(); p],
            beta_size: vec![T::zero(); p],
            w1: s.has_w1().then(|| IcarField::zeros(n, T::one())),
            w2: s.has_w2().then(|| IcarField::zeros(n, T::one())),
            gamma: T::zero(),
            xi: T::zero(),
            kappa: (config.family == FamilyTag::Egp).then(T::one),
            split: (config.family == FamilyTag::Split).then(|| SplitExtras {
                bulk_shape: T::one(),
                bulk_rate: T::one(),
                tail_weight: T::c(0.1),
            }),
        }
    }

    /// Checks the presence rules and dimensions against `config`.
    pub fn check_layout(&self, config: &ModelConfig, n: usize, p: usize) -> Result<()> {
        let s = config.structure;
        let bad = |m: &str| Err(Error::Contract(m.to_string()));
        if self.beta_count.len() != p || self.beta_size.len() != p {
            return bad("fixed-effect length differs from covariate column count");
        }
        if s.has_w1() != self.w1.is_some() || s.has_w2() != self.w2.is_some() {
            return bad("latent fields do not match the configured structure");
        }
        for f in self.w1.iter().chain(self.w2.iter()) {
            if f.w.len() != n {
                return bad("latent field length differs from unit count");
            }
        }
        if (config.family == FamilyTag::Egp) != self.kappa.is_some() {
            return bad("kappa must be present exactly for the egp family");
        }
        if (config.family == FamilyTag::Split) != self.split.is_some() {
            return bad("split extras must be present exactly for the split family");
        }
        if config.family == FamilyTag::Split && config.split_threshold().is_none() {
            return bad("split threshold has not been resolved");
        }
        Ok(())
    }

    /// Global size-law parameters (everything but the unit scale).
    pub fn size_globals(&self, config: &ModelConfig) -> SizeGlobals<T> {
        SizeGlobals {
            family: config.family,
            xi: self.xi,
            kappa: self.kappa.unwrap_or_else(T::one),
            split: self.split,
            threshold: T::c(config.split_threshold().unwrap_or(f64::NAN)),
        }
    }

    /// Flattened scalar values in [`param_names`] order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        out.extend(self.beta_count.iter().map(|v| v.to_f64_lossy()));
        out.extend(self.beta_size.iter().map(|v| v.to_f64_lossy()));
        out.push(self.gamma.to_f64_lossy());
        out.push(self.xi.to_f64_lossy());
        if let Some(k) = self.kappa {
            out.push(k.to_f64_lossy());
        }
        if let Some(s) = self.split {
            out.extend([s.bulk_shape, s.bulk_rate, s.tail_weight].map(|v| v.to_f64_lossy()));
        }
        for f in self.w1.iter().chain(self.w2.iter()) {
            out.push(f.tau.to_f64_lossy());
        }
        for f in self.w1.iter().chain(self.w2.iter()) {
            out.extend(f.w.iter().map(|v| v.to_f64_lossy()));
        }
        out
    }

    /// Inverse of [`LatentState::to_flat`].
    pub fn from_flat(config: &ModelConfig, n: usize, p: usize, flat: &[f64]) -> Result<Self> {
        let expected = param_names(config, n, p).len();
        if flat.len() != expected {
            return Err(Error::Contract(format!(
                "flat state has {} values, expected {expected}",
                flat.len()
            )));
        }
        let mut it = flat.iter().map(|&v| T::c(v));
        let mut take = |k: usize| -> Vec<T> { it.by_ref().take(k).collect() };
        let beta_count = take(p);
        let beta_size = take(p);
        let gamma = take(1)[0];
        let xi = take(1)[0];
        let kappa = (config.family == FamilyTag::Egp).then(|| take(1)[0]);
        let split = (config.family == FamilyTag::Split).then(|| {
            let v = take(3);
            SplitExtras {
                bulk_shape: v[0],
                bulk_rate: v[1],
                tail_weight: v[2],
            }
        });
        let s = config.structure;
        let tau1 = s.has_w1().then(|| take(1)[0]);
        let tau2 = s.has_w2().then(|| take(1)[0]);
        let w1 = tau1.map(|tau| IcarField { w: take(n), tau });
        let w2 = tau2.map(|tau| IcarField { w: take(n), tau });
        Ok(Self {
            beta_count,
            beta_size,
            w1,
            w2,
            gamma,
            xi,
            kappa,
            split,
        })
    }
}

/// Column names of a flattened state, matching [`LatentState::to_flat`].
pub fn param_names(config: &ModelConfig, n: usize, p: usize) -> Vec<String> {
    let mut names = Vec::new();
    names.extend((0..p).map(|k| format!("beta_count[{k}]")));
    names.extend((0..p).map(|k| format!("beta_size[{k}]")));
    names.push("gamma".into());
    names.push("xi".into());
    if config.family == FamilyTag::Egp {
        names.push("kappa".into());
    }
    if config.family == FamilyTag::Split {
        names.extend(["bulk_shape", "bulk_rate", "tail_weight"].map(String::from));
    }
    let s = config.structure;
    if s.has_w1() {
        names.push("tau1".into());
    }
    if s.has_w2() {
        names.push("tau2".into());
    }
    if s.has_w1() {
        names.extend((0..n).map(|i| format!("w1[{i}]")));
    }
    if s.has_w2() {
        names.extend((0..n).map(|i| format!("w2[{i}]")));
    }
    names
}

/// Spatially constant part of the size law.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeGlobals<T> {
    pub family: FamilyTag,
    pub xi: T,
    pub kappa: T,
    pub split: Option<SplitExtras<T>>,
    pub threshold: T,
}

impl<T: Scalar> SizeGlobals<T> {
    /// Whether the globals satisfy their domain constraints.
    pub fn is_valid(&self) -> bool {
        if !self.xi.is_finite() {
            return false;
        }
        match self.family {
            FamilyTag::Gp => true,
            FamilyTag::Egp => self.kappa > T::zero() && self.kappa.is_finite(),
            FamilyTag::Split => match self.split {
                Some(s) => {
                    s.bulk_shape > T::zero()
                        && s.bulk_rate > T::zero()
                        && s.bulk_shape.is_finite()
                        && s.bulk_rate.is_finite()
                        && s.tail_weight > T::zero()
                        && s.tail_weight < T::one()
                        && self.threshold > T::zero()
                }
                None => false,
            },
        }
    }

    /// The size law of a unit with scale `sigma`, or `None` when `sigma` is
    /// not a finite positive number.
    #[inline]
    pub fn law(&self, sigma: T) -> Option<SizeFamily<T>> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return None;
        }
        Some(match self.family {
            FamilyTag::Gp => SizeFamily::Gp(GpParams::new_unchecked(sigma, self.xi)),
            FamilyTag::Egp => SizeFamily::Egp(EgpParams::new_unchecked(sigma, self.xi, self.kappa)),
            FamilyTag::Split => {
                let s = self.split.expect("split extras present for split family");
                SizeFamily::Split(SplitParams::new_unchecked(
                    s.bulk_shape,
                    s.bulk_rate,
                    self.threshold,
                    s.tail_weight,
                    GpParams::new_unchecked(sigma, self.xi),
                ))
            }
        })
    }

    /// Log-likelihood of one unit's sizes at log-scale `eta2`.
    #[inline]
    pub fn sizes_loglik(&self, eta2: T, sizes: &[T]) -> T {
        if sizes.is_empty() {
            return T::zero();
        }
        match self.law(eta2.exp()) {
            Some(law) => {
                let mut acc = T::zero();
                for &a in sizes {
                    acc = acc + law.logpdf(a);
                }
                acc
            }
            None => T::neg_infinity(),
        }
    }
}

fn check_dims<T: Scalar>(state: &LatentState<T>, x: &CovariateMatrix<T>) -> Result<()> {
    if state.beta_count.len() != x.p() || state.beta_size.len() != x.p() {
        return Err(Error::Contract(format!(
            "fixed effects have lengths ({}, {}) but the design has {} columns",
            state.beta_count.len(),
            state.beta_size.len(),
            x.p()
        )));
    }
    for f in state.w1.iter().chain(state.w2.iter()) {
        if f.w.len() != x.n() {
            return Err(Error::Contract(format!(
                "latent field has {} values but the design has {} rows",
                f.w.len(),
                x.n()
            )));
        }
    }
    Ok(())
}

/// Count log-rates `eta1_i`.
pub fn count_linpred<T: Scalar>(state: &LatentState<T>, x: &CovariateMatrix<T>) -> Result<Vec<T>> {
    check_dims(state, x)?;
    Ok((0..x.n()).map(|i| count_eta(state, x, i)).collect())
}

/// Size log-scales `eta2_i`.
pub fn size_linpred<T: Scalar>(
    state: &LatentState<T>,
    x: &CovariateMatrix<T>,
    structure: Structure,
) -> Result<Vec<T>> {
    check_dims(state, x)?;
    Ok((0..x.n()).map(|i| size_eta(state, x, structure, i)).collect())
}

#[inline]
pub(crate) fn count_eta<T: Scalar>(state: &LatentState<T>, x: &CovariateMatrix<T>, i: usize) -> T {
    let mut eta = x.dot_row(i, &state.beta_count) + x.offset_at(i);
    if let Some(f) = &state.w1 {
        eta = eta + f.w[i];
    }
    eta
}

#[inline]
pub(crate) fn size_eta<T: Scalar>(state: &LatentState<T>, x: &CovariateMatrix<T>, structure: Structure, i: usize) -> T {
    let mut eta = x.dot_row(i, &state.beta_size);
    if structure.uses_sharing() {
        if let Some(f) = &state.w1 {
            eta = eta + state.gamma * f.w[i];
        }
    }
    if structure.has_w2() {
        if let Some(f) = &state.w2 {
            eta = eta + f.w[i];
        }
    }
    eta
}

/// Joint log-likelihood of counts and sizes; `-inf` when any size falls
/// outside its unit's support.
pub fn loglik<T: Scalar>(
    inventory: &Inventory<T>,
    state: &LatentState<T>,
    x: &CovariateMatrix<T>,
    config: &ModelConfig,
) -> T {
    if check_dims(state, x).is_err() || inventory.n_units() != x.n() {
        return T::neg_infinity();
    }
    let globals = state.size_globals(config);
    if !globals.is_valid() {
        return T::neg_infinity();
    }
    let mut acc = T::zero();
    for i in 0..x.n() {
        acc = acc + poisson_logpmf_log_rate(inventory.count(i), count_eta(state, x, i));
        let sizes = inventory.sizes(i);
        if !sizes.is_empty() {
            acc = acc + globals.sizes_loglik(size_eta(state, x, config.structure, i), sizes);
        }
    }
    sanitize(acc)
}

#[inline]
fn sanitize<T: Scalar>(v: T) -> T {
    if v.is_nan() || v == T::infinity() {
        T::neg_infinity()
    } else {
        v
    }
}

#[inline]
pub(crate) fn normal_logpdf<T: Scalar>(v: T, sd: T) -> T {
    let z = v / sd;
    -(sd * (T::c(2.0) * T::PI()).sqrt()).ln() - T::c(0.5) * z * z
}

/// Log prior density of the global size parameters (xi, kappa, split extras).
pub(crate) fn logprior_globals<T: Scalar>(state: &LatentState<T>, config: &ModelConfig) -> T {
    let pr = &config.priors;
    let mut acc = T::zero();
    if !(state.xi > T::c(pr.xi_lower) && state.xi < T::c(pr.xi_upper)) {
        return T::neg_infinity();
    }
    acc = acc + normal_logpdf(state.xi, T::c(pr.xi_sd)) - pr.xi_log_mass::<T>();
    match config.family {
        FamilyTag::Gp => {}
        FamilyTag::Egp => match state.kappa {
            Some(k) if k > T::zero() => {
                acc = acc + gamma_logpdf(k, T::c(pr.kappa_shape), T::c(pr.kappa_rate));
            }
            _ => return T::neg_infinity(),
        },
        FamilyTag::Split => match state.split {
            Some(s) if s.tail_weight > T::zero() && s.tail_weight < T::one() => {
                acc = acc
                    + gamma_logpdf(s.bulk_shape, T::c(pr.bulk_shape_shape), T::c(pr.bulk_shape_rate))
                    + gamma_logpdf(s.bulk_rate, T::c(pr.bulk_rate_shape), T::c(pr.bulk_rate_rate));
            }
            _ => return T::neg_infinity(),
        },
    }
    acc
}

/// Log prior: Gaussian fixed effects and sharing coefficient, Gamma
/// precisions, truncated-normal shape, family-specific priors, and the iCAR
/// density of every active field.
pub fn logprior<T: Scalar>(state: &LatentState<T>, graph: &SlopeUnitGraph, config: &ModelConfig) -> T {
    let pr = &config.priors;
    let s = config.structure;
    if s.has_w1() != state.w1.is_some() || s.has_w2() != state.w2.is_some() {
        return T::neg_infinity();
    }
    let beta_sd = T::c(pr.beta_sd);
    let mut acc: T = state
        .beta_count
        .iter()
        .chain(&state.beta_size)
        .map(|&b| normal_logpdf(b, beta_sd))
        .sum();
    if s.uses_sharing() {
        acc = acc + normal_logpdf(state.gamma, T::c(pr.gamma_sd));
    }
    acc = acc + logprior_globals(state, config);
    for f in state.w1.iter().chain(state.w2.iter()) {
        if !(f.tau > T::zero()) || !f.tau.is_finite() || f.w.len() != graph.n() {
            return T::neg_infinity();
        }
        acc = acc
            + gamma_logpdf(f.tau, T::c(pr.tau_shape), T::c(pr.tau_rate))
            + graph.icar_logdensity_from_quadform(f.tau, graph.quadform_unchecked(&f.w));
    }
    sanitize(acc)
}

/// Unnormalized log-posterior.
pub fn logposterior<T: Scalar>(
    inventory: &Inventory<T>,
    state: &LatentState<T>,
    graph: &SlopeUnitGraph,
    x: &CovariateMatrix<T>,
    config: &ModelConfig,
) -> T {
    let prior = logprior(state, graph, config);
    if prior == T::neg_infinity() {
        return prior;
    }
    sanitize(prior + loglik(inventory, state, x, config))
}

/// Forward simulation of an inventory from `state`.
pub fn simulate_inventory<T: Scalar>(
    state: &LatentState<T>,
    graph: &SlopeUnitGraph,
    x: &CovariateMatrix<T>,
    config: &ModelConfig,
    seed: u64,
) -> Result<Inventory<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    simulate_inventory_with(state, graph, x, config, &mut rng)
}

pub fn simulate_inventory_with<T: Scalar, R: Rng + ?Sized>(
    state: &LatentState<T>,
    graph: &SlopeUnitGraph,
    x: &CovariateMatrix<T>,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Inventory<T>> {
    state.check_layout(config, graph.n(), x.p())?;
    let globals = state.size_globals(config);
    if !globals.is_valid() {
        return Err(Error::Contract("size parameters out of domain".into()));
    }
    let mut sizes = Vec::with_capacity(x.n());
    for i in 0..x.n() {
        let lambda = count_eta(state, x, i).exp().to_f64_lossy();
        let k = if lambda > 0.0 {
            let pois = Poisson::new(lambda).map_err(|_| Error::domain("lambda", lambda, "invalid Poisson rate"))?;
            pois.sample(rng) as usize
        } else {
            0
        };
        let sigma = size_eta(state, x, config.structure, i).exp();
        let law = globals
            .law(sigma)
            .ok_or_else(|| Error::domain("sigma", sigma.to_f64_lossy(), "must be finite and > 0"))?;
        let mut unit = Vec::with_capacity(k);
        law.sample_into(rng, k, &mut unit);
        // a zero draw can only come from a uniform of exactly 0
        for a in unit.iter_mut() {
            if !(*a > T::zero()) {
                *a = T::min_positive_value();
            }
        }
        sizes.push(unit);
    }
    Inventory::new(sizes)
}
