//! Predictive scoring of fitted size families on held-out inventories:
//! pinball loss at high quantiles, sample CRPS, and QQ plot data.

use std::fmt::Write as _;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::covariates::CovariateMatrix;
use crate::dist::{SizeFamily, SizeLaw};
use crate::error::{Error, Result};
use crate::mcmc::PosteriorSamples;
use crate::model::{count_linpred, empirical_quantile, size_linpred, Inventory, LatentState, ModelConfig};
use crate::rng::substream;
use crate::special::bisect_increasing;

/// Quantile (pinball) loss of predicted quantile `pred` at level `tau`.
pub fn pinball_loss(y: f64, pred: f64, tau: f64) -> f64 {
    if y >= pred {
        tau * (y - pred)
    } else {
        (1.0 - tau) * (pred - y)
    }
}

/// Two-sample CRPS estimate `E|X - y| - E|X - X'|/2` from predictive draws
/// (pairs over distinct draws).
pub fn crps_sample(draws: &[f64], y: f64) -> f64 {
    let m = draws.len();
    if m == 0 {
        return f64::NAN;
    }
    let abs_err = draws.iter().map(|x| (x - y).abs()).sum::<f64>() / m as f64;
    if m == 1 {
        return abs_err;
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    // sum_{i<j} (x_(j) - x_(i)) = sum_k x_(k) (2k - m + 1), k zero-based
    let pair_sum: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| x * (2.0 * k as f64 - m as f64 + 1.0))
        .sum();
    abs_err - pair_sum / (m * (m - 1)) as f64
}

/// Quantile of the equally weighted mixture of `laws`, found by bisection on
/// the averaged CDF between the smallest and largest component quantiles.
pub fn mixture_quantile(laws: &[SizeFamily<f64>], p: f64) -> Result<f64> {
    if laws.is_empty() {
        return Err(Error::EmptySamples("mixture has no components".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::domain("p", p, "probability must lie in [0, 1)"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for l in laws {
        let q = l.quantile(p)?;
        lo = lo.min(q);
        hi = hi.max(q);
    }
    if hi <= lo {
        return Ok(lo);
    }
    let k = laws.len() as f64;
    Ok(bisect_increasing(
        |x| laws.iter().map(|l| l.cdf(x)).sum::<f64>() / k,
        p,
        lo,
        hi,
        1e-12,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSettings {
    pub quantiles: Vec<f64>,
    /// Posterior predictive draws per observation for CRPS.
    pub predictive_draws: usize,
    /// Posterior draws used (evenly spaced) for mixture quantiles.
    pub max_posterior_draws: usize,
    /// Pooled predictive sample size for QQ quantiles.
    pub qq_pool: usize,
    pub seed: u64,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        Self {
            quantiles: vec![0.9, 0.95, 0.99],
            predictive_draws: 200,
            max_posterior_draws: 400,
            qq_pool: 20_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelScore {
    pub model: String,
    pub family: String,
    pub n_sizes: usize,
    /// `(level, mean pinball loss)` per configured quantile.
    pub pinball: Vec<(f64, f64)>,
    pub crps_size: f64,
    pub crps_count: f64,
    /// `(model quantile, observed)` pairs, both sorted.
    pub qq: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreReport {
    pub models: Vec<ModelScore>,
}

impl ScoreReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<16} {:<16} {:>8}", "model", "family", "n_sizes");
        if let Some(first) = self.models.first() {
            for (q, _) in &first.pinball {
                let _ = write!(out, " {:>14}", format!("pinball_{q}"));
            }
        }
        let _ = writeln!(out, " {:>14} {:>14}", "crps_size", "crps_count");
        for m in &self.models {
            let _ = write!(out, "{:<16} {:<16} {:>8}", m.model, m.family, m.n_sizes);
            for (_, v) in &m.pinball {
                let _ = write!(out, " {v:>14.6e}");
            }
            let _ = writeln!(out, " {:>14.6e} {:>14.6e}", m.crps_size, m.crps_count);
        }
        out
    }

    /// Long-format CSV: `model,family,metric,quantile,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,family,metric,quantile,value\n");
        for m in &self.models {
            for (q, v) in &m.pinball {
                let _ = writeln!(out, "{},{},pinball,{q},{v}", m.model, m.family);
            }
            let _ = writeln!(out, "{},{},crps_size,,{}", m.model, m.family, m.crps_size);
            let _ = writeln!(out, "{},{},crps_count,,{}", m.model, m.family, m.crps_count);
        }
        out
    }
}

pub fn qq_csv(pairs: &[(f64, f64)]) -> String {
    let mut out = String::from("model_quantile,observed\n");
    for (m, o) in pairs {
        let _ = writeln!(out, "{m},{o}");
    }
    out
}

/// Evenly spaced subset of at most `max` states.
fn thin_states(states: &[LatentState<f64>], max: usize) -> Vec<&LatentState<f64>> {
    let d = states.len();
    if d <= max || max == 0 {
        return states.iter().collect();
    }
    (0..max).map(|k| &states[k * d / max]).collect()
}

/// Per-draw size laws of every unit (`laws[draw][unit]`) and count rates.
struct Predictive {
    laws: Vec<Vec<SizeFamily<f64>>>,
    rates: Vec<Vec<f64>>,
}

impl Predictive {
    fn new(states: &[&LatentState<f64>], x: &CovariateMatrix<f64>, config: &ModelConfig) -> Result<Self> {
        let mut laws = Vec::with_capacity(states.len());
        let mut rates = Vec::with_capacity(states.len());
        for s in states {
            let g = s.size_globals(config);
            let eta2 = size_linpred(s, x, config.structure)?;
            laws.push(
                eta2.iter()
                    .enumerate()
                    .map(|(i, e)| {
                        g.law(e.exp())
                            .ok_or_else(|| Error::Contract(format!("invalid size law at unit {i}")))
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
            rates.push(count_linpred(s, x)?.into_iter().map(f64::exp).collect());
        }
        Ok(Self { laws, rates })
    }

    fn unit_laws(&self, unit: usize) -> Vec<SizeFamily<f64>> {
        self.laws.iter().map(|d| d[unit].clone()).collect()
    }
}

fn check_units(held_out: &Inventory<f64>, x: &CovariateMatrix<f64>, n_units: usize) -> Result<()> {
    if held_out.n_units() != x.n() || n_units != x.n() {
        return Err(Error::Contract(format!(
            "unit mismatch: held-out inventory {}, covariates {}, samples {}",
            held_out.n_units(),
            x.n(),
            n_units
        )));
    }
    Ok(())
}

/// Scores one model's posterior draws against a held-out inventory.
pub fn score_states(
    name: &str,
    held_out: &Inventory<f64>,
    states: &[LatentState<f64>],
    x: &CovariateMatrix<f64>,
    config: &ModelConfig,
    settings: &ScoreSettings,
) -> Result<ModelScore> {
    if states.is_empty() {
        return Err(Error::EmptySamples(format!("model {name} has no draws")));
    }
    let n_units = states[0].w1.as_ref().or(states[0].w2.as_ref()).map_or(x.n(), |f| f.w.len());
    check_units(held_out, x, n_units)?;
    for &q in &settings.quantiles {
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::domain("quantile", q, "score quantiles must lie in (0, 1)"));
        }
    }
    let chosen = thin_states(states, settings.max_posterior_draws);
    let pred = Predictive::new(&chosen, x, config)?;
    let mut rng = substream(settings.seed, &format!("score-{name}"));

    let mut pinball = vec![0.0; settings.quantiles.len()];
    let mut crps_size = 0.0;
    let mut crps_count = 0.0;
    let mut n_sizes = 0usize;
    let mut buf = Vec::with_capacity(settings.predictive_draws);
    for unit in 0..x.n() {
        let sizes = held_out.sizes(unit);
        let n_obs = sizes.len() as u64;
        // count CRPS
        buf.clear();
        for _ in 0..settings.predictive_draws {
            let d = rng.random_range(0..pred.rates.len());
            buf.push(poisson_draw(&mut rng, pred.rates[d][unit]));
        }
        crps_count += crps_sample(&buf, n_obs as f64);

        if sizes.is_empty() {
            continue;
        }
        let laws = pred.unit_laws(unit);
        let qs = settings
            .quantiles
            .iter()
            .map(|&q| mixture_quantile(&laws, q))
            .collect::<Result<Vec<_>>>()?;
        for &y in sizes {
            for (slot, (&tau, &qp)) in pinball.iter_mut().zip(settings.quantiles.iter().zip(&qs)) {
                *slot += pinball_loss(y, qp, tau);
            }
            buf.clear();
            for _ in 0..settings.predictive_draws {
                let d = rng.random_range(0..laws.len());
                laws[d].sample_into(&mut rng, 1, &mut buf);
            }
            crps_size += crps_sample(&buf, y);
            n_sizes += 1;
        }
    }
    let denom = n_sizes.max(1) as f64;
    let qq = if n_sizes > 0 {
        qq_from_predictive(held_out, &pred, settings, &mut rng)
    } else {
        Vec::new()
    };
    Ok(ModelScore {
        model: name.to_string(),
        family: config.family.label().to_string(),
        n_sizes,
        pinball: settings
            .quantiles
            .iter()
            .zip(pinball)
            .map(|(&q, v)| (q, if n_sizes > 0 { v / denom } else { f64::NAN }))
            .collect(),
        crps_size: if n_sizes > 0 { crps_size / denom } else { f64::NAN },
        crps_count: crps_count / x.n().max(1) as f64,
        qq,
    })
}

fn poisson_draw(rng: &mut ChaCha8Rng, rate: f64) -> f64 {
    if rate > 0.0 && rate.is_finite() {
        Poisson::new(rate).map_or(0.0, |p| p.sample(rng))
    } else {
        0.0
    }
}

/// Pooled predictive sample: each draw picks an observed event (so units
/// are weighted by their event counts) and a posterior draw.
fn qq_from_predictive(
    inventory: &Inventory<f64>,
    pred: &Predictive,
    settings: &ScoreSettings,
    rng: &mut ChaCha8Rng,
) -> Vec<(f64, f64)> {
    let owners: Vec<usize> = (0..inventory.n_units())
        .flat_map(|u| std::iter::repeat_n(u, inventory.count(u) as usize))
        .collect();
    let mut observed: Vec<f64> = inventory.all_sizes().collect();
    observed.sort_by(f64::total_cmp);
    let mut pool = Vec::with_capacity(settings.qq_pool);
    for _ in 0..settings.qq_pool.max(1) {
        let unit = owners[rng.random_range(0..owners.len())];
        let d = rng.random_range(0..pred.laws.len());
        pred.laws[d][unit].sample_into(rng, 1, &mut pool);
    }
    pool.sort_by(f64::total_cmp);
    let m = observed.len();
    observed
        .into_iter()
        .enumerate()
        .map(|(k, y)| (empirical_quantile(&pool, (k + 1) as f64 / (m + 1) as f64), y))
        .collect()
}

/// QQ pairs of the pooled posterior predictive against observed sizes.
pub fn qq_points(
    inventory: &Inventory<f64>,
    samples: &PosteriorSamples,
    x: &CovariateMatrix<f64>,
    settings: &ScoreSettings,
) -> Result<Vec<(f64, f64)>> {
    check_units(inventory, x, samples.n_units)?;
    if inventory.total_count() == 0 {
        return Err(Error::EmptySamples("QQ points need at least one observed size".into()));
    }
    let states = samples.states()?;
    if states.is_empty() {
        return Err(Error::EmptySamples("posterior samples contain no draws".into()));
    }
    let chosen = thin_states(&states, settings.max_posterior_draws);
    let pred = Predictive::new(&chosen, x, &samples.config)?;
    let mut rng = substream(settings.seed, "qq");
    Ok(qq_from_predictive(inventory, &pred, settings, &mut rng))
}

/// Scores every named model on the same held-out inventory.
pub fn score_models(
    held_out: &Inventory<f64>,
    models: &[(String, &PosteriorSamples)],
    x: &CovariateMatrix<f64>,
    settings: &ScoreSettings,
) -> Result<ScoreReport> {
    let models = models
        .iter()
        .map(|(name, samples)| {
            check_units(held_out, x, samples.n_units)?;
            score_states(name, held_out, &samples.states()?, x, &samples.config, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreReport { models })
}
