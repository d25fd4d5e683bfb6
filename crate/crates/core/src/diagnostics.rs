//! Convergence diagnostics: rank-normalized split-R̂ and bulk ESS.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::mcmc::PosteriorSamples;

/// Minimum retained draws per chain.
pub const MIN_DRAWS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostic {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// `None` when only one chain is available.
    pub rhat: Option<f64>,
    pub ess: f64,
    /// Monte Carlo standard error of the mean, `sd / sqrt(ess)`.
    pub mcse: f64,
    /// Every draw identical: R̂ reported as 1, ESS as the draw count.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub n_chains: usize,
    pub draws_per_chain: usize,
    pub params: Vec<ParamDiagnostic>,
    /// Post-burn-in acceptance per block, averaged over chains.
    pub acceptance: Vec<(String, f64)>,
    pub notice: Option<String>,
}

impl Diagnostics {
    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).reduce(f64::max)
    }

    pub fn min_ess(&self) -> f64 {
        self.params.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min)
    }

    pub fn get(&self, name: &str) -> Option<&ParamDiagnostic> {
        self.params.iter().find(|p| p.name == name)
    }
}

pub fn diagnostics(samples: &PosteriorSamples) -> Result<Diagnostics> {
    let n_chains = samples.chains.len();
    if n_chains == 0 {
        return Err(Error::Diagnostics("no chains".into()));
    }
    let draws_per_chain = samples.chains.iter().map(|c| c.draws.len()).min().unwrap_or(0);
    if draws_per_chain < MIN_DRAWS {
        return Err(Error::Diagnostics(format!(
            "need at least {MIN_DRAWS} retained draws per chain, have {draws_per_chain}"
        )));
    }
    if samples.chains.iter().any(|c| c.draws.len() != draws_per_chain) {
        return Err(Error::Diagnostics("chains have unequal lengths".into()));
    }
    let params = (0..samples.names.len())
        .map(|j| summarize(&samples.names[j], &samples.traces(j)))
        .collect();

    let mut acceptance: Vec<(String, f64)> = Vec::new();
    for c in &samples.chains {
        for (name, rate) in &c.acceptance {
            match acceptance.iter_mut().find(|(n, _)| n == name) {
                Some(slot) => slot.1 += rate / n_chains as f64,
                None => acceptance.push((name.clone(), rate / n_chains as f64)),
            }
        }
    }
    Ok(Diagnostics {
        n_chains,
        draws_per_chain,
        params,
        acceptance,
        notice: (n_chains < 2).then(|| "single chain: R-hat omitted".to_string()),
    })
}

/// Diagnostics for one scalar given its per-chain traces.
pub fn summarize(name: &str, chains: &[Vec<f64>]) -> ParamDiagnostic {
    let all: Vec<f64> = chains.iter().flatten().copied().collect();
    let total = all.len() as f64;
    let mean = all.iter().sum::<f64>() / total;
    let sd = if all.len() > 1 {
        (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (total - 1.0)).sqrt()
    } else {
        0.0
    };
    let degenerate = all.iter().all(|&x| x == all[0]);
    let (rhat, ess) = if degenerate {
        ((chains.len() > 1).then_some(1.0), total)
    } else {
        let rhat = (chains.len() > 1).then(|| split_rhat(chains));
        (rhat, ess_bulk(chains))
    };
    ParamDiagnostic {
        name: name.to_string(),
        mean,
        sd,
        rhat,
        ess,
        mcse: sd / ess.sqrt(),
        degenerate,
    }
}

/// Rank-normalized split-R̂: the larger of the bulk and folded versions,
/// floored at 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let split = split_chains(chains);
    let bulk = rhat_basic(&rank_normalize(&split));
    let mut pooled: Vec<f64> = split.iter().flatten().copied().collect();
    let med = median(&mut pooled);
    let folded: Vec<Vec<f64>> = split
        .iter()
        .map(|c| c.iter().map(|x| (x - med).abs()).collect())
        .collect();
    let tail = rhat_basic(&rank_normalize(&folded));
    let r = bulk.max(tail);
    if r.is_nan() {
        f64::INFINITY
    } else {
        r.max(1.0)
    }
}

/// Bulk effective sample size on rank-normalized split chains, capped at
/// the number of draws.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    let total: usize = chains.iter().map(Vec::len).sum();
    let z = rank_normalize(&split_chains(chains));
    let ess = ess_basic(&z);
    if ess.is_finite() {
        ess.clamp(f64::MIN_POSITIVE, total as f64)
    } else {
        total as f64
    }
}

fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Replaces each value by the normal score of its pooled rank (ties share
/// their average rank).
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(f64, usize, usize)> = chains
        .iter()
        .enumerate()
        .flat_map(|(c, v)| v.iter().enumerate().map(move |(i, &x)| (x, c, i)))
        .collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len() as f64;
    let normal = Normal::standard();
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && idx[end].0 == idx[start].0 {
            end += 1;
        }
        let rank = 0.5 * ((start + 1) + end) as f64;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &idx[start..end] {
            out[c][i] = z;
        }
        start = end;
    }
    out
}

fn chain_moments(c: &[f64]) -> (f64, f64) {
    let n = c.len() as f64;
    let m = c.iter().sum::<f64>() / n;
    let v = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len() as f64;
    let n = chains[0].len() as f64;
    let moments: Vec<(f64, f64)> = chains.iter().map(|c| chain_moments(c)).collect();
    let w = moments.iter().map(|p| p.1).sum::<f64>() / m;
    let grand = moments.iter().map(|p| p.0).sum::<f64>() / m;
    let b_over_n = moments.iter().map(|p| (p.0 - grand).powi(2)).sum::<f64>() / (m - 1.0);
    let var_plus = (n - 1.0) / n * w + b_over_n;
    (var_plus / w).sqrt()
}

fn autocov(c: &[f64], mean: f64, lag: usize) -> f64 {
    let n = c.len();
    (0..n - lag).map(|i| (c[i] - mean) * (c[i + lag] - mean)).sum::<f64>() / n as f64
}

/// Multi-chain ESS with Geyer's initial positive and monotone sequence
/// estimators; autocovariances are computed lazily, lag by lag.
fn ess_basic(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return (m * n) as f64;
    }
    let moments: Vec<(f64, f64)> = chains.iter().map(|c| chain_moments(c)).collect();
    let mean_var = moments.iter().map(|p| p.1).sum::<f64>() / m as f64;
    let grand = moments.iter().map(|p| p.0).sum::<f64>() / m as f64;
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += moments.iter().map(|p| (p.0 - grand).powi(2)).sum::<f64>() / (m as f64 - 1.0);
    }
    let acov_mean = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&moments)
            .map(|(c, &(mu, _))| autocov(c, mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let rho_at = |lag: usize| 1.0 - (mean_var - acov_mean(lag)) / var_plus;

    let mut rho = vec![0.0; n + 2];
    rho[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho_at(1);
    rho[1] = odd;
    let mut t = 1;
    while t + 5 < n && even + odd > 0.0 {
        even = rho_at(t + 1);
        odd = rho_at(t + 2);
        if even + odd >= 0.0 {
            rho[t + 1] = even;
            rho[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 4 <= max_t {
        if rho[t + 1] + rho[t + 2] > rho[t - 1] + rho[t] {
            rho[t + 1] = 0.5 * (rho[t - 1] + rho[t]);
            rho[t + 2] = rho[t + 1];
        }
        t += 2;
    }
    let draws = (m * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t + 1]).max(1.0 / draws.log10());
    draws / tau
}
