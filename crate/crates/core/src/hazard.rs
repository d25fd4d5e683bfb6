//! Posterior hazard products: susceptibility, size exceedance given
//! occurrence, and their combination by Poisson thinning.
//!
//! Hazards are per trigger event (the inventory's implicit period).

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::covariates::CovariateMatrix;
use crate::dist::SizeLaw;
use crate::error::{Error, Result};
use crate::mcmc::PosteriorSamples;
use crate::model::{count_linpred, empirical_quantile, size_linpred, LatentState, ModelConfig};

pub const HAZARD_CSV_HEADER: &str =
    "unit_id,susc_mean,susc_q05,susc_q95,exc_mean,exc_q05,exc_q95,haz_mean,haz_q05,haz_q95,threshold_s";

fn check_s(s: f64) -> Result<()> {
    if s >= 0.0 {
        Ok(())
    } else {
        Err(Error::domain("s", s, "evaluation size must be >= 0"))
    }
}

/// `P(N_i >= 1) = 1 - exp(-lambda_i)` per unit.
pub fn susceptibility(draw: &LatentState<f64>, x: &CovariateMatrix<f64>) -> Result<Vec<f64>> {
    Ok(count_linpred(draw, x)?.into_iter().map(|eta| -(-eta.exp()).exp_m1()).collect())
}

/// `P(A > s | occurrence) = 1 - F_i(s)` per unit.
pub fn exceedance_given_occurrence(
    draw: &LatentState<f64>,
    x: &CovariateMatrix<f64>,
    config: &ModelConfig,
    s: f64,
) -> Result<Vec<f64>> {
    check_s(s)?;
    let globals = draw.size_globals(config);
    if !globals.is_valid() {
        return Err(Error::Contract("draw has invalid size parameters".into()));
    }
    size_linpred(draw, x, config.structure)?
        .into_iter()
        .enumerate()
        .map(|(i, eta)| {
            let law = globals
                .law(eta.exp())
                .ok_or_else(|| Error::Contract(format!("non-finite size scale at unit {i}")))?;
            Ok(law.survival(s).clamp(0.0, 1.0))
        })
        .collect()
}

/// `P(at least one event larger than s) = 1 - exp(-lambda_i (1 - F_i(s)))`.
pub fn combined_hazard(
    draw: &LatentState<f64>,
    x: &CovariateMatrix<f64>,
    config: &ModelConfig,
    s: f64,
) -> Result<Vec<f64>> {
    let exc = exceedance_given_occurrence(draw, x, config, s)?;
    let eta = count_linpred(draw, x)?;
    Ok(eta
        .into_iter()
        .zip(exc)
        .map(|(e, p)| -(-e.exp() * p).exp_m1())
        .collect())
}

/// Mean, median and 5%/95% quantiles over draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q05: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptySamples("no draws to summarize".into()));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(Self {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            median: empirical_quantile(&sorted, 0.5),
            q05: empirical_quantile(&sorted, 0.05),
            q95: empirical_quantile(&sorted, 0.95),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitHazard {
    pub susceptibility: Summary,
    pub exceedance: Summary,
    pub hazard: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardSurface {
    pub threshold_s: f64,
    pub units: Vec<UnitHazard>,
}

impl HazardSurface {
    /// CSV rows keyed by `labels` (or by unit index when absent).
    pub fn to_csv(&self, labels: Option<&[String]>) -> String {
        let mut out = String::from(HAZARD_CSV_HEADER);
        out.push('\n');
        for (i, u) in self.units.iter().enumerate() {
            let id = labels.map_or_else(|| i.to_string(), |l| l[i].clone());
            let (a, b, c) = (u.susceptibility, u.exceedance, u.hazard);
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{},{},{},{},{}",
                a.mean, a.q05, a.q95, b.mean, b.q05, b.q95, c.mean, c.q05, c.q95, self.threshold_s
            );
        }
        out
    }
}

/// Per-unit posterior summaries of the three hazard quantities, computed
/// from per-draw probabilities.
pub fn hazard_surface_from_states(
    states: &[LatentState<f64>],
    x: &CovariateMatrix<f64>,
    config: &ModelConfig,
    s: f64,
) -> Result<HazardSurface> {
    check_s(s)?;
    if states.is_empty() {
        return Err(Error::EmptySamples("hazard surface needs at least one draw".into()));
    }
    let per_draw = states
        .par_iter()
        .map(|d| {
            let susc = susceptibility(d, x)?;
            let exc = exceedance_given_occurrence(d, x, config, s)?;
            let haz = combined_hazard(d, x, config, s)?;
            Ok((susc, exc, haz))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = x.n();
    let column = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>, Vec<f64>)) -> f64| -> Result<Summary> {
        Summary::of(&per_draw.iter().map(pick).collect::<Vec<_>>())
    };
    let units = (0..n)
        .map(|i| {
            Ok(UnitHazard {
                susceptibility: column(&|t| t.0[i])?,
                exceedance: column(&|t| t.1[i])?,
                hazard: column(&|t| t.2[i])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(HazardSurface { threshold_s: s, units })
}

pub fn hazard_surface(samples: &PosteriorSamples, x: &CovariateMatrix<f64>, s: f64) -> Result<HazardSurface> {
    if samples.total_draws() == 0 {
        return Err(Error::EmptySamples("posterior samples contain no draws".into()));
    }
    hazard_surface_from_states(&samples.states()?, x, &samples.config, s)
}
