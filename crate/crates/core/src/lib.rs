//! Joint Bayesian model of areal hazard event counts and sizes.
//!
//! Counts per slope unit follow a Poisson law, event sizes follow one of
//! three extreme-value-motivated laws (generalized Pareto, power extended
//! GP, or a gamma bulk spliced with a GP tail), and both are linked to
//! covariates and intrinsic-CAR spatial effects on the slope-unit graph.
//! Inference is by an adaptive Metropolis-within-Gibbs sampler; posterior
//! draws are summarized into susceptibility, size-exceedance and combined
//! hazard maps.

pub mod cli;
pub mod covariates;
pub mod diagnostics;
pub mod dist;
pub mod error;
pub mod graph;
pub mod hazard;
pub mod io;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod special;

pub use covariates::CovariateMatrix;
pub use dist::{poisson_logpmf, size_sample, EgpParams, FamilyTag, GpParams, SizeFamily, SizeLaw, SplitParams};
pub use error::{Error, Result};
pub use graph::{IcarField, SlopeUnitGraph};
pub use model::{
    count_linpred, logposterior, logprior, loglik, simulate_inventory, size_linpred, Inventory, LatentState,
    ModelConfig, Priors, Structure,
};
pub use scalar::Scalar;

pub type Gp = GpParams<f64>;
pub type Egp = EgpParams<f64>;
pub type Split = SplitParams<f64>;
pub type Family = SizeFamily<f64>;
pub type Field = IcarField<f64>;
pub type Covariates = CovariateMatrix<f64>;
pub type Events = Inventory<f64>;
pub type State = LatentState<f64>;

pub type Gp32 = GpParams<f32>;
pub type Egp32 = EgpParams<f32>;
pub type State32 = LatentState<f32>;
