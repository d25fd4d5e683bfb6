//! Size laws (GP, power eGP, spliced gamma + GP) and the Poisson count law.
//!
//! Densities return `-inf` outside their support rather than an error so a
//! sampler can reject such proposals without special casing.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special::{bisect_increasing, gamma_cdf, gamma_logpdf, gamma_p, ln_gamma};

/// Below this |xi| the GP uses its series expansion around the exponential.
pub const XI_EXP_SWITCH: f64 = 1e-8;

/// Common interface of the three size laws.
pub trait SizeLaw<T: Scalar> {
    fn cdf(&self, x: T) -> T;

    fn logpdf(&self, x: T) -> T;

    /// Inverse distribution function on `[0, 1)`.
    fn quantile(&self, prob: T) -> Result<T>;

    fn survival(&self, x: T) -> T {
        T::one() - self.cdf(x)
    }

    /// Inverse-CDF draws.
    fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, out: &mut Vec<T>) {
        out.reserve(n);
        for _ in 0..n {
            let u = uniform_open_right::<T, R>(rng);
            out.push(self.quantile(u).expect("uniform draw lies in [0, 1)"));
        }
    }
}

fn uniform_open_right<T: Scalar, R: Rng + ?Sized>(rng: &mut R) -> T {
    let u = T::c(rng.random::<f64>());
    if u >= T::one() {
        T::one() - T::epsilon()
    } else {
        u
    }
}

fn check_prob<T: Scalar>(prob: T) -> Result<()> {
    if prob >= T::zero() && prob < T::one() {
        Ok(())
    } else {
        Err(Error::domain("prob", prob.to_f64_lossy(), "must lie in [0, 1)"))
    }
}

/// Generalized Pareto law with scale `sigma` and shape `xi`, location 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpParams<T> {
    sigma: T,
    xi: T,
}

impl<T: Scalar> GpParams<T> {
    pub fn new(sigma: T, xi: T) -> Result<Self> {
        if !(sigma > T::zero()) || !sigma.is_finite() {
            return Err(Error::domain("sigma", sigma.to_f64_lossy(), "must be finite and > 0"));
        }
        if !xi.is_finite() {
            return Err(Error::domain("xi", xi.to_f64_lossy(), "must be finite"));
        }
        Ok(Self { sigma, xi })
    }

    /// Skips validation; callers must guarantee `sigma > 0` and finite `xi`.
    #[inline]
    pub fn new_unchecked(sigma: T, xi: T) -> Self {
        Self { sigma, xi }
    }

    pub fn sigma(&self) -> T {
        self.sigma
    }

    pub fn xi(&self) -> T {
        self.xi
    }

    /// Upper end of the support (`inf` when `xi >= 0`).
    pub fn upper_endpoint(&self) -> T {
        if self.xi < T::zero() {
            -self.sigma / self.xi
        } else {
            T::infinity()
        }
    }

    #[inline]
    fn small_xi(&self) -> bool {
        self.xi.abs() < T::c(XI_EXP_SWITCH)
    }

    /// `(log1p(xi z), H(z))` with `H = log1p(xi z) / xi`, or `None` when `z`
    /// lies beyond the upper endpoint.
    #[inline]
    fn log_terms(&self, z: T) -> Option<(T, T)> {
        let xz = self.xi * z;
        if xz <= -T::one() {
            return None;
        }
        let l = xz.ln_1p();
        let h = if self.small_xi() {
            // z - xi z^2 / 2 + xi^2 z^3 / 3
            z * (T::one() - xz * T::c(0.5) + xz * xz / T::c(3.0))
        } else {
            l / self.xi
        };
        Some((l, h))
    }

    /// `log F(x)`; used by the eGP power family.
    #[inline]
    pub(crate) fn log_cdf(&self, x: T) -> T {
        if x <= T::zero() {
            return T::neg_infinity();
        }
        match self.log_terms(x / self.sigma) {
            Some((_, h)) => (-(-h).exp_m1()).ln(),
            None => T::zero(),
        }
    }
}

impl<T: Scalar> SizeLaw<T> for GpParams<T> {
    fn cdf(&self, x: T) -> T {
        if x <= T::zero() {
            return T::zero();
        }
        match self.log_terms(x / self.sigma) {
            Some((_, h)) => (-(-h).exp_m1()).max(T::zero()).min(T::one()),
            None => T::one(),
        }
    }

    fn logpdf(&self, x: T) -> T {
        if x < T::zero() || x.is_nan() {
            return T::neg_infinity();
        }
        match self.log_terms(x / self.sigma) {
            // log(1/sigma) - (1/xi + 1) log1p(xi z)
            Some((l, h)) if x.is_finite() => -self.sigma.ln() - h - l,
            _ => T::neg_infinity(),
        }
    }

    fn quantile(&self, prob: T) -> Result<T> {
        check_prob(prob)?;
        let h = -(-prob).ln_1p();
        let x = if self.small_xi() {
            let xh = self.xi * h;
            self.sigma * h * (T::one() + xh * T::c(0.5) + xh * xh / T::c(6.0))
        } else {
            self.sigma * (self.xi * h).exp_m1() / self.xi
        };
        Ok(x.max(T::zero()))
    }
}

/// Power-of-GP extended generalized Pareto law, `F(x) = G(x; sigma, xi)^kappa`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgpParams<T> {
    gp: GpParams<T>,
    kappa: T,
}

impl<T: Scalar> EgpParams<T> {
    pub fn new(sigma: T, xi: T, kappa: T) -> Result<Self> {
        let gp = GpParams::new(sigma, xi)?;
        if !(kappa > T::zero()) || !kappa.is_finite() {
            return Err(Error::domain("kappa", kappa.to_f64_lossy(), "must be finite and > 0"));
        }
        Ok(Self { gp, kappa })
    }

    #[inline]
    pub fn new_unchecked(sigma: T, xi: T, kappa: T) -> Self {
        Self {
            gp: GpParams::new_unchecked(sigma, xi),
            kappa,
        }
    }

    pub fn sigma(&self) -> T {
        self.gp.sigma
    }

    pub fn xi(&self) -> T {
        self.gp.xi
    }

    pub fn kappa(&self) -> T {
        self.kappa
    }

    pub fn gp(&self) -> &GpParams<T> {
        &self.gp
    }
}

impl<T: Scalar> SizeLaw<T> for EgpParams<T> {
    fn cdf(&self, x: T) -> T {
        if x <= T::zero() {
            return T::zero();
        }
        if self.kappa == T::one() {
            return self.gp.cdf(x);
        }
        (self.kappa * self.gp.log_cdf(x)).exp().min(T::one())
    }

    fn logpdf(&self, x: T) -> T {
        let base = self.gp.logpdf(x);
        if base == T::neg_infinity() || self.kappa == T::one() {
            return base;
        }
        let log_f = self.gp.log_cdf(x);
        self.kappa.ln() + (self.kappa - T::one()) * log_f + base
    }

    fn quantile(&self, prob: T) -> Result<T> {
        check_prob(prob)?;
        if prob == T::zero() {
            return Ok(T::zero());
        }
        let p = if self.kappa == T::one() {
            prob
        } else {
            (prob.ln() / self.kappa).exp()
        };
        // p < 1 holds for prob < 1 up to rounding at the top end.
        self.gp.quantile(p.min(T::one() - T::epsilon()))
    }
}

/// Gamma bulk truncated at `threshold`, spliced with a GP tail above it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitParams<T> {
    bulk_shape: T,
    bulk_rate: T,
    threshold: T,
    tail_weight: T,
    tail: GpParams<T>,
    // log F_gamma(threshold)
    log_bulk_mass: T,
}

impl<T: Scalar> SplitParams<T> {
    pub fn new(bulk_shape: T, bulk_rate: T, threshold: T, tail_weight: T, tail: GpParams<T>) -> Result<Self> {
        let pos = |name, v: T| {
            if v > T::zero() && v.is_finite() {
                Ok(())
            } else {
                Err(Error::domain(name, v.to_f64_lossy(), "must be finite and > 0"))
            }
        };
        pos("bulk_shape", bulk_shape)?;
        pos("bulk_rate", bulk_rate)?;
        pos("threshold", threshold)?;
        if !(tail_weight > T::zero() && tail_weight < T::one()) {
            return Err(Error::domain("tail_weight", tail_weight.to_f64_lossy(), "must lie in (0, 1)"));
        }
        let mass = gamma_p(bulk_shape, bulk_rate * threshold);
        if !(mass > T::zero()) {
            return Err(Error::domain(
                "threshold",
                threshold.to_f64_lossy(),
                "gamma bulk carries no mass below the threshold",
            ));
        }
        Ok(Self::new_unchecked(bulk_shape, bulk_rate, threshold, tail_weight, tail))
    }

    #[inline]
    pub fn new_unchecked(bulk_shape: T, bulk_rate: T, threshold: T, tail_weight: T, tail: GpParams<T>) -> Self {
        let log_bulk_mass = gamma_p(bulk_shape, bulk_rate * threshold).ln();
        Self {
            bulk_shape,
            bulk_rate,
            threshold,
            tail_weight,
            tail,
            log_bulk_mass,
        }
    }

    pub fn bulk_shape(&self) -> T {
        self.bulk_shape
    }

    pub fn bulk_rate(&self) -> T {
        self.bulk_rate
    }

    pub fn threshold(&self) -> T {
        self.threshold
    }

    pub fn tail_weight(&self) -> T {
        self.tail_weight
    }

    pub fn tail(&self) -> &GpParams<T> {
        &self.tail
    }

    fn bulk_cdf_truncated(&self, x: T) -> T {
        (gamma_cdf(x, self.bulk_shape, self.bulk_rate).ln() - self.log_bulk_mass)
            .exp()
            .min(T::one())
    }
}

impl<T: Scalar> SizeLaw<T> for SplitParams<T> {
    fn cdf(&self, x: T) -> T {
        if x <= T::zero() {
            return T::zero();
        }
        let bulk_w = T::one() - self.tail_weight;
        if x <= self.threshold {
            bulk_w * self.bulk_cdf_truncated(x)
        } else {
            (bulk_w + self.tail_weight * self.tail.cdf(x - self.threshold)).min(T::one())
        }
    }

    fn logpdf(&self, x: T) -> T {
        if !(x > T::zero()) {
            return T::neg_infinity();
        }
        if x <= self.threshold {
            (-self.tail_weight).ln_1p() + gamma_logpdf(x, self.bulk_shape, self.bulk_rate) - self.log_bulk_mass
        } else {
            self.tail_weight.ln() + self.tail.logpdf(x - self.threshold)
        }
    }

    fn quantile(&self, prob: T) -> Result<T> {
        check_prob(prob)?;
        if prob == T::zero() {
            return Ok(T::zero());
        }
        let bulk_w = T::one() - self.tail_weight;
        if prob < bulk_w {
            let target = prob / bulk_w;
            let x = bisect_increasing(
                |x| self.bulk_cdf_truncated(x),
                target,
                T::zero(),
                self.threshold,
                T::epsilon() * T::c(4.0),
            );
            Ok(x)
        } else {
            let p_tail = ((prob - bulk_w) / self.tail_weight).min(T::one() - T::epsilon());
            Ok(self.threshold + self.tail.quantile(p_tail.max(T::zero()))?)
        }
    }
}

/// Tag of a size family; the labels are what output metadata records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FamilyTag {
    Gp,
    Egp,
    Split,
}

impl FamilyTag {
    pub fn label(&self) -> &'static str {
        match self {
            FamilyTag::Gp => "gp",
            FamilyTag::Egp => "egp-power",
            FamilyTag::Split => "split-gamma-gp",
        }
    }

    /// Short name used for directory layout.
    pub fn short(&self) -> &'static str {
        match self {
            FamilyTag::Gp => "gp",
            FamilyTag::Egp => "egp",
            FamilyTag::Split => "split",
        }
    }
}

impl fmt::Display for FamilyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for FamilyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gp" => Ok(FamilyTag::Gp),
            "egp" | "egp-power" => Ok(FamilyTag::Egp),
            "split" | "split-gamma-gp" => Ok(FamilyTag::Split),
            other => Err(Error::Config(format!("unknown size family `{other}`"))),
        }
    }
}

/// One size law with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SizeFamily<T> {
    Gp(GpParams<T>),
    Egp(EgpParams<T>),
    Split(SplitParams<T>),
}

impl<T: Scalar> SizeFamily<T> {
    pub fn tag(&self) -> FamilyTag {
        match self {
            SizeFamily::Gp(_) => FamilyTag::Gp,
            SizeFamily::Egp(_) => FamilyTag::Egp,
            SizeFamily::Split(_) => FamilyTag::Split,
        }
    }
}

impl<T: Scalar> SizeLaw<T> for SizeFamily<T> {
    #[inline]
    fn cdf(&self, x: T) -> T {
        match self {
            SizeFamily::Gp(p) => p.cdf(x),
            SizeFamily::Egp(p) => p.cdf(x),
            SizeFamily::Split(p) => p.cdf(x),
        }
    }

    #[inline]
    fn logpdf(&self, x: T) -> T {
        match self {
            SizeFamily::Gp(p) => p.logpdf(x),
            SizeFamily::Egp(p) => p.logpdf(x),
            SizeFamily::Split(p) => p.logpdf(x),
        }
    }

    fn quantile(&self, prob: T) -> Result<T> {
        match self {
            SizeFamily::Gp(p) => p.quantile(prob),
            SizeFamily::Egp(p) => p.quantile(prob),
            SizeFamily::Split(p) => p.quantile(prob),
        }
    }
}

/// `n` inverse-CDF draws from `fam`, deterministic in `seed`.
pub fn size_sample<T: Scalar>(n: usize, fam: &SizeFamily<T>, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    fam.sample_into(&mut rng, n, &mut out);
    out
}

/// Poisson log-probability of `k` events at rate `lambda > 0`.
pub fn poisson_logpmf<T: Scalar>(k: u64, lambda: T) -> Result<T> {
    if !(lambda > T::zero()) || !lambda.is_finite() {
        return Err(Error::domain("lambda", lambda.to_f64_lossy(), "must be finite and > 0"));
    }
    Ok(poisson_logpmf_unchecked(k, lambda))
}

#[inline]
pub(crate) fn poisson_logpmf_unchecked<T: Scalar>(k: u64, lambda: T) -> T {
    let kf = T::c(k as f64);
    if k == 0 {
        -lambda
    } else {
        kf * lambda.ln() - lambda - ln_gamma(kf + T::one())
    }
}

/// Same as [`poisson_logpmf_unchecked`] with the rate given on the log scale.
#[inline]
pub(crate) fn poisson_logpmf_log_rate<T: Scalar>(k: u64, log_rate: T) -> T {
    let lambda = log_rate.exp();
    if k == 0 {
        -lambda
    } else {
        let kf = T::c(k as f64);
        kf * log_rate - lambda - ln_gamma(kf + T::one())
    }
}
