//! Special functions used by the size kernels and priors.

use crate::scalar::Scalar;

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

const MAX_ITER: usize = 1000;

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma<T: Scalar>(x: T) -> T {
    if x < T::c(0.5) {
        // reflection
        let pi = T::PI();
        return (pi / (pi * x).sin()).abs().ln() - ln_gamma(T::one() - x);
    }
    let x = x - T::one();
    let mut acc = T::c(LANCZOS_COEF[0]);
    for (i, &c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        acc = acc + T::c(c) / (x + T::c(i as f64));
    }
    let t = x + T::c(LANCZOS_G + 0.5);
    T::c(0.5) * (T::c(2.0) * T::PI()).ln() + (x + T::c(0.5)) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p<T: Scalar>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    if x.is_infinite() {
        return T::one();
    }
    if x < a + T::one() {
        gamma_series(a, x)
    } else {
        T::one() - gamma_cont_frac(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q<T: Scalar>(a: T, x: T) -> T {
    if x <= T::zero() {
        return T::one();
    }
    if x.is_infinite() {
        return T::zero();
    }
    if x < a + T::one() {
        T::one() - gamma_series(a, x)
    } else {
        gamma_cont_frac(a, x)
    }
}

fn gamma_series<T: Scalar>(a: T, x: T) -> T {
    let mut ap = a;
    let mut sum = T::one() / a;
    let mut del = sum;
    for _ in 0..MAX_ITER {
        ap = ap + T::one();
        del = del * x / ap;
        sum = sum + del;
        if del.abs() < sum.abs() * T::epsilon() {
            break;
        }
    }
    (sum.ln() - x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_cont_frac<T: Scalar>(a: T, x: T) -> T {
    let tiny = T::min_positive_value() / T::epsilon();
    let mut b = x + T::one() - a;
    let mut c = T::one() / tiny;
    let mut d = T::one() / b;
    let mut h = d;
    for i in 1..MAX_ITER {
        let an = -T::c(i as f64) * (T::c(i as f64) - a);
        b = b + T::c(2.0);
        d = an * d + b;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + an / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = T::one() / d;
        let del = d * c;
        h = h * del;
        if (del - T::one()).abs() < T::epsilon() {
            break;
        }
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * h
}

/// Gamma(shape, rate) log-density; `-inf` outside `(0, inf)`.
pub fn gamma_logpdf<T: Scalar>(x: T, shape: T, rate: T) -> T {
    if x <= T::zero() || !x.is_finite() {
        return T::neg_infinity();
    }
    shape * rate.ln() + (shape - T::one()) * x.ln() - rate * x - ln_gamma(shape)
}

/// Gamma(shape, rate) distribution function.
pub fn gamma_cdf<T: Scalar>(x: T, shape: T, rate: T) -> T {
    gamma_p(shape, rate * x)
}

/// Standard normal distribution function, via `erfc(z) = Q(1/2, z^2)`.
pub fn std_normal_cdf<T: Scalar>(z: T) -> T {
    let half = T::c(0.5);
    let q = gamma_q(half, z * z * half);
    if z >= T::zero() {
        T::one() - half * q
    } else {
        half * q
    }
}

/// Bracketed bisection for a nondecreasing `f` with `f(lo) <= target <= f(hi)`.
///
/// Stops when the bracket is below `rel_tol` relative to its upper end (or
/// absolute for brackets touching zero).
pub fn bisect_increasing<T, F>(mut f: F, target: T, mut lo: T, mut hi: T, rel_tol: T) -> T
where
    T: Scalar,
    F: FnMut(T) -> T,
{
    for _ in 0..400 {
        let mid = lo + (hi - lo) * T::c(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= rel_tol * hi.abs().max(T::min_positive_value()) {
            break;
        }
    }
    lo + (hi - lo) * T::c(0.5)
}
