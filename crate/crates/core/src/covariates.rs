//! Per-unit covariate design with an intercept column and optional
//! count offset.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major `n x p` design. Column 0 is the intercept; the rest are
/// standardized to mean 0 and sample standard deviation 1 unless
/// standardization was disabled.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix<T> {
    n: usize,
    p: usize,
    data: Vec<T>,
    names: Vec<String>,
    means: Vec<T>,
    scales: Vec<T>,
    offset: Option<Vec<T>>,
}

impl<T: Scalar> CovariateMatrix<T> {
    /// Intercept-only design.
    pub fn intercept_only(n: usize) -> Self {
        Self {
            n,
            p: 1,
            data: vec![T::one(); n],
            names: vec!["intercept".into()],
            means: vec![T::zero()],
            scales: vec![T::one()],
            offset: None,
        }
    }

    /// Builds the design from raw named columns (each of length `n`),
    /// prepending the intercept.
    pub fn from_columns(n: usize, columns: Vec<(String, Vec<T>)>, standardize: bool) -> Result<Self> {
        let p = columns.len() + 1;
        let mut names = vec!["intercept".to_string()];
        let mut means = vec![T::zero()];
        let mut scales = vec![T::one()];
        let mut cols = Vec::with_capacity(columns.len());
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::Contract(format!(
                    "covariate `{name}` has {} values, expected {n}",
                    col.len()
                )));
            }
            if let Some(bad) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("covariate `{name}` row {bad} is not finite")));
            }
            let (mean, scale) = if standardize {
                let (m, s) = mean_sd(&col);
                if !(s > T::zero()) {
                    return Err(Error::Contract(format!(
                        "covariate `{name}` has zero variance; cannot standardize"
                    )));
                }
                (m, s)
            } else {
                (T::zero(), T::one())
            };
            names.push(name);
            means.push(mean);
            scales.push(scale);
            cols.push(col);
        }
        let mut data = Vec::with_capacity(n * p);
        for i in 0..n {
            data.push(T::one());
            for (k, col) in cols.iter().enumerate() {
                data.push((col[i] - means[k + 1]) / scales[k + 1]);
            }
        }
        Ok(Self {
            n,
            p,
            data,
            names,
            means,
            scales,
            offset: None,
        })
    }

    /// Attaches a log-offset for the count predictor.
    pub fn with_offset(mut self, offset: Vec<T>) -> Result<Self> {
        if offset.len() != self.n {
            return Err(Error::Contract(format!(
                "offset has {} values, expected {}",
                offset.len(),
                self.n
            )));
        }
        self.offset = Some(offset);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Column means removed during standardization (0 for the intercept).
    pub fn means(&self) -> &[T] {
        &self.means
    }

    pub fn scales(&self) -> &[T] {
        &self.scales
    }

    pub fn offset(&self) -> Option<&[T]> {
        self.offset.as_deref()
    }

    #[inline]
    pub(crate) fn offset_at(&self, i: usize) -> T {
        self.offset.as_ref().map_or(T::zero(), |o| o[i])
    }

    #[inline]
    pub(crate) fn dot_row(&self, i: usize, beta: &[T]) -> T {
        self.row(i).iter().zip(beta).fold(T::zero(), |acc, (&x, &b)| acc + x * b)
    }
}

fn mean_sd<T: Scalar>(v: &[T]) -> (T, T) {
    let n = T::c(v.len() as f64);
    let mean = v.iter().copied().sum::<T>() / n;
    if v.len() < 2 {
        return (mean, T::zero());
    }
    let ss = v.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>();
    (mean, (ss / (n - T::one())).sqrt())
}
