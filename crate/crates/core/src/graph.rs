//! Slope-unit adjacency graph and intrinsic CAR machinery.
//!
//! The iCAR precision is `tau * Q` with `Q` the binary graph Laplacian; it
//! is never formed explicitly on the fitting path. All pairwise-difference
//! sums run over the canonical edge list.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Eigenvalues of a component Laplacian at or below this are treated as null.
pub const NULL_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeUnitGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    degrees: Vec<usize>,
    adj_offsets: Vec<usize>,
    adj_targets: Vec<usize>,
    components: Vec<Vec<usize>>,
    component_of: Vec<usize>,
    labels: Vec<String>,
}

impl SlopeUnitGraph {
    /// Deduplicates and canonicalizes `edges` (any order, any duplication)
    /// over `n` units labelled `0..n`.
    pub fn build(edges: &[(usize, usize)], n: usize) -> Result<Self> {
        let labels = (0..n).map(|i| i.to_string()).collect();
        Self::build_labelled(edges, labels)
    }

    pub fn build_labelled(edges: &[(usize, usize)], labels: Vec<String>) -> Result<Self> {
        let n = labels.len();
        let mut canon = Vec::with_capacity(edges.len());
        for (k, &(a, b)) in edges.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::Contract(format!(
                    "edge #{k} ({a}, {b}) references a unit outside [0, {n})"
                )));
            }
            if a == b {
                return Err(Error::Contract(format!("edge #{k} is a self-loop on unit {a}")));
            }
            canon.push((a.min(b), a.max(b)));
        }
        canon.sort_unstable();
        canon.dedup();

        let mut degrees = vec![0usize; n];
        for &(a, b) in &canon {
            degrees[a] += 1;
            degrees[b] += 1;
        }
        let mut adj_offsets = vec![0usize; n + 1];
        for i in 0..n {
            adj_offsets[i + 1] = adj_offsets[i] + degrees[i];
        }
        let mut fill = adj_offsets.clone();
        let mut adj_targets = vec![0usize; adj_offsets[n]];
        for &(a, b) in &canon {
            adj_targets[fill[a]] = b;
            fill[a] += 1;
            adj_targets[fill[b]] = a;
            fill[b] += 1;
        }

        // connected components by iterative traversal
        let mut component_of = vec![usize::MAX; n];
        let mut components = Vec::new();
        let mut stack = Vec::new();
        for start in 0..n {
            if component_of[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            component_of[start] = id;
            stack.push(start);
            while let Some(u) = stack.pop() {
                for &v in &adj_targets[adj_offsets[u]..adj_offsets[u + 1]] {
                    if component_of[v] == usize::MAX {
                        component_of[v] = id;
                        members.push(v);
                        stack.push(v);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }

        Ok(Self {
            n,
            edges: canon,
            degrees,
            adj_offsets,
            adj_targets,
            components,
            component_of,
            labels,
        })
    }

    /// Four-neighbour lattice with `rows * cols` units, row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                if c + 1 < cols {
                    edges.push((i, i + 1));
                }
                if r + 1 < rows {
                    edges.push((i, i + cols));
                }
            }
        }
        Self::build(&edges, rows * cols).expect("lattice edges are in range")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adj_targets[self.adj_offsets[i]..self.adj_offsets[i + 1]]
    }

    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn component_of(&self, i: usize) -> usize {
        self.component_of[i]
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Rank of the Laplacian, `n - c`.
    pub fn rank(&self) -> usize {
        self.n - self.components.len()
    }

    pub fn is_isolated(&self, i: usize) -> bool {
        self.degrees[i] == 0
    }

    pub fn isolated_units(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.is_isolated(i)).collect()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Dense binary Laplacian (test oracles and simulation only).
    pub fn dense_laplacian(&self) -> DMatrix<f64> {
        let mut q = DMatrix::zeros(self.n, self.n);
        for &(a, b) in &self.edges {
            q[(a, a)] += 1.0;
            q[(b, b)] += 1.0;
            q[(a, b)] -= 1.0;
            q[(b, a)] -= 1.0;
        }
        q
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len == self.n {
            Ok(())
        } else {
            Err(Error::Contract(format!("field has length {len}, graph has {} units", self.n)))
        }
    }

    /// `sum over edges (w_i - w_j)^2`.
    pub fn icar_quadform<T: Scalar>(&self, w: &[T]) -> Result<T> {
        self.check_len(w.len())?;
        Ok(self.quadform_unchecked(w))
    }

    #[inline]
    pub(crate) fn quadform_unchecked<T: Scalar>(&self, w: &[T]) -> T {
        self.edges
            .iter()
            .map(|&(a, b)| {
                let d = w[a] - w[b];
                d * d
            })
            .sum()
    }

    /// Change in the quadratic form when `w[unit]` moves to `value`.
    #[inline]
    pub(crate) fn quadform_site_delta<T: Scalar>(&self, w: &[T], unit: usize, value: T) -> T {
        let old = w[unit];
        let mut acc = T::zero();
        for &j in self.neighbors(unit) {
            let dn = value - w[j];
            let d0 = old - w[j];
            acc = acc + (dn * dn - d0 * d0);
        }
        acc
    }

    /// Intrinsic CAR log-density without its additive constant:
    /// `((n - c) / 2) log tau - (tau / 2) Q(w)`.
    pub fn icar_logdensity<T: Scalar>(&self, field: &IcarField<T>) -> Result<T> {
        if !(field.tau > T::zero()) || !field.tau.is_finite() {
            return Err(Error::domain("tau", field.tau.to_f64_lossy(), "must be finite and > 0"));
        }
        let q = self.icar_quadform(&field.w)?;
        Ok(self.icar_logdensity_from_quadform(field.tau, q))
    }

    #[inline]
    pub(crate) fn icar_logdensity_from_quadform<T: Scalar>(&self, tau: T, quadform: T) -> T {
        T::c(self.rank() as f64) * T::c(0.5) * tau.ln() - tau * T::c(0.5) * quadform
    }

    /// Subtracts each component's mean; returns the centred copy.
    pub fn center_by_component<T: Scalar>(&self, w: &[T]) -> Result<Vec<T>> {
        self.check_len(w.len())?;
        let mut out = w.to_vec();
        self.center_in_place(&mut out);
        Ok(out)
    }

    /// Centres `w` in place and returns the per-component means removed.
    pub(crate) fn center_in_place<T: Scalar>(&self, w: &mut [T]) -> Vec<T> {
        self.components
            .iter()
            .map(|members| {
                let mean = members.iter().map(|&i| w[i]).sum::<T>() / T::c(members.len() as f64);
                for &i in members {
                    w[i] = w[i] - mean;
                }
                mean
            })
            .collect()
    }

    /// Draw from the intrinsic Gaussian with precision `tau * Q`, restricted
    /// to the per-component sum-to-zero subspace.
    pub fn simulate_icar(&self, tau: f64, seed: u64) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.simulate_icar_with(tau, &mut rng)
    }

    pub fn simulate_icar_with<R: Rng + ?Sized>(&self, tau: f64, rng: &mut R) -> Result<Vec<f64>> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::domain("tau", tau, "must be finite and > 0"));
        }
        if self.n == 0 {
            return Err(Error::Contract("cannot simulate on an empty graph".into()));
        }
        let mut w = vec![0.0; self.n];
        for members in &self.components {
            if members.len() < 2 {
                continue;
            }
            let m = members.len();
            let mut local = vec![usize::MAX; self.n];
            for (k, &i) in members.iter().enumerate() {
                local[i] = k;
            }
            let mut q = DMatrix::<f64>::zeros(m, m);
            for &i in members {
                for &j in self.neighbors(i) {
                    q[(local[i], local[j])] -= 1.0;
                }
                q[(local[i], local[i])] += self.degrees[i] as f64;
            }
            let eig = SymmetricEigen::new(q);
            for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
                if lambda <= NULL_EIGEN_TOL {
                    continue;
                }
                let z: f64 = rng.sample(StandardNormal);
                let scale = z / (tau * lambda).sqrt();
                let v = eig.eigenvectors.column(k);
                for (r, &i) in members.iter().enumerate() {
                    w[i] += scale * v[r];
                }
            }
        }
        self.center_in_place(&mut w);
        Ok(w)
    }
}

/// Latent iCAR effect with its precision.
#[derive(Debug, Clone, PartialEq)]
pub struct IcarField<T> {
    pub w: Vec<T>,
    pub tau: T,
}

impl<T: Scalar> IcarField<T> {
    pub fn zeros(n: usize, tau: T) -> Self {
        Self { w: vec![T::zero(); n], tau }
    }
}
