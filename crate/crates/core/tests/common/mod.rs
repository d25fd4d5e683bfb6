//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

pub mod checks;

use hazmark::{CovariateMatrix, FamilyTag, Inventory, LatentState, ModelConfig, SlopeUnitGraph, Structure};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Gamma};
use statrs::function::gamma::{gamma_lr, ln_gamma};

// ---------------------------------------------------------------------------
// Quadrature
// ---------------------------------------------------------------------------

/// Tanh-sinh quadrature on `[a, b]`, refined until two successive levels
/// agree to `tol` (relative to the running estimate). Endpoint
/// singularities are handled natively.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let pi2 = std::f64::consts::FRAC_PI_2;
    let node = |t: f64| -> f64 {
        let s = pi2 * t.sinh();
        let c = s.cosh();
        // distance from the nearer endpoint, computed without cancellation
        let u = 1.0 / (s.abs().exp() * c);
        let w = pi2 * t.cosh() / (c * c);
        if w < 1e-300 {
            return 0.0;
        }
        let x = if t >= 0.0 { b - half * u } else { a + half * u };
        if x <= a || x >= b {
            return 0.0;
        }
        let v = f(x);
        if v.is_finite() {
            w * v
        } else {
            0.0
        }
    };
    let t_max = 6.5;
    let mut h = 1.0;
    let mut sum = node(0.0);
    let mut k = 1.0;
    while k * h <= t_max {
        sum += node(k * h) + node(-k * h);
        k += 1.0;
    }
    let mut estimate = sum * h * half;
    for _ in 0..12 {
        h *= 0.5;
        let mut t = h;
        while t <= t_max {
            sum += node(t) + node(-t);
            t += 2.0 * h;
        }
        let next = sum * h * half;
        if (next - estimate).abs() <= tol * next.abs().max(1e-300) {
            return next;
        }
        estimate = next;
    }
    estimate
}

/// Integral over `[a, inf)` via `x = a + scale * t / (1 - t)`.
pub fn tanh_sinh_to_inf(f: impl Fn(f64) -> f64, a: f64, scale: f64, tol: f64) -> f64 {
    tanh_sinh(
        |t| {
            let d = 1.0 - t;
            scale * f(a + scale * t / d) / (d * d)
        },
        0.0,
        1.0,
        tol,
    )
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

/// Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

// ---------------------------------------------------------------------------
// Graph oracles
// ---------------------------------------------------------------------------

/// Random edge list on `n` nodes, possibly with duplicates and reversed
/// pairs.
pub fn random_edges(rng: &mut ChaCha8Rng, n: usize, density: f64) -> Vec<(usize, usize)> {
    let mut e = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random::<f64>() < density / 2.0 {
                e.push((i, j));
            }
        }
    }
    e
}

/// Dense Laplacian straight from an edge list (duplicates collapsed).
pub fn laplacian(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut adj = DMatrix::<f64>::zeros(n, n);
    for &(i, j) in edges {
        adj[(i, j)] = 1.0;
        adj[(j, i)] = 1.0;
    }
    let mut q = -adj.clone();
    for i in 0..n {
        q[(i, i)] = adj.row(i).sum();
    }
    q
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix, dropping
/// eigenvalues at or below `tol`.
pub fn pinv_sym(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let l = eig.eigenvalues[k];
        if l > tol {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / l;
        }
    }
    out
}

pub fn nonzero_eigenvalues(m: &DMatrix<f64>, tol: f64) -> usize {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().filter(|&&l| l > tol).count()
}

/// Connected-component count by union-find.
pub fn component_count(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut y = x;
        while p[y] != r {
            let next = p[y];
            p[y] = r;
            y = next;
        }
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}

// ---------------------------------------------------------------------------
// Likelihood oracle (closed forms, no shared code with the library)
// ---------------------------------------------------------------------------

pub fn gp_logpdf_naive(x: f64, sigma: f64, xi: f64) -> f64 {
    if x < 0.0 {
        return f64::NEG_INFINITY;
    }
    if xi == 0.0 {
        return -sigma.ln() - x / sigma;
    }
    let z = 1.0 + xi * x / sigma;
    if z <= 0.0 {
        return f64::NEG_INFINITY;
    }
    -sigma.ln() - (1.0 / xi + 1.0) * z.ln()
}

pub fn gp_cdf_naive(x: f64, sigma: f64, xi: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if xi == 0.0 {
        return 1.0 - (-x / sigma).exp();
    }
    let z = 1.0 + xi * x / sigma;
    if z <= 0.0 {
        return 1.0;
    }
    // 1 - z^(-1/xi), written to keep relative accuracy for tiny x
    -(-(xi * x / sigma).ln_1p() / xi).exp_m1()
}

pub fn egp_logpdf_naive(x: f64, sigma: f64, xi: f64, kappa: f64) -> f64 {
    kappa.ln() + (kappa - 1.0) * gp_cdf_naive(x, sigma, xi).ln() + gp_logpdf_naive(x, sigma, xi)
}

pub struct SplitNaive {
    pub shape: f64,
    pub rate: f64,
    pub u: f64,
    pub weight: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl SplitNaive {
    pub fn logpdf(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if x <= self.u {
            let g = Gamma::new(self.shape, self.rate).unwrap();
            (1.0 - self.weight).ln() + g.ln_pdf(x) - gamma_lr(self.shape, self.rate * self.u).ln()
        } else {
            self.weight.ln() + gp_logpdf_naive(x - self.u, self.sigma, self.xi)
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.u {
            let g = Gamma::new(self.shape, self.rate).unwrap();
            (1.0 - self.weight) * g.cdf(x) / g.cdf(self.u)
        } else {
            1.0 - self.weight + self.weight * gp_cdf_naive(x - self.u, self.sigma, self.xi)
        }
    }
}

pub fn poisson_logpmf_naive(k: u64, lambda: f64) -> f64 {
    k as f64 * lambda.ln() - lambda - ln_gamma(k as f64 + 1.0)
}

/// Per-observation scalar loop over units and sizes.
pub fn loglik_naive(
    inv: &Inventory<f64>,
    s: &LatentState<f64>,
    x: &CovariateMatrix<f64>,
    cfg: &ModelConfig,
) -> f64 {
    let mut total = 0.0;
    for i in 0..x.n() {
        let row = x.row(i);
        let mut eta1 = 0.0;
        let mut eta2 = 0.0;
        for k in 0..row.len() {
            eta1 += row[k] * s.beta_count[k];
            eta2 += row[k] * s.beta_size[k];
        }
        if let Some(o) = x.offset() {
            eta1 += o[i];
        }
        if let Some(f) = &s.w1 {
            eta1 += f.w[i];
            if matches!(cfg.structure, Structure::Shared | Structure::SharedPlus) {
                eta2 += s.gamma * f.w[i];
            }
        }
        if let Some(f) = &s.w2 {
            eta2 += f.w[i];
        }
        total += poisson_logpmf_naive(inv.count(i), eta1.exp());
        let sigma = eta2.exp();
        for &a in inv.sizes(i) {
            total += match cfg.family {
                FamilyTag::Gp => gp_logpdf_naive(a, sigma, s.xi),
                FamilyTag::Egp => egp_logpdf_naive(a, sigma, s.xi, s.kappa.unwrap()),
                FamilyTag::Split => {
                    let e = s.split.unwrap();
                    SplitNaive {
                        shape: e.bulk_shape,
                        rate: e.bulk_rate,
                        u: cfg.threshold.unwrap(),
                        weight: e.tail_weight,
                        sigma,
                        xi: s.xi,
                    }
                    .logpdf(a)
                }
            };
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random covariates (already standardized) with `p - 1` columns.
pub fn random_covariates(rng: &mut ChaCha8Rng, n: usize, p: usize) -> CovariateMatrix<f64> {
    if p <= 1 {
        return CovariateMatrix::intercept_only(n);
    }
    let cols = (1..p)
        .map(|k| (format!("x{k}"), (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()))
        .collect();
    CovariateMatrix::from_columns(n, cols, true).unwrap()
}

/// Random valid state for `cfg`, with centered fields.
pub fn random_state(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    graph: &SlopeUnitGraph,
    p: usize,
) -> LatentState<f64> {
    let n = graph.n();
    let mut s = LatentState::zeros(cfg, n, p);
    for b in s.beta_count.iter_mut() {
        *b = rng.random::<f64>() - 0.5;
    }
    for b in s.beta_size.iter_mut() {
        *b = rng.random::<f64>() - 0.5;
    }
    s.gamma = rng.random::<f64>() * 2.0 - 1.0;
    s.xi = rng.random::<f64>() * 0.8 - 0.1;
    if s.xi.abs() < 1e-3 {
        s.xi = 0.05;
    }
    if s.kappa.is_some() {
        s.kappa = Some(0.3 + 3.0 * rng.random::<f64>());
    }
    if let Some(e) = s.split.as_mut() {
        e.bulk_shape = 0.5 + 2.0 * rng.random::<f64>();
        e.bulk_rate = 0.5 + 2.0 * rng.random::<f64>();
        e.tail_weight = 0.05 + 0.5 * rng.random::<f64>();
    }
    for f in [s.w1.as_mut(), s.w2.as_mut()].into_iter().flatten() {
        let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        f.w = graph.center_by_component(&raw).unwrap();
        f.tau = 0.5 + 3.0 * rng.random::<f64>();
    }
    s
}

pub const ALL_STRUCTURES: [Structure; 4] =
    [Structure::Shared, Structure::Independent, Structure::SharedPlus, Structure::FixedOnly];
pub const ALL_FAMILIES: [FamilyTag; 3] = [FamilyTag::Gp, FamilyTag::Egp, FamilyTag::Split];

// ---------------------------------------------------------------------------
// CLI
// ---------------------------------------------------------------------------

pub fn fixture_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pipeline")
}

pub fn hazmark(args: &[&str], env: &[(&str, &str)]) -> std::process::Output {
    let mut cmd = std::process::Command::new(env!("CARGO_BIN_EXE_hazmark"));
    cmd.args(args).env_remove("HAZMARK_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn hazmark")
}

/// Runs one subcommand against `config`, writing under `out`.
pub fn run_cmd(command: &str, config: &std::path::Path, out: &std::path::Path) -> std::process::Output {
    hazmark(
        &[command, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()],
        &[],
    )
}

/// Every file under `dir`, keyed by relative path.
pub fn snapshot(dir: &std::path::Path) -> std::collections::BTreeMap<std::path::PathBuf, Vec<u8>> {
    let mut out = std::collections::BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub const PIPELINE: [&str; 5] = ["simulate", "fit", "predict", "score", "diagnose"];

pub struct PipelineReport {
    pub failures: Vec<String>,
    pub files: usize,
}

/// Full pipeline on the 50-unit fixture, then every command re-run twice:
/// in place (bytes must not change) and into a fresh directory under a
/// different thread setting (bytes must match the first run).
pub fn pipeline_closure(root: &std::path::Path) -> PipelineReport {
    let cfg = fixture_dir().join("config.toml");
    let (a, b) = (root.join("a"), root.join("b"));
    let mut failures = Vec::new();
    for c in PIPELINE {
        let o = run_cmd(c, &cfg, &a);
        if !o.status.success() {
            failures.push(format!("{c}: exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr)));
            return PipelineReport { failures, files: 0 };
        }
    }
    let first = snapshot(&a);
    for c in PIPELINE {
        let o = run_cmd(c, &cfg, &a);
        if !o.status.success() {
            failures.push(format!("{c} (rerun): exit {:?}", o.status.code()));
        }
        let now = snapshot(&a);
        for (path, bytes) in &first {
            if now.get(path) != Some(bytes) {
                failures.push(format!("{c} (rerun) changed {}", path.display()));
            }
        }
        let o = hazmark(
            &[c, "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap(), "--threads", "2"],
            &[("HAZMARK_THREADS", "1")],
        );
        if !o.status.success() {
            failures.push(format!("{c} (second dir): exit {:?}", o.status.code()));
        }
    }
    let second = snapshot(&b);
    if second.keys().ne(first.keys()) {
        failures.push("file sets differ between directories".into());
    }
    for (path, bytes) in &first {
        if second.get(path) != Some(bytes) {
            failures.push(format!("{} differs between directories", path.display()));
        }
    }
    PipelineReport { failures, files: first.len() }
}
