//! Sized experiment drivers shared by the regular tests (small sizes) and
//! the acceptance target (full sizes). Each returns enough detail to print
//! a one-line verdict.

use super::*;
use hazmark::diagnostics::{diagnostics, summarize};
use hazmark::hazard::{combined_hazard, exceedance_given_occurrence, susceptibility};
use hazmark::mcmc::{run_chain, run_chain_from, ModelData, PosteriorSamples, SamplerConfig};
use hazmark::model::empirical_quantile;
use hazmark::scoring::{score_states, ScoreSettings};
use hazmark::{
    logposterior, loglik, simulate_inventory, size_sample, EgpParams, GpParams, IcarField, Priors, SizeFamily,
    SizeLaw, SplitParams,
};
use rand_distr::{Distribution, Poisson};
use statrs::distribution::Normal;

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs()).max(1.0)
}

// ---------------------------------------------------------------------------
// Size kernels
// ---------------------------------------------------------------------------

fn density_integral(law: &SizeFamily<f64>, lo: f64, hi: Option<f64>, scale: f64) -> f64 {
    let pdf = |x: f64| law.logpdf(x).exp();
    match hi {
        Some(h) => tanh_sinh(pdf, lo, h, 1e-11),
        None => tanh_sinh_to_inf(pdf, lo, scale, 1e-11),
    }
}

fn gp_upper(sigma: f64, xi: f64) -> Option<f64> {
    (xi < 0.0).then(|| -sigma / xi)
}

/// Checks every kernel property on one law.
fn law_properties(tag: &str, law: &SizeFamily<f64>, upper: Option<f64>, scale: f64, rt_tol: f64) -> Vec<String> {
    let mut bad = Vec::new();
    let probs = [1e-6, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999];
    let mut prev_q = 0.0;
    for &p in &probs {
        let q = law.quantile(p).unwrap();
        let back = law.cdf(q);
        if !((back - p).abs() <= rt_tol * p) {
            bad.push(format!("{tag}: roundtrip at p={p}: cdf(quantile)={back}"));
        }
        if q < prev_q {
            bad.push(format!("{tag}: quantile not monotone at p={p}"));
        }
        prev_q = q;
    }
    if law.quantile(0.0).unwrap() != 0.0 || law.cdf(0.0) != 0.0 {
        bad.push(format!("{tag}: lower endpoint"));
    }
    let top = law.quantile(0.9999).unwrap();
    let mut prev = 0.0;
    for k in 0..=200 {
        let x = top * 1.2 * k as f64 / 200.0;
        let c = law.cdf(x);
        if !(0.0..=1.0).contains(&c) || c < prev {
            bad.push(format!("{tag}: cdf not monotone in [0,1] at x={x}"));
            break;
        }
        prev = c;
    }
    // the split density jumps at its splice, so integrate piecewise
    let splice = match law {
        SizeFamily::Split(s) => Some(s.threshold()),
        _ => None,
    };
    let pdf = |x: f64| law.logpdf(x).exp();
    let total = match splice {
        Some(u) => tanh_sinh(pdf, 0.0, u, 1e-11) + density_integral(law, u, upper, scale),
        None => density_integral(law, 0.0, upper, scale),
    };
    if (total - 1.0).abs() > 1e-6 {
        bad.push(format!("{tag}: density integrates to {total}"));
    }
    let med = law.quantile(0.5).unwrap();
    let lower = match splice {
        Some(u) if u < med => tanh_sinh(pdf, 0.0, u, 1e-11) + tanh_sinh(pdf, u, med, 1e-11),
        _ => tanh_sinh(pdf, 0.0, med, 1e-11),
    };
    if (lower - 0.5).abs() > 1e-6 {
        bad.push(format!("{tag}: integral up to the median is {lower}"));
    }
    bad
}

/// Randomized kernel suite: roundtrip, normalization, monotonicity,
/// kappa = 1 collapse, xi -> 0 limit, naive closed-form agreement and the
/// splice masses. Returns the failures.
pub fn kernel_suite(seed: u64, draws: usize) -> Vec<String> {
    let mut rng = rng(seed);
    let mut bad = Vec::new();
    for d in 0..draws {
        let sigma = uniform(&mut rng, 0.1f64.ln(), 10f64.ln()).exp();
        let xi = uniform(&mut rng, -0.45, 0.9);
        let kappa = uniform(&mut rng, 0.2f64.ln(), 5f64.ln()).exp();
        let gp = GpParams::new(sigma, xi).unwrap();
        let egp = EgpParams::new(sigma, xi, kappa).unwrap();
        let (shape, rate) = (uniform(&mut rng, 0.5, 3.0), uniform(&mut rng, 0.3, 3.0));
        let u = uniform(&mut rng, 0.5, 5.0);
        let weight = uniform(&mut rng, 0.02, 0.5);
        let split = SplitParams::new(shape, rate, u, weight, gp).unwrap();
        let upper = gp_upper(sigma, xi);

        bad.extend(law_properties(&format!("draw {d} gp"), &SizeFamily::Gp(gp), upper, sigma, 1e-10));
        bad.extend(law_properties(&format!("draw {d} egp"), &SizeFamily::Egp(egp), upper, sigma, 1e-10));
        bad.extend(law_properties(
            &format!("draw {d} split"),
            &SizeFamily::Split(split),
            upper.map(|e| u + e),
            sigma,
            1e-8,
        ));

        // splice masses
        let sf = SizeFamily::Split(split);
        let below = tanh_sinh(|x| sf.logpdf(x).exp(), 0.0, u, 1e-12);
        let above = density_integral(&sf, u, upper.map(|e| u + e), sigma);
        if (below - (1.0 - weight)).abs() > 1e-8 || (above - weight).abs() > 1e-8 {
            bad.push(format!("draw {d} split: masses {below} / {above} vs weight {weight}"));
        }
        if (sf.cdf(u) - (1.0 - weight)).abs() > 1e-15 {
            bad.push(format!("draw {d} split: cdf at the splice"));
        }

        // closed forms
        let naive = SplitNaive { shape, rate, u, weight, sigma, xi };
        for k in 1..=20 {
            let x = SizeFamily::Gp(gp).quantile(k as f64 / 21.0).unwrap();
            if !close(gp.logpdf(x), gp_logpdf_naive(x, sigma, xi), 1e-10)
                || !close(egp.logpdf(x), egp_logpdf_naive(x, sigma, xi, kappa), 1e-10)
                || !close(gp.cdf(x), gp_cdf_naive(x, sigma, xi), 1e-12)
            {
                bad.push(format!("draw {d}: GP/eGP closed form at x={x}"));
                break;
            }
            let xs = x * u;
            if !close(split.logpdf(xs), naive.logpdf(xs), 1e-8) || !close(split.cdf(xs), naive.cdf(xs), 1e-8) {
                bad.push(format!(
                    "draw {d}: split closed form at x={xs}: {} vs {}, {} vs {}",
                    split.logpdf(xs),
                    naive.logpdf(xs),
                    split.cdf(xs),
                    naive.cdf(xs)
                ));
                break;
            }
        }

        // kappa = 1 collapse
        let one = EgpParams::new(sigma, xi, 1.0).unwrap();
        for k in 0..100 {
            let x = top_of(&gp) * k as f64 / 100.0;
            let p = k as f64 / 101.0;
            let dq = (one.quantile(p).unwrap() - gp.quantile(p).unwrap()).abs();
            if (one.cdf(x) - gp.cdf(x)).abs() > 1e-12
                || (x > 0.0 && !close(one.logpdf(x), gp.logpdf(x), 1e-12))
                || dq > 1e-12 * gp.quantile(p).unwrap().max(1.0)
            {
                bad.push(format!("draw {d}: kappa=1 collapse at x={x}"));
                break;
            }
        }

        // xi -> 0 limit and continuity across the series branch
        let x = sigma * uniform(&mut rng, 0.01, 5.0);
        let exp_cdf = -(-x / sigma).exp_m1();
        let exp_lp = -sigma.ln() - x / sigma;
        for eps in [1e-12, -1e-12, 1e-9, -1e-9, 0.0] {
            let g = GpParams::new(sigma, eps).unwrap();
            if (g.cdf(x) - exp_cdf).abs() > 1e-8 || (g.logpdf(x) - exp_lp).abs() > 1e-7 {
                bad.push(format!("draw {d}: xi={eps} limit at x={x}"));
            }
        }
        let lo = GpParams::new(sigma, 0.999_999e-8).unwrap();
        let hi = GpParams::new(sigma, 1.000_001e-8).unwrap();
        if (lo.cdf(x) - hi.cdf(x)).abs() > 1e-9 || (lo.logpdf(x) - hi.logpdf(x)).abs() > 1e-9 {
            bad.push(format!("draw {d}: discontinuity across the small-xi branch"));
        }
    }
    bad
}

fn top_of(gp: &GpParams<f64>) -> f64 {
    gp.quantile(0.999).unwrap()
}

/// KS statistics of `n` sampled sizes for each family.
pub fn sampling_ks(n: usize, seed: u64) -> Vec<(String, f64)> {
    let gp = GpParams::new(1.0, 0.2).unwrap();
    let fams = [
        ("gp(1, 0.2)", SizeFamily::Gp(gp)),
        ("egp(1, 0.2, 2)", SizeFamily::Egp(EgpParams::new(1.0, 0.2, 2.0).unwrap())),
        ("split", SizeFamily::Split(SplitParams::new(1.5, 1.0, 2.0, 0.2, gp).unwrap())),
    ];
    fams.iter()
        .map(|(name, fam)| {
            let draws = size_sample(n, fam, seed);
            let ks = match fam {
                SizeFamily::Gp(_) => ks_statistic(&draws, |x| gp_cdf_naive(x, 1.0, 0.2)),
                _ => ks_statistic(&draws, |x| fam.cdf(x)),
            };
            (name.to_string(), ks)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// iCAR
// ---------------------------------------------------------------------------

/// Dense-oracle comparison on random graphs with `n <= 50`.
pub fn icar_suite(seed: u64, graphs: usize) -> Vec<String> {
    let mut rng = rng(seed);
    let mut bad = Vec::new();
    for gi in 0..graphs {
        let n = 2 + (rng.random::<f64>() * 49.0) as usize;
        let density = uniform(&mut rng, 0.0, 6.0) / n as f64;
        let edges = random_edges(&mut rng, n, density);
        let g = SlopeUnitGraph::build(&edges, n).unwrap();
        let l = laplacian(n, &edges);
        let c = component_count(n, &edges);
        let tag = format!("graph {gi} (n={n}, c={c})");

        if g.n_components() != c || g.rank() != n - c || nonzero_eigenvalues(&l, 1e-9) != n - c {
            bad.push(format!("{tag}: rank bookkeeping"));
        }
        for _ in 0..5 {
            let w: Vec<f64> = (0..n).map(|_| uniform(&mut rng, -2.0, 2.0)).collect();
            let v = nalgebra::DVector::from_vec(w.clone());
            let dense = (v.transpose() * &l * &v)[(0, 0)];
            let sparse = g.icar_quadform(&w).unwrap();
            if (sparse - dense).abs() > 1e-12 * dense.abs().max(1.0) {
                bad.push(format!("{tag}: quadform {sparse} vs dense {dense}"));
            }
            let centered = g.center_by_component(&w).unwrap();
            let q_c = g.icar_quadform(&centered).unwrap();
            if (q_c - sparse).abs() > 1e-12 * sparse.abs().max(1.0) {
                bad.push(format!("{tag}: centering changed the quadform"));
            }
            let again = g.center_by_component(&centered).unwrap();
            if again.iter().zip(&centered).any(|(a, b)| (a - b).abs() > 1e-15) {
                bad.push(format!("{tag}: centering not idempotent"));
            }
            let tau = uniform(&mut rng, 0.1, 10.0);
            let ld = g.icar_logdensity(&IcarField { w: centered.clone(), tau }).unwrap();
            let oracle = 0.5 * (n - c) as f64 * tau.ln() - 0.5 * tau * dense;
            if (ld - oracle).abs() > 1e-12 * oracle.abs().max(1.0) {
                bad.push(format!("{tag}: log-density {ld} vs {oracle}"));
            }
            // quadform is zero exactly on per-component constants
            let mut labels = vec![0.0; n];
            for (k, members) in g.components().iter().enumerate() {
                for &i in members {
                    labels[i] = k as f64 * 1.7 - 3.0;
                }
            }
            if g.icar_quadform(&labels).unwrap().abs() > 1e-12 {
                bad.push(format!("{tag}: nonzero quadform on a piecewise constant"));
            }
            let constant = g.components().iter().all(|m| {
                let f = centered[m[0]];
                m.iter().all(|&i| (centered[i] - f).abs() < 1e-12)
            });
            if !constant && q_c <= 0.0 {
                bad.push(format!("{tag}: zero quadform on a non-constant field"));
            }
        }
    }
    bad
}

/// Largest entrywise gap between the sample covariance of `draws`
/// simulated fields on a 6-node path and the pseudo-inverse oracle.
pub fn icar_covariance_error(draws: usize, tau: f64) -> f64 {
    let edges: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
    let g = SlopeUnitGraph::build(&edges, 6).unwrap();
    let target = pinv_sym(&laplacian(6, &edges), 1e-9) / tau;
    let mut acc = DMatrix::<f64>::zeros(6, 6);
    let mut sum = nalgebra::DVector::<f64>::zeros(6);
    for k in 0..draws {
        let w = nalgebra::DVector::from_vec(g.simulate_icar(tau, 1_000_003 + k as u64).unwrap());
        acc += &w * w.transpose();
        sum += w;
    }
    let m = draws as f64;
    let mean = sum / m;
    let cov = (acc - &mean * mean.transpose() * m) / (m - 1.0);
    (cov - target).abs().max()
}

// ---------------------------------------------------------------------------
// Likelihood
// ---------------------------------------------------------------------------

fn naive_logprior(s: &LatentState<f64>, edges: &[(usize, usize)], n: usize, cfg: &ModelConfig) -> f64 {
    let pr = &cfg.priors;
    let norm = |v: f64, sd: f64| Normal::new(0.0, sd).unwrap().ln_pdf(v);
    let gam = |v: f64, a: f64, b: f64| Gamma::new(a, b).unwrap().ln_pdf(v);
    let mut acc: f64 = s.beta_count.iter().chain(&s.beta_size).map(|&b| norm(b, pr.beta_sd)).sum();
    if matches!(cfg.structure, Structure::Shared | Structure::SharedPlus) {
        acc += norm(s.gamma, pr.gamma_sd);
    }
    let std = Normal::new(0.0, 1.0).unwrap();
    let mass = std.cdf(pr.xi_upper / pr.xi_sd) - std.cdf(pr.xi_lower / pr.xi_sd);
    acc += norm(s.xi, pr.xi_sd) - mass.ln();
    if let Some(k) = s.kappa {
        acc += gam(k, pr.kappa_shape, pr.kappa_rate);
    }
    if let Some(e) = s.split {
        acc += gam(e.bulk_shape, pr.bulk_shape_shape, pr.bulk_shape_rate)
            + gam(e.bulk_rate, pr.bulk_rate_shape, pr.bulk_rate_rate);
    }
    let l = laplacian(n, edges);
    let rank = n - component_count(n, edges);
    for f in s.w1.iter().chain(s.w2.iter()) {
        let v = nalgebra::DVector::from_vec(f.w.clone());
        let q = (v.transpose() * &l * &v)[(0, 0)];
        acc += gam(f.tau, pr.tau_shape, pr.tau_rate) + 0.5 * rank as f64 * f.tau.ln() - 0.5 * f.tau * q;
    }
    acc
}

/// Worst relative gap of loglik and logposterior against the scalar-loop
/// oracle over random instances (`n <= 50`).
pub fn likelihood_suite(seed: u64, instances: usize) -> (f64, Vec<String>) {
    let mut rng = rng(seed);
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for k in 0..instances {
        let n = 1 + (rng.random::<f64>() * 50.0) as usize;
        let edges = random_edges(&mut rng, n, 3.0 / n as f64);
        let g = SlopeUnitGraph::build(&edges, n).unwrap();
        let p = 1 + k % 3;
        let x = if n > 2 { random_covariates(&mut rng, n, p) } else { CovariateMatrix::intercept_only(n) };
        let mut cfg = ModelConfig::new(ALL_FAMILIES[k % 3], ALL_STRUCTURES[(k / 3) % 4]);
        if cfg.family == FamilyTag::Split {
            cfg.threshold = Some(uniform(&mut rng, 0.2, 3.0));
        }
        let state = random_state(&mut rng, &cfg, &g, x.p());
        let mut inv = simulate_inventory(&state, &g, &x, &cfg, rng.random()).unwrap();
        if inv.total_count() == 0 {
            let mut sizes: Vec<Vec<f64>> = (0..n).map(|i| inv.sizes(i).to_vec()).collect();
            sizes[0].push(0.5);
            inv = Inventory::new(sizes).unwrap();
        }
        let tag = format!("instance {k} ({:?}/{:?}, n={n})", cfg.family, cfg.structure);
        let ll = loglik(&inv, &state, &x, &cfg);
        let oracle = loglik_naive(&inv, &state, &x, &cfg);
        let lp = logposterior(&inv, &state, &g, &x, &cfg);
        let lp_oracle = oracle + naive_logprior(&state, &edges, n, &cfg);
        if !ll.is_finite() || !lp.is_finite() {
            bad.push(format!("{tag}: non-finite value"));
            continue;
        }
        let e1 = (ll - oracle).abs() / oracle.abs().max(1.0);
        let e2 = (lp - lp_oracle).abs() / lp_oracle.abs().max(1.0);
        worst = worst.max(e1).max(e2);
        if e1 > 1e-10 || e2 > 1e-10 {
            bad.push(format!("{tag}: loglik {ll} vs {oracle}, logposterior {lp} vs {lp_oracle}"));
        }
    }
    (worst, bad)
}

// ---------------------------------------------------------------------------
// Sampler
// ---------------------------------------------------------------------------

pub fn sampler(n_iter: usize, burn_in: usize, thin: usize, n_chains: usize, seed: u64) -> SamplerConfig {
    SamplerConfig { n_iter, burn_in, thin, n_chains, seed, ..SamplerConfig::default() }
}

/// Prior recovery with no data: `(name, mean, mcse)` of every fixed effect.
pub fn prior_recovery(draws_per_chain: usize, chains: usize) -> Vec<(String, f64, f64)> {
    let g = SlopeUnitGraph::build(&[], 0).unwrap();
    let x = CovariateMatrix::intercept_only(0);
    let inv = Inventory::new(Vec::new()).unwrap();
    let cfg = ModelConfig::new(FamilyTag::Gp, Structure::FixedOnly);
    let data = ModelData::new(&inv, &g, &x, &cfg).unwrap();
    let burn = 2000;
    let samples = run_chain(&data, &sampler(burn + draws_per_chain, burn, 1, chains, 77)).unwrap();
    ["beta_count[0]", "beta_size[0]"]
        .iter()
        .map(|name| {
            let d = summarize(name, &samples.traces(samples.column_index(name).unwrap()));
            (name.to_string(), d.mean, d.mcse)
        })
        .collect()
}

/// KS statistic of gamma against its N(0, gamma_sd) prior under
/// SHARED_PLUS on a 5-unit path with no events: sizes carry no information,
/// so the sharing coefficient's posterior is its prior.
pub fn gamma_prior_ks(draws: usize) -> f64 {
    let g = SlopeUnitGraph::lattice(1, 5);
    let x = CovariateMatrix::intercept_only(5);
    let inv = Inventory::new(vec![Vec::new(); 5]).unwrap();
    let cfg = ModelConfig::new(FamilyTag::Gp, Structure::SharedPlus);
    let data = ModelData::new(&inv, &g, &x, &cfg).unwrap();
    let burn = 2000;
    let samples = run_chain(&data, &sampler(burn + 10 * draws, burn, 10, 1, 21)).unwrap();
    let gammas = samples.traces(samples.column_index("gamma").unwrap()).concat();
    let prior = Normal::new(0.0, cfg.priors.gamma_sd).unwrap();
    ks_statistic(&gammas, |v| prior.cdf(v))
}

/// KS statistic of the tau draws against the Gamma full conditional with
/// every field held fixed.
pub fn tau_conjugacy_ks(draws: usize) -> f64 {
    let g = SlopeUnitGraph::lattice(4, 5);
    let n = g.n();
    let x = CovariateMatrix::intercept_only(n);
    let cfg = ModelConfig::new(FamilyTag::Gp, Structure::Shared);
    let mut start = LatentState::zeros(&cfg, n, 1);
    let w = g.simulate_icar(2.0, 5).unwrap();
    start.w1 = Some(IcarField { w: w.clone(), tau: 1.0 });
    let inv = simulate_inventory(&start, &g, &x, &cfg, 9).unwrap();
    let data = ModelData::new(&inv, &g, &x, &cfg).unwrap();
    let mut sc = sampler(draws + 100, 100, 1, 1, 3);
    sc.fixed_fields = true;
    let chain = run_chain_from(&data, &sc, 0, start).unwrap();
    let names = hazmark::model::param_names(&cfg, n, 1);
    let col = names.iter().position(|s| s == "tau1").unwrap();
    let taus: Vec<f64> = chain.draws.iter().map(|d| d[col]).collect();
    let q = g.icar_quadform(&w).unwrap();
    let pr = Priors::default();
    let post = Gamma::new(pr.tau_shape + 0.5 * g.rank() as f64, pr.tau_rate + 0.5 * q).unwrap();
    ks_statistic(&taus, |t| post.cdf(t))
}

/// Three-unit path, counts only informative for `(beta_count[0], w1)`;
/// the count block posterior (tau integrated out analytically) is
/// discretized on a fine grid and compared with the sampler's histogram
/// on a coarse 4x4x4 partition. Returns the total-variation distance.
pub fn grid_toy_tv(sweeps: usize, seed: u64) -> f64 {
    let (grid, emp) = grid_toy_cells(sweeps, seed);
    0.5 * grid.iter().zip(&emp).map(|(p, q)| (p - q).abs()).sum::<f64>()
}

/// Grid and sampler probabilities of the 64 cells (row-major over
/// `beta`, `u1`, `u2` quartile bins).
pub fn grid_toy_cells(sweeps: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let g = SlopeUnitGraph::build(&[(0, 1), (1, 2)], 3).unwrap();
    let x = CovariateMatrix::intercept_only(3);
    let inv = Inventory::new(vec![vec![1.0, 2.5], vec![], vec![0.3, 0.7, 1.2, 4.0, 0.9]]).unwrap();
    let mut cfg = ModelConfig::new(FamilyTag::Gp, Structure::Independent);
    cfg.priors.tau_shape = 2.0;
    cfg.priors.tau_rate = 1.0;
    let counts = [2.0, 0.0, 5.0];
    let e1 = [1.0 / 2f64.sqrt(), 0.0, -1.0 / 2f64.sqrt()];
    let e2 = [1.0 / 6f64.sqrt(), -2.0 / 6f64.sqrt(), 1.0 / 6f64.sqrt()];
    let (a, b, sd) = (cfg.priors.tau_shape, cfg.priors.tau_rate, cfg.priors.beta_sd);

    let log_post = |beta: f64, u1: f64, u2: f64| -> f64 {
        let w: Vec<f64> = (0..3).map(|i| u1 * e1[i] + u2 * e2[i]).collect();
        let q = (w[0] - w[1]).powi(2) + (w[1] - w[2]).powi(2);
        let mut lp = -0.5 * (beta / sd).powi(2) - (a + 1.0) * (b + 0.5 * q).ln();
        for i in 0..3 {
            let eta = beta + w[i];
            lp += counts[i] * eta - eta.exp();
        }
        lp
    };

    // fine grid (midpoint rule)
    let (bl, bh, ul, uh, h) = (-4.0, 4.0, -9.0, 9.0, 0.05);
    let nb = ((bh - bl) / h) as usize;
    let nu = ((uh - ul) / h) as usize;
    let mut pts = Vec::with_capacity(nb * nu * nu);
    let mut peak = f64::NEG_INFINITY;
    for ib in 0..nb {
        let beta = bl + (ib as f64 + 0.5) * h;
        for i1 in 0..nu {
            let u1 = ul + (i1 as f64 + 0.5) * h;
            for i2 in 0..nu {
                let u2 = ul + (i2 as f64 + 0.5) * h;
                let lp = log_post(beta, u1, u2);
                peak = peak.max(lp);
                pts.push((beta, u1, u2, lp));
            }
        }
    }
    let weights: Vec<f64> = pts.iter().map(|p| (p.3 - peak).exp()).collect();
    let z: f64 = weights.iter().sum();

    // coarse partition from the grid marginals' quartiles
    let edges_of = |coord: usize| -> [f64; 3] {
        let mut marg: Vec<(f64, f64)> = pts
            .iter()
            .zip(&weights)
            .map(|(p, &wt)| ([p.0, p.1, p.2][coord], wt / z))
            .collect();
        marg.sort_by(|l, r| l.0.total_cmp(&r.0));
        let mut out = [0.0; 3];
        let mut acc = 0.0;
        let mut k = 0;
        for (v, wt) in marg {
            acc += wt;
            while k < 3 && acc >= 0.25 * (k + 1) as f64 {
                // cut on the slab boundary so grid cells and draws share
                // the same partition
                out[k] = v + 0.5 * h;
                k += 1;
            }
        }
        out
    };
    let cuts = [edges_of(0), edges_of(1), edges_of(2)];
    let cell = |v: [f64; 3]| -> usize {
        (0..3).fold(0, |acc, c| acc * 4 + cuts[c].iter().filter(|&&e| v[c] > e).count())
    };
    let mut grid_p = vec![0.0; 64];
    for (p, wt) in pts.iter().zip(&weights) {
        grid_p[cell([p.0, p.1, p.2])] += wt / z;
    }

    let data = ModelData::new(&inv, &g, &x, &cfg).unwrap();
    let thin = 5;
    let sc = sampler(sweeps + 10_000, 10_000, thin, 1, seed);
    let samples = run_chain(&data, &sc).unwrap();
    let names = &samples.names;
    let ib = names.iter().position(|s| s == "beta_count[0]").unwrap();
    let iw = names.iter().position(|s| s == "w1[0]").unwrap();
    let mut emp = vec![0.0; 64];
    let draws = &samples.chains[0].draws;
    for d in draws {
        let w = &d[iw..iw + 3];
        let u1: f64 = (0..3).map(|i| w[i] * e1[i]).sum();
        let u2: f64 = (0..3).map(|i| w[i] * e2[i]).sum();
        emp[cell([d[ib], u1, u2])] += 1.0 / draws.len() as f64;
    }
    (grid_p, emp)
}

// ---------------------------------------------------------------------------
// Hazard
// ---------------------------------------------------------------------------

/// Brute-force thinning check: `(label, analytic, monte_carlo, se)` per
/// unit and draw.
pub fn hazard_monte_carlo(draws: usize, units: usize, reps: usize, seed: u64) -> Vec<(String, f64, f64, f64)> {
    let mut rng = rng(seed);
    let g = SlopeUnitGraph::lattice(1, units);
    let x = random_covariates(&mut rng, units, 2);
    let mut out = Vec::new();
    for d in 0..draws {
        let mut cfg = ModelConfig::new(ALL_FAMILIES[d % 3], Structure::SharedPlus);
        if cfg.family == FamilyTag::Split {
            cfg.threshold = Some(1.0);
        }
        let state = random_state(&mut rng, &cfg, &g, x.p());
        let globals = state.size_globals(&cfg);
        let eta2 = hazmark::size_linpred(&state, &x, cfg.structure).unwrap();
        let s = globals.law(eta2[0].exp()).unwrap().quantile(0.7).unwrap();
        let susc = susceptibility(&state, &x).unwrap();
        let haz = combined_hazard(&state, &x, &cfg, s).unwrap();
        let lambda: Vec<f64> = hazmark::count_linpred(&state, &x).unwrap().iter().map(|e| e.exp()).collect();
        for i in 0..units {
            let law = globals.law(eta2[i].exp()).unwrap();
            let pois = Poisson::new(lambda[i]).unwrap();
            let mut mc = rng.clone();
            let (mut any, mut big) = (0u64, 0u64);
            let mut buf = Vec::new();
            for _ in 0..reps {
                let k = pois.sample(&mut mc) as usize;
                if k > 0 {
                    any += 1;
                    buf.clear();
                    law.sample_into(&mut mc, k, &mut buf);
                    if buf.iter().any(|&a| a > s) {
                        big += 1;
                    }
                }
            }
            rng = mc;
            let m = reps as f64;
            for (label, exact, hits) in [("susceptibility", susc[i], any), ("combined", haz[i], big)] {
                let p = hits as f64 / m;
                let se = (exact * (1.0 - exact) / m).sqrt();
                out.push((format!("draw {d} ({:?}) unit {i} {label}", cfg.family), exact, p, se));
            }
        }
    }
    out
}

/// Dominance, bounds and s-monotonicity on every draw; returns the count
/// of violations and of unit-draw pairs checked.
pub fn hazard_invariants(
    states: &[LatentState<f64>],
    x: &CovariateMatrix<f64>,
    cfg: &ModelConfig,
    grid: &[f64],
) -> (usize, usize) {
    let mut bad = 0;
    let mut checked = 0;
    for st in states {
        let susc = susceptibility(st, x).unwrap();
        let mut prev_h = susc.clone();
        let mut prev_e = vec![1.0; susc.len()];
        for (k, &s) in grid.iter().enumerate() {
            let h = combined_hazard(st, x, cfg, s).unwrap();
            let e = exceedance_given_occurrence(st, x, cfg, s).unwrap();
            for i in 0..susc.len() {
                checked += 1;
                let ok = (0.0..=1.0).contains(&h[i])
                    && (0.0..=1.0).contains(&e[i])
                    && h[i] <= susc[i]
                    && h[i] <= prev_h[i]
                    && e[i] <= prev_e[i]
                    && (k > 0 || s > 0.0 || (h[i] - susc[i]).abs() <= 1e-12);
                if !ok {
                    bad += 1;
                }
            }
            prev_h = h;
            prev_e = e;
        }
    }
    (bad, checked)
}

// ---------------------------------------------------------------------------
// Recovery and model comparison
// ---------------------------------------------------------------------------

pub struct Truth {
    pub graph: SlopeUnitGraph,
    pub x: CovariateMatrix<f64>,
    pub state: LatentState<f64>,
    pub config: ModelConfig,
}

/// eGP / SHARED_PLUS truth on a `rows x cols` lattice with two covariates.
pub fn egp_truth(rows: usize, cols: usize, seed: u64) -> Truth {
    let graph = SlopeUnitGraph::lattice(rows, cols);
    let n = graph.n();
    let mut r = rng(seed);
    let x = random_covariates(&mut r, n, 3);
    let config = ModelConfig::new(FamilyTag::Egp, Structure::SharedPlus);
    let mut state = LatentState::zeros(&config, n, 3);
    state.beta_count = vec![0.5, 0.4, -0.3];
    state.beta_size = vec![0.3, 0.25, -0.15];
    state.gamma = 0.5;
    state.xi = 0.15;
    state.kappa = Some(2.0);
    state.w1 = Some(IcarField { w: graph.simulate_icar(4.0, r.random()).unwrap(), tau: 4.0 });
    state.w2 = Some(IcarField { w: graph.simulate_icar(8.0, r.random()).unwrap(), tau: 8.0 });
    Truth { graph, x, state, config }
}

pub const RECOVERY_TARGETS: [&str; 9] = [
    "beta_count[0]",
    "beta_count[1]",
    "beta_count[2]",
    "beta_size[0]",
    "beta_size[1]",
    "beta_size[2]",
    "gamma",
    "xi",
    "kappa",
];

pub fn truth_value(state: &LatentState<f64>, name: &str) -> f64 {
    match name {
        "gamma" => state.gamma,
        "xi" => state.xi,
        "kappa" => state.kappa.unwrap(),
        _ => {
            let k: usize = name[name.find('[').unwrap() + 1..name.len() - 1].parse().unwrap();
            if name.starts_with("beta_count") {
                state.beta_count[k]
            } else {
                state.beta_size[k]
            }
        }
    }
}

pub struct ReplicateOutcome {
    /// `(name, covered)` for every recovery target.
    pub covered: Vec<(String, bool)>,
    pub max_rhat: f64,
    pub worst_param: String,
    pub hazard_bad: usize,
    pub hazard_checked: usize,
}

/// One recovery replicate: simulate from the truth, fit, and check the 90%
/// interval coverage, R-hat and hazard invariants on every retained draw.
pub fn recovery_replicate(rep: u64, sc: &SamplerConfig) -> ReplicateOutcome {
    let truth = egp_truth(10, 20, 1000 + rep);
    let inv = simulate_inventory(&truth.state, &truth.graph, &truth.x, &truth.config, 5000 + rep).unwrap();
    let data = ModelData::new(&inv, &truth.graph, &truth.x, &truth.config).unwrap();
    let samples = run_chain(&data, &SamplerConfig { seed: 9000 + rep, ..sc.clone() }).unwrap();
    let diag = diagnostics(&samples).unwrap();
    let (worst_param, max_rhat) = diag
        .params
        .iter()
        .filter_map(|p| p.rhat.map(|r| (p.name.clone(), r)))
        .fold((String::new(), 0.0), |acc, (n, r)| if r > acc.1 { (n, r) } else { acc });
    let covered = RECOVERY_TARGETS
        .iter()
        .map(|name| {
            let (lo, hi) = credible_interval(&samples, name, 0.9);
            let t = truth_value(&truth.state, name);
            (name.to_string(), lo <= t && t <= hi)
        })
        .collect();
    let states = samples.states().unwrap();
    let (hazard_bad, hazard_checked) =
        hazard_invariants(&states, &truth.x, &truth.config, &[0.0, 0.5, 1.0, 2.0, 5.0, 20.0, 100.0]);
    ReplicateOutcome { covered, max_rhat, worst_param, hazard_bad, hazard_checked }
}

pub fn credible_interval(samples: &PosteriorSamples, name: &str, level: f64) -> (f64, f64) {
    let mut all: Vec<f64> = samples.traces(samples.column_index(name).unwrap()).concat();
    all.sort_by(f64::total_cmp);
    let tail = 0.5 * (1.0 - level);
    (empirical_quantile(&all, tail), empirical_quantile(&all, 1.0 - tail))
}

pub struct ComparisonOutcome {
    pub egp_pinball: f64,
    pub gp_pinball: f64,
    pub split_scores: Vec<f64>,
    pub split_reproducible: bool,
}

/// One model-comparison replicate: eGP truth on a `rows x cols` lattice,
/// fits under eGP, GP and split, scored on a held-out inventory pooled from
/// `held_out_reps` fresh simulations of the same latent truth.
pub fn comparison_replicate(rep: u64, rows: usize, cols: usize, held_out_reps: usize, sc: &SamplerConfig) -> ComparisonOutcome {
    let truth = egp_truth(rows, cols, 7000 + rep);
    let n = truth.graph.n();
    let inv = simulate_inventory(&truth.state, &truth.graph, &truth.x, &truth.config, 100 + rep).unwrap();
    let mut pooled: Vec<Vec<f64>> = vec![Vec::new(); n];
    for h in 0..held_out_reps {
        let extra =
            simulate_inventory(&truth.state, &truth.graph, &truth.x, &truth.config, 200_000 + 100 * rep + h as u64)
                .unwrap();
        for (i, unit) in pooled.iter_mut().enumerate() {
            unit.extend_from_slice(extra.sizes(i));
        }
    }
    let held_out = Inventory::new(pooled).unwrap();
    let settings = ScoreSettings { seed: 31 + rep, ..ScoreSettings::default() };

    let fit_and_score = |family: FamilyTag| {
        let mut cfg = ModelConfig::new(family, Structure::SharedPlus);
        cfg.resolve_threshold(&inv).unwrap();
        let data = ModelData::new(&inv, &truth.graph, &truth.x, &cfg).unwrap();
        let samples = run_chain(&data, &SamplerConfig { seed: 40 + rep, ..sc.clone() }).unwrap();
        let states = samples.states().unwrap();
        let score = score_states(family.short(), &held_out, &states, &truth.x, &cfg, &settings).unwrap();
        (score, states, cfg)
    };
    let pin99 = |s: &hazmark::scoring::ModelScore| s.pinball.iter().find(|(q, _)| *q == 0.99).unwrap().1;
    let (egp, _, _) = fit_and_score(FamilyTag::Egp);
    let (gp, _, _) = fit_and_score(FamilyTag::Gp);
    let (split, split_states, split_cfg) = fit_and_score(FamilyTag::Split);
    let again = score_states("split", &held_out, &split_states, &truth.x, &split_cfg, &settings).unwrap();
    let mut split_scores: Vec<f64> = split.pinball.iter().map(|p| p.1).collect();
    split_scores.extend([split.crps_size, split.crps_count]);
    ComparisonOutcome {
        egp_pinball: pin99(&egp),
        gp_pinball: pin99(&gp),
        split_scores,
        split_reproducible: again == split,
    }
}
