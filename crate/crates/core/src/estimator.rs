//! Recovery of the population spectrum from observed eigenvalues.
//!
//! The estimate `Ĥ = (1/n) Σ δ_{τ_i}` minimises the expected squared
//! 2-Wasserstein distance between the spectrum of a simulated
//! `(1/N) √T Z W Z^T √T`, `T = diag(τ)`, and the observed spectrum. The
//! expectation is approximated with `R` fresh noise draws per step and the
//! minimisation runs Adam on `θ = ln τ`. The support, grid and density of the
//! limiting law under `Ĥ` are then computed.

use log::warn;
use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::{density_curve, DensityCurve};
use crate::distributions::{SpectralDistribution, WeightDistribution};
use crate::error::{Error, Result};
use crate::grid::{build_grid, Grid, GridStrategy, DEFAULT_OMEGA};
use crate::simulator::{derive_seed, realize_weights, scale_by_population, weighted_gram, Noise};
use crate::support::{find_support_mixture, SupportIntervals};

/// Relative tolerance for merging `τ̂` atoms before the support stage.
pub const SUPPORT_MERGE_RTOL: f64 = 1e-6;
/// Maximum number of atoms when raw weights are discretised.
pub const MAX_WEIGHT_ATOMS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMode {
    /// First-order eigenvalue perturbation: `∂λ_k/∂τ_i = λ_k v_ik² / τ_i`.
    Analytic,
    /// Central differences in `ln τ`.
    FiniteDifference,
}

/// Observation weights: a realised vector of length `N`, or a weight law
/// from which `N` deterministic weights are realised.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightInput {
    Samples(Vec<f64>),
    Distribution(WeightDistribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationConfig {
    pub iterations: usize,
    pub replicas: usize,
    pub learning_rate: f64,
    /// The learning rate is multiplied by `decay_factor` every `decay_every`
    /// iterations.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub gradient: GradientMode,
    /// Relative step of the finite-difference mode.
    pub fd_step: f64,
    pub seed: u64,
    pub noise: Noise,
    pub omega: usize,
    pub grid_strategy: GridStrategy,
    /// Branches used by the support stage; all when `None`.
    pub branches: Option<Vec<usize>>,
    /// Observed eigenvalues above this quantile are clipped to it before
    /// fitting.
    pub clip_quantile: Option<f64>,
    /// Skip the support, grid and density stage.
    pub skip_density: bool,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            replicas: 4,
            learning_rate: 0.05,
            decay_every: 200,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            gradient: GradientMode::Analytic,
            fd_step: 1e-4,
            seed: 0,
            noise: Noise::Gaussian,
            omega: DEFAULT_OMEGA,
            grid_strategy: GridStrategy::default(),
            branches: None,
            clip_quantile: None,
            skip_density: false,
        }
    }
}

impl EstimationConfig {
    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.replicas == 0 {
            return Err(Error::invalid("iterations and replicas must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.decay_factor > 0.0 && self.decay_every > 0) {
            return Err(Error::invalid("step sizes must be positive"));
        }
        if let Some(q) = self.clip_quantile {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::invalid(format!("clip quantile must lie in (0, 1], got {q}")));
            }
        }
        self.noise.validate()
    }

    /// Step size at iteration `it` (0-based).
    pub fn step_size(&self, it: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((it / self.decay_every) as i32)
    }
}

#[derive(Debug, Clone)]
pub struct EstimationResult {
    pub tau_hat: Vec<f64>,
    pub h_hat: SpectralDistribution,
    pub support: Option<SupportIntervals>,
    pub grid: Option<Grid>,
    pub density: Option<DensityCurve>,
    pub loss_trace: Vec<f64>,
    pub warnings: Vec<String>,
    /// Why the support stage produced nothing, when it failed.
    pub support_error: Option<String>,
}

/// `(1/n) Σ (a_i - b_i)²` for sorted samples of equal length.
pub fn w2_squared(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::invalid("empty samples"));
    }
    let sorted = |v: &[f64]| v.windows(2).all(|w| w[0] <= w[1]);
    if !sorted(a) || !sorted(b) {
        return Err(Error::invalid("w2_squared needs sorted inputs"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// 2-Wasserstein distance between two finite mixtures, integrating the squared
/// difference of their quantile functions exactly.
pub fn wasserstein2(a: &SpectralDistribution, b: &SpectralDistribution) -> f64 {
    let (xa, wa) = (a.atoms(), a.weights());
    let (xb, wb) = (b.atoms(), b.weights());
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (wa[0], wb[0]);
    let mut acc = 0.0;
    loop {
        let take = ra.min(rb);
        acc += take * (xa[i] - xb[j]).powi(2);
        ra -= take;
        rb -= take;
        if ra <= 1e-15 {
            i += 1;
            if i == xa.len() {
                break;
            }
            ra += wa[i];
        }
        if rb <= 1e-15 {
            j += 1;
            if j == xb.len() {
                break;
            }
            rb += wb[j];
        }
    }
    acc.max(0.0).sqrt()
}

/// Sorted eigenpairs of one replica of `B(τ)`.
fn replica_eigs(tau: &[f64], weights: &[f64], noise: &Noise, seed: u64, vectors: bool) -> Result<(Vec<f64>, Option<nalgebra::DMatrix<f64>>)> {
    let n = tau.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = weighted_gram(n, weights, noise, &mut rng);
    let b = scale_by_population(&a, tau);
    if !vectors {
        let mut ev: Vec<f64> = b.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        return Ok((ev, None));
    }
    let eig = SymmetricEigen::try_new(b, 1e-14, 10_000).ok_or_else(|| Error::Eigen("symmetric eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[p].total_cmp(&eig.eigenvalues[q]));
    let ev = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let v = nalgebra::DMatrix::from_fn(n, n, |i, k| eig.eigenvectors[(i, order[k])]);
    Ok((ev, Some(v)))
}

/// Loss and `∂loss/∂τ` for one replica, with eigenvalue clusters given
/// subspace-averaged derivatives.
fn replica_loss_grad(tau: &[f64], obs: &[f64], weights: &[f64], noise: &Noise, seed: u64) -> Result<(f64, Vec<f64>)> {
    let n = tau.len();
    let (ev, v) = replica_eigs(tau, weights, noise, seed, true)?;
    let v = v.expect("eigenvectors requested");
    let loss = w2_squared(&ev, obs)?;
    let scale = ev.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
    let mut grad = vec![0.0; n];
    let mut k = 0;
    while k < n {
        let mut e = k + 1;
        while e < n && ev[e] - ev[e - 1] <= 1e-10 * scale {
            e += 1;
        }
        let size = (e - k) as f64;
        let resid: f64 = (k..e).map(|l| ev[l] - obs[l]).sum();
        let lam: f64 = (k..e).map(|l| ev[l]).sum::<f64>() / size;
        for (i, g) in grad.iter_mut().enumerate() {
            let proj: f64 = (k..e).map(|l| v[(i, l)] * v[(i, l)]).sum::<f64>() / size;
            *g += 2.0 / n as f64 * resid * lam * proj / tau[i];
        }
        k = e;
    }
    Ok((loss, grad))
}

fn replica_loss(tau: &[f64], obs: &[f64], weights: &[f64], noise: &Noise, seed: u64) -> Result<f64> {
    let (ev, _) = replica_eigs(tau, weights, noise, seed, false)?;
    w2_squared(&ev, obs)
}

/// Mean loss over replicas with the given seeds, and its gradient with
/// respect to `τ`.
pub fn loss_and_gradient(
    tau: &[f64],
    obs: &[f64],
    weights: &[f64],
    seeds: &[u64],
    noise: &Noise,
    mode: GradientMode,
    fd_step: f64,
) -> Result<(f64, Vec<f64>)> {
    if tau.len() != obs.len() {
        return Err(Error::LengthMismatch {
            expected: obs.len(),
            got: tau.len(),
        });
    }
    if let Some(t) = tau.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::invalid(format!("population eigenvalue {t} is not positive")));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("at least one replica is needed"));
    }
    let n = tau.len();
    let r = seeds.len() as f64;
    let analytic = || -> Result<(f64, Vec<f64>)> {
        let parts: Vec<Result<(f64, Vec<f64>)>> = seeds
            .par_iter()
            .map(|&s| replica_loss_grad(tau, obs, weights, noise, s))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; n];
        for p in parts {
            let (l, g) = p?;
            loss += l;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        Ok((loss / r, grad.into_iter().map(|g| g / r).collect()))
    };
    let finite = || -> Result<(f64, Vec<f64>)> {
        let mean = |t: &[f64]| -> Result<f64> {
            let mut s = 0.0;
            for &seed in seeds {
                s += replica_loss(t, obs, weights, noise, seed)?;
            }
            Ok(s / r)
        };
        let loss = mean(tau)?;
        let grad: Result<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let h = fd_step * tau[i];
                let mut tp = tau.to_vec();
                let mut tm = tau.to_vec();
                tp[i] += h;
                tm[i] -= h;
                Ok((mean(&tp)? - mean(&tm)?) / (2.0 * h))
            })
            .collect();
        Ok((loss, grad?))
    };
    match mode {
        GradientMode::FiniteDifference => finite(),
        GradientMode::Analytic => match analytic() {
            Ok(v) => Ok(v),
            Err(e) => {
                warn!("analytic gradient failed ({e}); falling back to finite differences");
                finite()
            }
        },
    }
}

/// Observed eigenvalues above the `q`-quantile replaced by it.
pub fn clip_upper_quantile(sorted: &[f64], q: f64) -> Vec<f64> {
    let n = sorted.len();
    let idx = ((q * n as f64).ceil() as usize).clamp(1, n) - 1;
    let cap = sorted[idx];
    sorted.iter().map(|&x| x.min(cap)).collect()
}

/// Warnings about observed eigenvalues far beyond the estimated support.
///
/// Two references are used: the top of `S_F`, and the top of the bulk, the
/// shortest run of intervals from the left holding 99% of the observations
/// (isolated outliers fitted by a few atoms of `Ĥ` create small intervals of
/// their own).
pub fn heavy_tail_warnings(obs: &[f64], support: &SupportIntervals) -> Vec<String> {
    let n = obs.len() as f64;
    let share_above = |edge: f64| obs.iter().filter(|&&x| x > 1.25 * edge).count() as f64 / n;
    let mut out = Vec::new();
    let advice = "consider transforming the observed eigenvalues to reject the highest quantiles";
    if let Some(top) = support.upper_edge() {
        let s = share_above(top);
        if s > 0.005 {
            out.push(format!(
                "{:.2}% of observed eigenvalues exceed the support edge {top:.6} by more than 25%; {advice}",
                100.0 * s
            ));
            return out;
        }
    }
    let mut held = 0.0;
    let bulk = support
        .intervals
        .iter()
        .find(|&&(l, r)| {
            held += obs.iter().filter(|&&x| x >= l && x <= r).count() as f64;
            held >= 0.99 * n
        })
        .map(|iv| iv.1);
    if let Some(edge) = bulk {
        let s = share_above(edge);
        if s > 0.005 {
            out.push(format!(
                "{:.2}% of observed eigenvalues exceed the bulk edge {edge:.6} by more than 25%; {advice}",
                100.0 * s
            ));
        }
    }
    out
}

/// Runs the full pipeline on observed eigenvalues `obs` (any order).
pub fn estimate(obs: &[f64], weights: &WeightInput, c: f64, config: &EstimationConfig) -> Result<EstimationResult> {
    config.validate()?;
    if obs.is_empty() {
        return Err(Error::invalid("no observed eigenvalues"));
    }
    if let Some(x) = obs.iter().find(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("observed eigenvalue {x} is not finite")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("concentration must be positive, got {c}")));
    }
    let n = obs.len();
    let big_n = (n as f64 / c).round() as usize;
    if big_n == 0 {
        return Err(Error::invalid("concentration too large: no observations"));
    }
    let (w, d) = match weights {
        WeightInput::Samples(s) => {
            if s.len() != big_n {
                return Err(Error::LengthMismatch {
                    expected: big_n,
                    got: s.len(),
                });
            }
            (s.clone(), WeightDistribution::quantile_binned(s, MAX_WEIGHT_ATOMS)?)
        }
        WeightInput::Distribution(d) => (realize_weights(d, big_n), d.clone()),
    };
    if let Some(x) = w.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
        return Err(Error::invalid(format!("weight {x} is not strictly positive")));
    }

    let mut sorted = obs.to_vec();
    sorted.sort_by(f64::total_cmp);
    for v in sorted.iter_mut() {
        *v = v.max(0.0);
    }
    let fit_target = match config.clip_quantile {
        Some(q) => clip_upper_quantile(&sorted, q),
        None => sorted.clone(),
    };
    let mean = fit_target.iter().sum::<f64>() / n as f64;
    if mean <= 0.0 {
        return Err(Error::invalid("observed eigenvalues are all zero"));
    }
    let floor = 1e-3 * mean;
    let mut theta: Vec<f64> = fit_target.iter().map(|&x| x.max(floor).ln()).collect();

    let (mut m1, mut m2) = (vec![0.0; n], vec![0.0; n]);
    let mut loss_trace = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let tau: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
        let seeds: Vec<u64> = (0..config.replicas)
            .map(|r| derive_seed(config.seed, it as u64, r as u64))
            .collect();
        let (loss, g_tau) = loss_and_gradient(&tau, &fit_target, &w, &seeds, &config.noise, config.gradient, config.fd_step)?;
        loss_trace.push(loss);
        let lr = config.step_size(it);
        let b1t = 1.0 - config.beta1.powi(it as i32 + 1);
        let b2t = 1.0 - config.beta2.powi(it as i32 + 1);
        for i in 0..n {
            let g = g_tau[i] * tau[i];
            m1[i] = config.beta1 * m1[i] + (1.0 - config.beta1) * g;
            m2[i] = config.beta2 * m2[i] + (1.0 - config.beta2) * g * g;
            theta[i] -= lr * (m1[i] / b1t) / ((m2[i] / b2t).sqrt() + config.adam_eps);
        }
    }
    let mut tau_hat: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    tau_hat.sort_by(f64::total_cmp);
    let h_hat = SpectralDistribution::uniform(tau_hat.clone())?;

    let mut result = EstimationResult {
        tau_hat,
        h_hat,
        support: None,
        grid: None,
        density: None,
        loss_trace,
        warnings: Vec::new(),
        support_error: None,
    };
    if config.skip_density {
        return Ok(result);
    }
    let h_support = result.h_hat.merged(SUPPORT_MERGE_RTOL);
    let support = match find_support_mixture(&h_support, &d, c, config.branches.as_deref()) {
        Ok(s) => s,
        Err(e) => {
            warn!("support stage failed: {e}");
            result.support_error = Some(e.to_string());
            return Ok(result);
        }
    };
    for msg in heavy_tail_warnings(&sorted, &support) {
        warn!("{msg}");
        result.warnings.push(msg);
    }
    let grid = build_grid(&support, config.omega, config.grid_strategy, Some(&sorted))?;
    let density = density_curve(&h_support, &d, c, &grid, support.zero_mass)?;
    result.support = Some(support);
    result.grid = Some(grid);
    result.density = Some(density);
    Ok(result)
}
