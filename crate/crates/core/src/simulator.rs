//! Monte Carlo sampling of `B = (1/N) T^{1/2} Z W Z^T T^{1/2}` and empirical
//! spectrum utilities.

use log::warn;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::CdfCurve;
use crate::distributions::{SpectralDistribution, WeightDistribution, WeightKind};
use crate::error::{Error, Result};
use crate::grid::largest_remainder;

/// Identifier of the random generator, recorded in outputs.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng";

/// Rows of `Z` generated and accumulated at a time.
const BLOCK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Noise {
    Gaussian,
    /// Student t with `nu` degrees of freedom, rescaled to unit variance.
    Student { nu: f64 },
}

impl Noise {
    pub fn validate(&self) -> Result<()> {
        if let Noise::Student { nu } = *self {
            if !(nu.is_finite() && nu > 2.0) {
                return Err(Error::invalid(format!("student noise needs nu > 2, got {nu}")));
            }
            if nu < 12.0 {
                warn!("student noise with nu = {nu} < 12: heavy tails, the limiting law may not describe the sample");
            }
        }
        Ok(())
    }

    /// Fills `buf` with i.i.d. centred unit-variance draws.
    pub fn fill<R: Rng>(&self, rng: &mut R, buf: &mut [f64]) {
        match *self {
            Noise::Gaussian => buf.iter_mut().for_each(|v| *v = StandardNormal.sample(rng)),
            Noise::Student { nu } => {
                let dist = StudentT::new(nu).expect("validated degrees of freedom");
                let scale = ((nu - 2.0) / nu).sqrt();
                buf.iter_mut().for_each(|v| *v = scale * dist.sample(rng));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub n: usize,
    pub c: f64,
    pub noise: Noise,
    pub seed: u64,
    pub h: SpectralDistribution,
    pub d: WeightDistribution,
}

impl SimulationConfig {
    /// Number of observations `N = round(n / c)`.
    pub fn big_n(&self) -> usize {
        (self.n as f64 / self.c).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::invalid(format!("concentration must be positive, got {}", self.c)));
        }
        if self.big_n() == 0 {
            return Err(Error::invalid("concentration too large: no observations"));
        }
        self.noise.validate()
    }

    /// Stable fingerprint of the configuration (FNV-1a of its debug form).
    pub fn fingerprint(&self) -> u64 {
        let s = format!("{self:?}");
        s.bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalSpectrum {
    pub eigenvalues: Vec<f64>,
    pub config_hash: u64,
}

impl EmpiricalSpectrum {
    /// Sorts and clamps tiny negative values (rounding noise) to zero.
    pub fn from_values(mut values: Vec<f64>, config_hash: u64) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Eigen("non-finite eigenvalue".into()));
        }
        values.sort_by(f64::total_cmp);
        let scale = values.last().map(|v| v.abs()).unwrap_or(0.0).max(1.0);
        for v in values.iter_mut() {
            if *v < 0.0 && *v >= -1e-10 * scale {
                *v = 0.0;
            }
        }
        Ok(Self {
            eigenvalues: values,
            config_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.eigenvalues.iter().sum::<f64>() / self.len().max(1) as f64
    }

    pub fn ecdf(&self, x: f64) -> f64 {
        self.eigenvalues.partition_point(|&v| v <= x) as f64 / self.len().max(1) as f64
    }
}

/// `n` atoms of `H` repeated by weight-proportional counts.
pub fn expand_population(h: &SpectralDistribution, n: usize) -> Vec<f64> {
    let shares: Vec<f64> = h.weights().iter().map(|w| w * n as f64).collect();
    let counts = largest_remainder(&shares, n);
    h.atoms()
        .iter()
        .zip(counts)
        .flat_map(|(&a, k)| std::iter::repeat_n(a, k))
        .collect()
}

/// `N` deterministic weights whose empirical law approximates `D`.
///
/// EWMA weights are `β_N e^{-αi/N}`, `i = 1..N`, with `β_N` making their
/// mean exactly one; uniform weights are the quantiles at `(i - 1/2)/N`;
/// Dirac mixtures use weight-proportional counts.
pub fn realize_weights(d: &WeightDistribution, big_n: usize) -> Vec<f64> {
    let nf = big_n as f64;
    match d.kind() {
        WeightKind::Ewma { alpha } => {
            let raw: Vec<f64> = (1..=big_n).map(|i| (-alpha * i as f64 / nf).exp()).collect();
            let beta = nf / raw.iter().sum::<f64>();
            raw.into_iter().map(|w| beta * w).collect()
        }
        WeightKind::Uniform { alpha } => (1..=big_n)
            .map(|i| 1.0 - alpha / 2.0 + alpha * (i as f64 - 0.5) / nf)
            .collect(),
        WeightKind::Dirac { atoms, weights } => {
            let shares: Vec<f64> = weights.iter().map(|w| w * nf).collect();
            let counts = largest_remainder(&shares, big_n);
            atoms
                .iter()
                .zip(counts)
                .flat_map(|(&a, k)| std::iter::repeat_n(a, k))
                .collect()
        }
    }
}

/// `A = (1/N) Z W Z^T` for `Z` with `n` rows and `weights.len()` columns,
/// drawing `Z` column by column from `rng`. The columns are processed in blocks;
/// each block contributes `Y Y^T` with `Y` the block of `Z` with columns scaled
/// by `√w`.
pub fn weighted_gram<R: Rng>(n: usize, weights: &[f64], noise: &Noise, rng: &mut R) -> DMatrix<f64> {
    let big_n = weights.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    let mut buf = vec![0.0; BLOCK * n];
    let mut start = 0;
    while start < big_n {
        let b = BLOCK.min(big_n - start);
        let slice = &mut buf[..b * n];
        noise.fill(rng, slice);
        // Column j of this n x b block is column start + j of Z.
        let mut y = DMatrix::from_column_slice(n, b, slice);
        for (j, mut col) in y.column_iter_mut().enumerate() {
            col *= weights[start + j].sqrt();
        }
        a.gemm(1.0, &y, &y.transpose(), 1.0);
        start += b;
    }
    a /= big_n as f64;
    a
}

/// `B = √T A √T` for diagonal `T`.
pub fn scale_by_population(a: &DMatrix<f64>, tau: &[f64]) -> DMatrix<f64> {
    let s: Vec<f64> = tau.iter().map(|t| t.sqrt()).collect();
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| s[i] * a[(i, j)] * s[j])
}

/// Eigenvalues of one draw of `B`.
pub fn sample_spectrum(config: &SimulationConfig) -> Result<EmpiricalSpectrum> {
    config.validate()?;
    let tau = expand_population(&config.h, config.n);
    let weights = realize_weights(&config.d, config.big_n());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let a = weighted_gram(config.n, &weights, &config.noise, &mut rng);
    let b = scale_by_population(&a, &tau);
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Eigen("matrix has non-finite entries".into()));
    }
    let eig = b.symmetric_eigenvalues();
    EmpiricalSpectrum::from_values(eig.iter().copied().collect(), config.fingerprint())
}

/// Independent draws with seeds derived from `config.seed`.
pub fn sample_replicas(config: &SimulationConfig, count: usize) -> Result<Vec<EmpiricalSpectrum>> {
    (0..count)
        .into_par_iter()
        .map(|r| {
            let mut cfg = config.clone();
            cfg.seed = derive_seed(config.seed, r as u64, 0);
            sample_spectrum(&cfg)
        })
        .collect()
}

/// Mixes a base seed with two counters (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(b.wrapping_mul(0xd1b5_4a32_d192_ed03))
        .wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Kolmogorov-Smirnov distance between the empirical law of `sample` and a
/// limiting distribution function. Both one-sided limits of the step function
/// are compared at every sample point and at the atom at zero.
pub fn ks_distance(sample: &EmpiricalSpectrum, cdf: &CdfCurve) -> f64 {
    let x = &sample.eigenvalues;
    let n = x.len() as f64;
    let mut sup: f64 = 0.0;
    let mut i = 0;
    while i < x.len() {
        let mut j = i;
        while j < x.len() && x[j] == x[i] {
            j += 1;
        }
        sup = sup
            .max((cdf.eval_left(x[i]) - i as f64 / n).abs())
            .max((cdf.eval(x[i]) - j as f64 / n).abs());
        i = j;
    }
    sup = sup.max((cdf.eval(0.0) - sample.ecdf(0.0)).abs());
    sup.min(1.0)
}

/// Two-sample Kolmogorov-Smirnov distance between sorted samples.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut sup: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => break,
        };
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}
