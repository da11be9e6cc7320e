//! Population spectrum `H` and weight law `D`.
//!
//! `H` is always a finite Dirac mixture. `D` is a Dirac mixture, the limiting
//! law of exponentially weighted moving-average weights, or a uniform law
//! centred on 1. For `D` we provide the transform
//! `m_LD(x) = ∫ δ/(δ - x) dD(δ)`, its first two derivatives, its inverse on
//! every connected component of `R \ S_D` (one "branch" per component), and
//! the kernel `∫ δ/(z - δ q) dD(δ)` of the fixed-point equation for `X`.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Poly;
use crate::roots::newton_bisect;
use crate::C64;

/// Atoms closer than this (relative) are merged on construction.
pub const MERGE_RTOL: f64 = 1e-12;

/// Beyond `|x| > FAR_RATIO * d2` the moment expansion of `m_LD` is used in
/// place of the closed forms, which cancel badly there.
const FAR_RATIO: f64 = 4.0;
const SERIES_TERMS: usize = 48;

/// Wire format for distributions:
/// `{"kind": "dirac"|"ewma"|"uniform", "atoms": [..], "weights": [..], "alpha": a}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DistributionSpec {
    Dirac { atoms: Vec<f64>, weights: Vec<f64> },
    Ewma { alpha: f64 },
    Uniform { alpha: f64 },
}

fn sort_and_merge(atoms: &[f64], weights: &[f64], rtol: f64) -> (Vec<f64>, Vec<f64>) {
    let mut pairs: Vec<(f64, f64)> = atoms.iter().copied().zip(weights.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out_a: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut out_w: Vec<f64> = Vec::with_capacity(pairs.len());
    for (a, w) in pairs {
        match (out_a.last_mut(), out_w.last_mut()) {
            (Some(la), Some(lw)) if (a - *la).abs() <= rtol * la.abs() => {
                *la = (*la * *lw + a * w) / (*lw + w);
                *lw += w;
            }
            _ => {
                out_a.push(a);
                out_w.push(w);
            }
        }
    }
    (out_a, out_w)
}

fn validate_mixture(atoms: &[f64], weights: &[f64], what: &str) -> Result<Vec<f64>> {
    if atoms.is_empty() {
        return Err(Error::invalid(format!("{what}: no atoms")));
    }
    if atoms.len() != weights.len() {
        return Err(Error::LengthMismatch {
            expected: atoms.len(),
            got: weights.len(),
        });
    }
    if let Some(a) = atoms.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return Err(Error::invalid(format!("{what}: atom {a} is not strictly positive")));
    }
    if let Some(w) = weights.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
        return Err(Error::invalid(format!("{what}: weight {w} is not strictly positive")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!("{what}: weights sum to {total}, expected 1")));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Population spectrum `H = Σ w_i δ_{τ_i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralDistribution {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl SpectralDistribution {
    /// Atoms must be positive and weights positive with unit sum (within
    /// `1e-6`; they are renormalised exactly). Atoms are sorted and near
    /// duplicates merged.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let weights = validate_mixture(&atoms, &weights, "population spectrum")?;
        let (atoms, weights) = sort_and_merge(&atoms, &weights, MERGE_RTOL);
        Ok(Self { atoms, weights })
    }

    /// Equal weights `1/n` on each atom.
    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        let w = 1.0 / atoms.len().max(1) as f64;
        let weights = vec![w; atoms.len()];
        Self::new(atoms, weights)
    }

    pub fn dirac(atom: f64) -> Result<Self> {
        Self::new(vec![atom], vec![1.0])
    }

    pub fn from_spec(spec: &DistributionSpec) -> Result<Self> {
        match spec {
            DistributionSpec::Dirac { atoms, weights } => Self::new(atoms.clone(), weights.clone()),
            _ => Err(Error::invalid("population spectrum must be a dirac mixture")),
        }
    }

    pub fn to_spec(&self) -> DistributionSpec {
        DistributionSpec::Dirac {
            atoms: self.atoms.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn h1(&self) -> f64 {
        self.atoms[0]
    }

    pub fn h2(&self) -> f64 {
        self.atoms[self.atoms.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(a, w)| a * w).sum()
    }

    /// Copy with atoms within `rtol` (relative) merged.
    pub fn merged(&self, rtol: f64) -> Self {
        let (atoms, weights) = sort_and_merge(&self.atoms, &self.weights, rtol);
        Self { atoms, weights }
    }

    /// Copy with every atom multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|a| a * s).collect(),
            weights: self.weights.clone(),
        }
    }

    /// `t(u) = c ∫ τ/(τ - u) dH` with its first two derivatives.
    pub fn t(&self, c: f64, u: f64) -> Result<(f64, f64, f64)> {
        let (mut t0, mut t1, mut t2) = (0.0, 0.0, 0.0);
        for (&tau, &w) in self.atoms.iter().zip(&self.weights) {
            if tau == u {
                return Err(Error::Domain {
                    what: "population spectrum",
                    value: u,
                });
            }
            let r = 1.0 / (tau - u);
            let a = w * tau * r;
            t0 += a;
            t1 += a * r;
            t2 += a * r * r;
        }
        Ok((c * t0, c * t1, 2.0 * c * t2))
    }

    /// `q(X) = c ∫ τ/(τX + 1) dH` and `dq/dX`, for complex `X`.
    pub fn q(&self, c: f64, x: C64) -> (C64, C64) {
        let mut q = C64::new(0.0, 0.0);
        let mut dq = C64::new(0.0, 0.0);
        for (&tau, &w) in self.atoms.iter().zip(&self.weights) {
            let r = (x * tau + 1.0).inv();
            q += w * tau * r;
            dq -= w * tau * tau * r * r;
        }
        (q * c, dq * c)
    }
}

/// Kind of weight law.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightKind {
    Dirac { atoms: Vec<f64>, weights: Vec<f64> },
    /// Limit law of EWMA weights with decay `alpha`, supported on
    /// `[β e^{-α}, β]` with `β = α / (1 - e^{-α})`.
    Ewma { alpha: f64 },
    /// Uniform on `[1 - α/2, 1 + α/2]`.
    Uniform { alpha: f64 },
}

/// Weight law `D` with its support intervals and normalised moments.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDistribution {
    kind: WeightKind,
    intervals: Vec<(f64, f64)>,
    mean: f64,
    /// `μ_k / d2^k` for `k = 0..=SERIES_TERMS`.
    scaled_moments: Vec<f64>,
    /// `m_LD(-FAR_RATIO d2) > 0` and `m_LD(FAR_RATIO d2) < 0`.
    far_t: (f64, f64),
}

impl WeightDistribution {
    fn build(kind: WeightKind) -> Self {
        let intervals = match &kind {
            WeightKind::Dirac { atoms, .. } => atoms.iter().map(|&a| (a, a)).collect(),
            WeightKind::Ewma { alpha } => {
                let beta = ewma_beta(*alpha);
                vec![(beta * (-alpha).exp(), beta)]
            }
            WeightKind::Uniform { alpha } => vec![(1.0 - alpha / 2.0, 1.0 + alpha / 2.0)],
        };
        let d2 = intervals.last().map(|iv| iv.1).unwrap_or(1.0);
        let scaled_moments = (0..=SERIES_TERMS)
            .map(|k| match &kind {
                WeightKind::Dirac { atoms, weights } => atoms
                    .iter()
                    .zip(weights)
                    .map(|(a, w)| w * (a / d2).powi(k as i32))
                    .sum(),
                WeightKind::Ewma { alpha } => {
                    if k == 0 {
                        1.0
                    } else {
                        let kf = k as f64;
                        -(-alpha * kf).exp_m1() / (kf * alpha)
                    }
                }
                WeightKind::Uniform { alpha } => {
                    let kf = k as f64 + 1.0;
                    let ratio = intervals[0].0 / d2;
                    (1.0 - ratio.powi(k as i32 + 1)) / (kf * alpha / d2)
                }
            })
            .collect::<Vec<f64>>();
        let mean = scaled_moments[1] * d2;
        let mut d = Self {
            kind,
            intervals,
            mean,
            scaled_moments,
            far_t: (0.0, 0.0),
        };
        let pos = d.m_ld_all(-FAR_RATIO * d2).map(|v| v.0).unwrap_or(0.0);
        let neg = d.m_ld_all(FAR_RATIO * d2).map(|v| v.0).unwrap_or(0.0);
        d.far_t = (pos, neg);
        d
    }

    /// Finite Dirac mixture. Weights must sum to one; the mean need not be
    /// one (a warning is logged when it is not).
    pub fn dirac(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let weights = validate_mixture(&atoms, &weights, "weight distribution")?;
        let (atoms, weights) = sort_and_merge(&atoms, &weights, MERGE_RTOL);
        let d = Self::build(WeightKind::Dirac { atoms, weights });
        if (d.mean - 1.0).abs() > 1e-9 {
            warn!("weight distribution has mean {} (not normalised to 1)", d.mean);
        }
        Ok(d)
    }

    pub fn identity() -> Self {
        Self::build(WeightKind::Dirac {
            atoms: vec![1.0],
            weights: vec![1.0],
        })
    }

    pub fn ewma(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0 && alpha <= 500.0) {
            return Err(Error::invalid(format!("ewma alpha must lie in (0, 500], got {alpha}")));
        }
        Ok(Self::build(WeightKind::Ewma { alpha }))
    }

    /// Uniform law on `[1 - α/2, 1 + α/2]`, `α ∈ [0, 2)`. Very small `α`
    /// (below `1e-8`) degenerates to the point mass at 1.
    pub fn uniform(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && (0.0..2.0).contains(&alpha)) {
            return Err(Error::invalid(format!("uniform alpha must lie in [0, 2), got {alpha}")));
        }
        if alpha < 1e-8 {
            return Ok(Self::identity());
        }
        Ok(Self::build(WeightKind::Uniform { alpha }))
    }

    /// Empirical law of observed weights, rescaled to mean one.
    pub fn from_samples(samples: &[f64]) -> Result<Self> {
        Self::quantile_binned(samples, usize::MAX)
    }

    /// Empirical law of observed weights rescaled to mean one, with at most
    /// `max_atoms` atoms: when there are more distinct values, the sorted
    /// samples are split into `max_atoms` equal-count bins and each bin is
    /// replaced by its mean.
    pub fn quantile_binned(samples: &[f64], max_atoms: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("no weight samples"));
        }
        if let Some(w) = samples.iter().find(|w| !(w.is_finite() && **w > 0.0)) {
            return Err(Error::invalid(format!("weight sample {w} is not strictly positive")));
        }
        let n = samples.len();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let mut sorted: Vec<f64> = samples.iter().map(|w| w / mean).collect();
        sorted.sort_by(f64::total_cmp);
        let (mut atoms, mut weights) = sort_and_merge(&sorted, &vec![1.0 / n as f64; n], MERGE_RTOL);
        if atoms.len() > max_atoms.max(1) {
            let bins = max_atoms.max(1);
            atoms.clear();
            weights.clear();
            for b in 0..bins {
                let lo = b * n / bins;
                let hi = (b + 1) * n / bins;
                if hi > lo {
                    let chunk = &sorted[lo..hi];
                    atoms.push(chunk.iter().sum::<f64>() / chunk.len() as f64);
                    weights.push(chunk.len() as f64 / n as f64);
                }
            }
        }
        Self::dirac(atoms, weights)
    }

    pub fn from_spec(spec: &DistributionSpec) -> Result<Self> {
        match spec {
            DistributionSpec::Dirac { atoms, weights } => Self::dirac(atoms.clone(), weights.clone()),
            DistributionSpec::Ewma { alpha } => Self::ewma(*alpha),
            DistributionSpec::Uniform { alpha } => Self::uniform(*alpha),
        }
    }

    pub fn to_spec(&self) -> DistributionSpec {
        match &self.kind {
            WeightKind::Dirac { atoms, weights } => DistributionSpec::Dirac {
                atoms: atoms.clone(),
                weights: weights.clone(),
            },
            WeightKind::Ewma { alpha } => DistributionSpec::Ewma { alpha: *alpha },
            WeightKind::Uniform { alpha } => DistributionSpec::Uniform { alpha: *alpha },
        }
    }

    pub fn kind(&self) -> &WeightKind {
        &self.kind
    }

    /// Support intervals `[δ1^(k), δ2^(k)]`, sorted.
    pub fn support_intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    /// Number of connected components `M` of the support, which is also the
    /// number of branches of the inverse of `m_LD`.
    pub fn n_branches(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_convex(&self) -> bool {
        self.intervals.len() == 1
    }

    pub fn d1(&self) -> f64 {
        self.intervals[0].0
    }

    pub fn d2(&self) -> f64 {
        self.intervals[self.intervals.len() - 1].1
    }

    /// `∫ δ dD`.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    fn check_off_support(&self, x: f64) -> Result<()> {
        if x.is_nan() || self.intervals.iter().any(|&(l, r)| x >= l && x <= r) {
            return Err(Error::Domain {
                what: "weight distribution",
                value: x,
            });
        }
        Ok(())
    }

    fn is_far(&self, x: f64) -> bool {
        x.abs() > FAR_RATIO * self.d2()
    }

    /// `m_LD(x)` for real `x` off `S_D`.
    pub fn m_ld(&self, x: f64) -> Result<f64> {
        Ok(self.m_ld_all(x)?.0)
    }

    /// `(m_LD'(x), m_LD''(x))`.
    pub fn m_ld_derivatives(&self, x: f64) -> Result<(f64, f64)> {
        let (_, d1, d2) = self.m_ld_all(x)?;
        Ok((d1, d2))
    }

    /// `(m_LD, m_LD', m_LD'')` at real `x` off `S_D`.
    pub fn m_ld_all(&self, x: f64) -> Result<(f64, f64, f64)> {
        self.check_off_support(x)?;
        if let WeightKind::Dirac { atoms, weights } = &self.kind {
            let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
            for (&d, &w) in atoms.iter().zip(weights) {
                let r = 1.0 / (d - x);
                let a = w * d * r;
                m0 += a;
                m1 += a * r;
                m2 += a * r * r;
            }
            return Ok((m0, m1, 2.0 * m2));
        }
        if self.is_far(x) {
            let r = self.d2() / x;
            let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
            let mut rk = 1.0;
            for k in 1..=SERIES_TERMS {
                rk *= r;
                let kf = k as f64;
                let term = self.scaled_moments[k] * rk;
                s0 += term;
                s1 += kf * term;
                s2 += kf * (kf + 1.0) * term;
            }
            return Ok((-s0, s1 / x, -s2 / (x * x)));
        }
        let (a, b) = self.intervals[0];
        let ia = 1.0 / (a - x);
        let ib = 1.0 / (b - x);
        match self.kind {
            WeightKind::Ewma { alpha } => {
                let m0 = (alpha * ia).ln_1p() / alpha;
                let m1 = (ia - ib) / alpha;
                let m2 = (ia * ia - ib * ib) / alpha;
                Ok((m0, m1, m2))
            }
            WeightKind::Uniform { alpha } => {
                let l = (alpha * ia).ln_1p();
                let m0 = 1.0 + x * l / alpha;
                let m1 = (l + x * (ia - ib)) / alpha;
                let m2 = 2.0 * ((ia - ib) + 0.5 * x * (ia * ia - ib * ib)) / alpha;
                Ok((m0, m1, m2))
            }
            WeightKind::Dirac { .. } => unreachable!(),
        }
    }

    /// `m_LD(z)` for complex `z` off the real support.
    pub fn m_ld_complex(&self, z: C64) -> Result<C64> {
        Ok(self.m_ld_complex_d(z)?.0)
    }

    fn m_ld_complex_d(&self, z: C64) -> Result<(C64, C64)> {
        if z.im == 0.0 {
            self.check_off_support(z.re)?;
        }
        if let WeightKind::Dirac { atoms, weights } = &self.kind {
            let mut m0 = C64::new(0.0, 0.0);
            let mut m1 = C64::new(0.0, 0.0);
            for (&d, &w) in atoms.iter().zip(weights) {
                let r = (C64::new(d, 0.0) - z).inv();
                m0 += w * d * r;
                m1 += w * d * r * r;
            }
            return Ok((m0, m1));
        }
        let d2 = self.d2();
        if z.norm() > FAR_RATIO * d2 {
            let r = C64::new(d2, 0.0) / z;
            let mut s0 = C64::new(0.0, 0.0);
            let mut s1 = C64::new(0.0, 0.0);
            let mut rk = C64::new(1.0, 0.0);
            for k in 1..=SERIES_TERMS {
                rk *= r;
                let term = rk * self.scaled_moments[k];
                s0 += term;
                s1 += term * k as f64;
            }
            return Ok((-s0, s1 / z));
        }
        let (a, b) = self.intervals[0];
        let ia = (C64::new(a, 0.0) - z).inv();
        let ib = (C64::new(b, 0.0) - z).inv();
        match self.kind {
            WeightKind::Ewma { alpha } => Ok((ln_1p_c(ia * alpha) / alpha, (ia - ib) / alpha)),
            WeightKind::Uniform { alpha } => {
                let l = ln_1p_c(ia * alpha);
                Ok((z * l / alpha + 1.0, (l + z * (ia - ib)) / alpha))
            }
            WeightKind::Dirac { .. } => unreachable!(),
        }
    }

    /// `g(q) = ∫ δ/(z - δ q) dD` and `g'(q) = ∫ δ²/(z - δ q)² dD`.
    pub fn kernel(&self, z: C64, q: C64) -> Result<(C64, C64)> {
        if let WeightKind::Dirac { atoms, weights } = &self.kind {
            let mut g = C64::new(0.0, 0.0);
            let mut dg = C64::new(0.0, 0.0);
            for (&d, &w) in atoms.iter().zip(weights) {
                let den = z - q * d;
                if den == C64::new(0.0, 0.0) {
                    return Err(Error::Domain {
                        what: "weight distribution",
                        value: d,
                    });
                }
                let r = den.inv();
                g += w * d * r;
                dg += w * d * d * r * r;
            }
            return Ok((g, dg));
        }
        let d2 = self.d2();
        if q.norm() * d2 * FAR_RATIO <= z.norm() {
            // g = Σ μ_k q^{k-1} / z^k
            let r = q * d2 / z;
            let mut s0 = C64::new(0.0, 0.0);
            let mut s1 = C64::new(0.0, 0.0);
            let mut rk = C64::new(1.0, 0.0);
            for k in 1..=SERIES_TERMS {
                s0 += rk * self.scaled_moments[k];
                if k < SERIES_TERMS {
                    s1 += rk * (k as f64 * self.scaled_moments[k + 1]);
                }
                rk *= r;
            }
            let g = s0 * d2 / z;
            let dg = s1 * (d2 * d2) / (z * z);
            return Ok((g, dg));
        }
        let w = z / q;
        if w.im.abs() <= 1e-300 {
            self.check_off_support(w.re)?;
        }
        let (m, dm) = self.m_ld_complex_d(w)?;
        Ok((-m / q, (m + w * dm) / (q * q)))
    }

    /// Branch index (1-based) whose domain contains `x`, or `None` inside `S_D`.
    pub fn branch_of(&self, x: f64) -> Option<usize> {
        let m = self.n_branches();
        if x < self.d1() || x > self.d2() {
            return Some(m);
        }
        (1..m).find(|&k| x > self.intervals[k - 1].1 && x < self.intervals[k].0)
    }

    /// Open interval of `y` values reached by branch `k`; branch `M` also
    /// excludes `y = 0`.
    pub fn branch_range(&self, k: usize) -> Result<(f64, f64)> {
        self.check_branch(k)?;
        // Every kind supported here has m_LD -> ±∞ at the support edges.
        Ok((f64::NEG_INFINITY, f64::INFINITY))
    }

    fn check_branch(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_branches() {
            return Err(Error::invalid(format!(
                "branch {k} out of range 1..={}",
                self.n_branches()
            )));
        }
        Ok(())
    }

    /// Bracket `(lo, hi)` inside the domain of branch `k` with
    /// `m_LD(lo) < y < m_LD(hi)`.
    fn bracket(&self, k: usize, y: f64) -> Result<(f64, f64)> {
        let m = self.n_branches();
        let below = |x: f64| self.m_ld(x).map(|v| v < y).unwrap_or(false);
        let above = |x: f64| self.m_ld(x).map(|v| v > y).unwrap_or(false);
        let fail = || Error::NoSolution(format!("could not bracket m_LD = {y} on branch {k}"));
        if k < m {
            let (l, r) = (self.intervals[k - 1].1, self.intervals[k].0);
            let mut dl = 0.5 * (r - l);
            let mut dr = 0.5 * (r - l);
            let mut i = 0;
            while !below(l + dl) {
                dl *= 0.5;
                i += 1;
                if i > 1100 || l + dl == l {
                    return Err(fail());
                }
            }
            i = 0;
            while !above(r - dr) {
                dr *= 0.5;
                i += 1;
                if i > 1100 || r - dr == r {
                    return Err(fail());
                }
            }
            return Ok((l + dl, r - dr));
        }
        if y > 0.0 {
            // x < d1; m increases from 0+ at -∞ to +∞ (or a finite limit) at d1.
            let edge = self.d1();
            let mut far = (FAR_RATIO * self.d2()).max(2.0 * self.mean / y);
            let mut i = 0;
            while !below(edge - far) {
                far *= 2.0;
                i += 1;
                if i > 1100 || !far.is_finite() {
                    return Err(fail());
                }
            }
            let mut near = edge.min(far) * 0.5;
            i = 0;
            while !above(edge - near) {
                near *= 0.5;
                i += 1;
                if i > 1100 || edge - near == edge {
                    return Err(fail());
                }
            }
            Ok((edge - far, edge - near))
        } else {
            let edge = self.d2();
            let mut far = (FAR_RATIO * self.d2()).max(2.0 * self.mean / -y);
            let mut i = 0;
            while !above(edge + far) {
                far *= 2.0;
                i += 1;
                if i > 1100 || !far.is_finite() {
                    return Err(fail());
                }
            }
            let mut near = edge * 0.5;
            i = 0;
            while !below(edge + near) {
                near *= 0.5;
                i += 1;
                if i > 1100 || edge + near == edge {
                    return Err(fail());
                }
            }
            Ok((edge + near, edge + far))
        }
    }

    fn bracketed_inverse(&self, k: usize, y: f64, start: Option<f64>) -> Result<f64> {
        let (lo, hi) = self.bracket(k, y)?;
        newton_bisect(
            |x| match self.m_ld_all(x) {
                Ok((m, dm, _)) => (m - y, dm),
                Err(_) => (f64::NAN, f64::NAN),
            },
            lo,
            hi,
            start,
            1e-14 * y.abs().max(1.0),
            400,
        )
    }

    /// Inverse of `m_LD` on branch `k ∈ 1..=M`.
    ///
    /// Branches `k < M` live in the gap `]δ2^(k), δ1^(k+1)[`; branch `M` lives
    /// on `R \ [d1, d2]`, where `y > 0` maps left of the support and `y < 0`
    /// right of it. Uses closed forms where they exist (single atom, two
    /// atoms, EWMA) and a safeguarded Newton iteration otherwise.
    pub fn m_ld_inverse(&self, k: usize, y: f64) -> Result<f64> {
        self.check_branch(k)?;
        if !y.is_finite() {
            return Err(Error::NoSolution(format!("m_LD cannot reach {y}")));
        }
        let m = self.n_branches();
        if k == m && y == 0.0 {
            return Err(Error::NoSolution("m_LD vanishes only at infinity".into()));
        }
        let closed = match &self.kind {
            WeightKind::Ewma { alpha } => Some(self.d1() - alpha / (alpha * y).exp_m1()),
            WeightKind::Dirac { atoms, weights } if atoms.len() == 1 => Some(atoms[0] * (1.0 - weights[0] / y)),
            WeightKind::Dirac { atoms, weights } if atoms.len() == 2 => {
                two_dirac_inverse(atoms, weights, k, y)
            }
            _ => None,
        };
        if let Some(x) = closed {
            if self.branch_of(x) == Some(k) {
                if let Ok(v) = self.m_ld(x) {
                    if (v - y).abs() <= 1e-12 * y.abs().max(1.0) {
                        return Ok(x);
                    }
                }
                return self.bracketed_inverse(k, y, Some(x));
            }
        }
        self.bracketed_inverse(k, y, None)
    }

    /// All `M` branch inverses at once. For Dirac mixtures the roots of
    /// `P - yQ` with `P(X) = Σ w_i δ_i Π_{j≠i}(δ_j - X)` and
    /// `Q(X) = Π(δ_i - X)` are found as companion-matrix eigenvalues, assigned
    /// to branches by location, and polished. Entry `k - 1` is branch `k`;
    /// branch `M` is `None` when `y = 0`.
    pub fn m_ld_inverse_all(&self, y: f64) -> Result<Vec<Option<f64>>> {
        let m = self.n_branches();
        let WeightKind::Dirac { atoms, weights } = &self.kind else {
            return Ok(vec![self.m_ld_inverse(1, y).ok()]);
        };
        let mut p = Poly::constant(0.0);
        for i in 0..m {
            let mut term = Poly::constant(weights[i] * atoms[i]);
            for (j, &d) in atoms.iter().enumerate() {
                if j != i {
                    term.mul_linear(d);
                }
            }
            p = p.axpy(1.0, &term);
        }
        let mut q = Poly::constant(1.0);
        for &d in atoms {
            q.mul_linear(d);
        }
        let poly = p.axpy(-y, &q);
        let mut seeds: Vec<Option<f64>> = vec![None; m];
        for r in poly.roots() {
            if r.im.abs() <= 1e-6 * (1.0 + r.re.abs()) {
                if let Some(k) = self.branch_of(r.re) {
                    seeds[k - 1].get_or_insert(r.re);
                }
            }
        }
        (1..=m)
            .map(|k| {
                if k == m && y == 0.0 {
                    return Ok(None);
                }
                self.bracketed_inverse(k, y, seeds[k - 1]).map(Some)
            })
            .collect()
    }

    /// Far-field form of branch `M`: with `s = 1/x`, returns
    /// `ρ(s) = m_LD(1/s)/s` and its first two derivatives in `s`.
    fn rho(&self, s: f64) -> (f64, f64, f64) {
        if let WeightKind::Dirac { atoms, weights } = &self.kind {
            let (mut r0, mut r1, mut r2) = (0.0, 0.0, 0.0);
            for (&d, &w) in atoms.iter().zip(weights) {
                let inv = 1.0 / (d * s - 1.0);
                let a = w * d * inv;
                r0 += a;
                r1 -= a * d * inv;
                r2 += 2.0 * a * d * d * inv * inv;
            }
            return (r0, r1, r2);
        }
        let d2 = self.d2();
        let r = s * d2;
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        let mut rk = 1.0;
        for k in 1..=SERIES_TERMS {
            let kf = k as f64;
            let nu = self.scaled_moments[k];
            s0 += nu * rk;
            if k < SERIES_TERMS {
                s1 += kf * self.scaled_moments[k + 1] * rk;
            }
            if k + 2 <= SERIES_TERMS {
                s2 += kf * (kf + 1.0) * self.scaled_moments[k + 2] * rk;
            }
            rk *= r;
        }
        (-d2 * s0, -d2 * d2 * s1, -d2 * d2 * d2 * s2)
    }

    /// `φ_k(t) = t · (m_LD^(k))^{-1}(t)` with its first two derivatives in `t`.
    ///
    /// `φ_M` extends continuously through `t = 0` with `φ_M(0) = -∫δ dD`.
    pub fn phi(&self, k: usize, t: f64) -> Result<(f64, f64, f64)> {
        self.check_branch(k)?;
        let m = self.n_branches();
        let (pos, neg) = self.far_t;
        if k == m && ((t >= 0.0 && t < pos) || (t <= 0.0 && t > neg)) {
            let lim = 1.0 / (FAR_RATIO * self.d2());
            let psi = |s: f64| {
                let (r0, r1, _) = self.rho(s);
                (s * r0, r0 + s * r1)
            };
            let s = newton_bisect(
                |s| {
                    let (p, dp) = psi(s);
                    (t - p, -dp)
                },
                -lim,
                lim,
                Some(-t / self.mean),
                1e-15 * t.abs().max(1e-300),
                200,
            )?;
            let (r0, r1, r2) = self.rho(s);
            let dpsi = r0 + s * r1;
            let d2psi = 2.0 * r1 + s * r2;
            let p1 = r1 / dpsi;
            let p2 = (r2 * dpsi - r1 * d2psi) / (dpsi * dpsi * dpsi);
            return Ok((r0, p1, p2));
        }
        let v = self.m_ld_inverse(k, t)?;
        let (_, m1, m2) = self.m_ld_all(v)?;
        Ok((t * v, v + t / m1, 2.0 / m1 - t * m2 / (m1 * m1 * m1)))
    }
}

/// `β = α / (1 - e^{-α})`.
pub fn ewma_beta(alpha: f64) -> f64 {
    alpha / -(-alpha).exp_m1()
}

/// Roots of `y x² + (μ - y(δ1 + δ2)) x + δ1 δ2 (y - 1) = 0`, which is
/// `m_LD(x) = y` for a two-atom law with unit total weight; branch 1 is the
/// root between the atoms.
fn two_dirac_inverse(atoms: &[f64], weights: &[f64], k: usize, y: f64) -> Option<f64> {
    let (d1, d2) = (atoms[0], atoms[1]);
    let mu = weights[0] * d1 + weights[1] * d2;
    let a = y;
    let b = mu - y * (d1 + d2);
    let c = d1 * d2 * (y - (weights[0] + weights[1]));
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let qq = -0.5 * (b + disc.sqrt().copysign(b));
    let roots = [qq / a, if qq != 0.0 { c / qq } else { f64::NAN }];
    let inside = |x: f64| x > d1 && x < d2;
    roots
        .into_iter()
        .find(|&x| x.is_finite() && if k == 1 { inside(x) } else { !inside(x) && x != d1 && x != d2 })
}

/// `ln(1 + z)` accurate for small `|z|`.
fn ln_1p_c(z: C64) -> C64 {
    let re = 0.5 * (2.0 * z.re + z.norm_sqr()).ln_1p();
    let im = z.im.atan2(1.0 + z.re);
    C64::new(re, im)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_m_ld_ewma(alpha: f64, x: f64) -> f64 {
        // midpoint rule on the density 1/(α δ) over [βe^{-α}, β]
        let beta = ewma_beta(alpha);
        let (a, b) = (beta * (-alpha).exp(), beta);
        let n = 200_000;
        let h = (b - a) / n as f64;
        (0..n)
            .map(|i| {
                let d = a + (i as f64 + 0.5) * h;
                d / (d - x) / (alpha * d) * h
            })
            .sum()
    }

    #[test]
    fn m_ld_at_zero_is_one() {
        for d in [
            WeightDistribution::identity(),
            WeightDistribution::ewma(1.0).unwrap(),
            WeightDistribution::ewma(10.0).unwrap(),
            WeightDistribution::uniform(1.0).unwrap(),
            WeightDistribution::dirac(vec![0.5, 1.5], vec![0.5, 0.5]).unwrap(),
            WeightDistribution::dirac(vec![0.34, 0.67, 2.7, 6.74, 34.0], vec![0.59, 0.30, 0.074, 0.03, 0.006]).unwrap(),
        ] {
            assert!((d.m_ld(0.0).unwrap() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn dirac_examples() {
        let d = WeightDistribution::identity();
        assert_eq!(d.m_ld(2.0).unwrap(), -1.0);
        let (m1, m2) = d.m_ld_derivatives(0.0).unwrap();
        assert_eq!((m1, m2), (1.0, 2.0));
        assert_eq!(d.m_ld_inverse(1, -1.0).unwrap(), 2.0);

        let d = WeightDistribution::dirac(vec![0.5, 1.5], vec![0.5, 0.5]).unwrap();
        let (m1, _) = d.m_ld_derivatives(0.0).unwrap();
        assert!((m1 - (0.5 / 0.5 + 0.5 / 1.5)).abs() < 1e-15);
    }

    #[test]
    fn ewma_closed_form_matches_quadrature() {
        let d = WeightDistribution::ewma(1.0).unwrap();
        assert!((d.m_ld(0.0).unwrap() - 1.0).abs() < 1e-15);
        for x in [-3.0, -0.2, 0.3, 2.0, 5.0, 40.0] {
            let q = quad_m_ld_ewma(1.0, x);
            assert!((d.m_ld(x).unwrap() - q).abs() < 1e-8, "x = {x}");
        }
        assert!(d.m_ld_inverse(1, 1.0).unwrap().abs() < 1e-15);
    }

    #[test]
    fn kinds_have_unit_mean() {
        for a in [0.1, 1.0, 5.0, 10.0, 50.0] {
            assert!((WeightDistribution::ewma(a).unwrap().mean() - 1.0).abs() < 1e-12);
        }
        for a in [0.0, 0.5, 1.0, 1.9] {
            assert!((WeightDistribution::uniform(a).unwrap().mean() - 1.0).abs() < 1e-12);
        }
        let d = WeightDistribution::ewma(1.0).unwrap();
        let (l, r) = d.support_intervals()[0];
        assert!((r - 1.0 / (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((l - r * (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn domain_errors_inside_support() {
        let d = WeightDistribution::uniform(1.0).unwrap();
        assert!(matches!(d.m_ld(1.0), Err(Error::Domain { .. })));
        assert!(matches!(d.m_ld_derivatives(0.5), Err(Error::Domain { .. })));
        let d = WeightDistribution::identity();
        assert!(d.m_ld(1.0).is_err());
    }

    #[test]
    fn uniform_inverse_at_one_is_zero() {
        let d = WeightDistribution::uniform(1.0).unwrap();
        assert!(d.m_ld_inverse(1, 1.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn branch_m_rejects_zero() {
        let d = WeightDistribution::ewma(2.0).unwrap();
        assert!(matches!(d.m_ld_inverse(1, 0.0), Err(Error::NoSolution(_))));
        assert!(d.m_ld_inverse(2, 0.5).is_err());
    }

    #[test]
    fn companion_route_agrees_with_bracketed_route() {
        let d = WeightDistribution::dirac(
            vec![0.34, 0.67, 2.7, 6.74, 34.0],
            vec![0.59, 0.30, 0.074, 0.03, 0.006],
        )
        .unwrap();
        for y in [-50.0, -2.0, -0.3, 0.1, 0.7, 3.0, 100.0] {
            let all = d.m_ld_inverse_all(y).unwrap();
            for k in 1..=5 {
                let a = all[k - 1].unwrap();
                let b = d.m_ld_inverse(k, y).unwrap();
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "k={k} y={y}: {a} vs {b}");
                assert_eq!(d.branch_of(a), Some(k));
            }
        }
    }

    #[test]
    fn complex_kernel_matches_quadrature() {
        let d = WeightDistribution::uniform(1.0).unwrap();
        let z = C64::new(1.3, 0.4);
        for q in [C64::new(0.7, -0.2), C64::new(0.05, -0.01), C64::new(3.0, -1.0)] {
            let (g, dg) = d.kernel(z, q).unwrap();
            let n = 100_000;
            let h = 1.0 / n as f64;
            let (mut gq, mut dq) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            for i in 0..n {
                let x = 0.5 + (i as f64 + 0.5) * h;
                let r = (z - q * x).inv();
                gq += r * x * h;
                dq += r * r * x * x * h;
            }
            assert!((g - gq).norm() < 1e-8, "{g} vs {gq}");
            assert!((dg - dq).norm() < 1e-7, "{dg} vs {dq}");
        }
    }

    #[test]
    fn phi_is_continuous_through_zero() {
        for d in [
            WeightDistribution::ewma(1.0).unwrap(),
            WeightDistribution::uniform(1.5).unwrap(),
            WeightDistribution::dirac(vec![0.5, 40.5], vec![79.0 / 80.0, 1.0 / 80.0]).unwrap(),
        ] {
            let m = d.n_branches();
            let (p0, p1, _) = d.phi(m, 0.0).unwrap();
            assert!((p0 + d.mean()).abs() < 1e-12);
            for t in [1e-9, -1e-9] {
                let (pt, _, _) = d.phi(m, t).unwrap();
                assert!((pt - p0 - p1 * t).abs() < 1e-12);
            }
            // the far-field and inverse routes agree at the switch-over
            let (pos, neg) = d.far_t;
            for t in [pos, neg] {
                let a = d.phi(m, t * (1.0 - 1e-9)).unwrap();
                let b = d.phi(m, t * (1.0 + 1e-9)).unwrap();
                assert!((a.0 - b.0).abs() < 1e-7 * a.0.abs());
                assert!((a.1 - b.1).abs() < 1e-6 * a.1.abs().max(1.0));
                assert!((a.2 - b.2).abs() < 1e-5 * a.2.abs().max(1.0));
            }
        }
    }

    #[test]
    fn spec_roundtrip_through_json() {
        let d = WeightDistribution::ewma(5.0).unwrap();
        let s = serde_json::to_string(&d.to_spec()).unwrap();
        assert_eq!(s, r#"{"kind":"ewma","alpha":5.0}"#);
        let back: DistributionSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(WeightDistribution::from_spec(&back).unwrap(), d);
        let h: DistributionSpec =
            serde_json::from_str(r#"{"kind":"dirac","atoms":[10,1,3],"weights":[0.4,0.2,0.4]}"#).unwrap();
        let h = SpectralDistribution::from_spec(&h).unwrap();
        assert_eq!(h.atoms(), &[1.0, 3.0, 10.0]);
    }

    #[test]
    fn merges_duplicate_atoms() {
        let h = SpectralDistribution::new(vec![2.0, 1.0, 2.0 * (1.0 + 1e-14)], vec![0.25, 0.5, 0.25]).unwrap();
        assert_eq!(h.len(), 2);
        assert!((h.weights()[1] - 0.5).abs() < 1e-15);
        assert!(SpectralDistribution::new(vec![1.0, -1.0], vec![0.5, 0.5]).is_err());
        assert!(SpectralDistribution::new(vec![1.0, 2.0], vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn t_examples() {
        let h = SpectralDistribution::dirac(1.0).unwrap();
        let (t, _, _) = h.t(0.25, 0.0).unwrap();
        assert_eq!(t, 0.25);
        let (t, t1, t2) = h.t(0.25, 2.0).unwrap();
        assert_eq!((t, t1, t2), (-0.25, 0.25, -0.5));
        let h = SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).unwrap();
        assert!((h.t(0.1, 0.0).unwrap().0 - 0.1).abs() < 1e-16);
        assert!(h.t(0.1, 3.0).is_err());
    }

    #[test]
    fn quantile_binning_keeps_mean_one() {
        let samples: Vec<f64> = (1..=1000).map(|i| (-(i as f64) / 1000.0).exp()).collect();
        let d = WeightDistribution::quantile_binned(&samples, 64).unwrap();
        assert_eq!(d.n_branches(), 64);
        assert!((d.mean() - 1.0).abs() < 1e-12);
        let d = WeightDistribution::from_samples(&[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(d.support_intervals(), &[(1.0, 1.0)]);
    }
}
