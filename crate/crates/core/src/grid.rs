//! Arcsine grids on the support.
//!
//! Interval `[l, r]` with `ω` interior points gets
//! `ξ_j = l + (r - l) sin²(πj / (2(ω + 1)))` for `j = 0..=ω+1`, so the
//! endpoints are always included and points cluster near the edges where the
//! density has square-root behaviour.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::support::SupportIntervals;

pub const DEFAULT_OMEGA: usize = 1000;
pub const DEFAULT_MU: f64 = 0.1;

/// How the interior budget `Ω` is split between intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum GridStrategy {
    /// `Ω/ν` points per interval.
    Uniform,
    /// Proportional to the number of sample eigenvalues in each interval.
    Frequentist,
    /// `μ` uniform plus `1 - μ` frequentist.
    Mixed { mu: f64 },
}

impl Default for GridStrategy {
    fn default() -> Self {
        GridStrategy::Mixed { mu: DEFAULT_MU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub points: Vec<f64>,
    /// Interior point count `ω_i` of each interval.
    pub omegas: Vec<usize>,
    pub intervals: Vec<(f64, f64)>,
    pub strategy: GridStrategy,
    pub omega: usize,
}

impl Grid {
    /// Points per interval including both endpoints, `ω_i + 2`.
    pub fn counts(&self) -> Vec<usize> {
        self.omegas.iter().map(|w| w + 2).collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index ranges of each interval's points in `points`.
    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.omegas
            .iter()
            .map(|w| {
                let r = start..start + w + 2;
                start = r.end;
                r
            })
            .collect()
    }

    /// True when `points[i]` is an interval endpoint.
    pub fn is_endpoint(&self, i: usize) -> bool {
        self.ranges().iter().any(|r| i == r.start || i + 1 == r.end)
    }
}

/// Points `ξ_j`, `j = 0..=ω+1`, on `[l, r]`.
pub fn arcsine_points(l: f64, r: f64, omega: usize) -> Vec<f64> {
    let denom = 2.0 * (omega + 1) as f64;
    let len = r - l;
    (0..=omega + 1)
        .map(|j| {
            if j == 0 {
                l
            } else if j == omega + 1 {
                r
            } else {
                l + len * (std::f64::consts::PI * j as f64 / denom).sin().powi(2)
            }
        })
        .collect()
}

/// Rounds non-negative shares summing to `total` to integers with the same
/// sum: floors first, then the remaining units go to the largest fractional
/// parts, ties to the lower index.
pub fn largest_remainder(shares: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = shares.iter().map(|s| s.floor().max(0.0) as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Builds the grid for `support` with interior budget `omega`.
///
/// Frequentist counts are normalised to sum to `omega`; eigenvalues outside
/// every interval are ignored.
pub fn build_grid(
    support: &SupportIntervals,
    omega: usize,
    strategy: GridStrategy,
    sample_eigs: Option<&[f64]>,
) -> Result<Grid> {
    let nu = support.intervals.len();
    if nu == 0 {
        return Err(Error::EmptySupport);
    }
    if omega < nu {
        return Err(Error::invalid(format!(
            "grid budget {omega} is smaller than the number of intervals {nu}"
        )));
    }
    let uniform = vec![omega as f64 / nu as f64; nu];
    let frequentist = || -> Result<Vec<f64>> {
        let eigs = sample_eigs.ok_or_else(|| Error::invalid("this grid strategy needs sample eigenvalues"))?;
        let counts: Vec<f64> = support
            .intervals
            .iter()
            .map(|&(l, r)| eigs.iter().filter(|&&x| x >= l && x <= r).count() as f64)
            .collect();
        let total: f64 = counts.iter().sum();
        if total == 0.0 {
            return Err(Error::invalid("no sample eigenvalue lies in the support"));
        }
        Ok(counts.iter().map(|k| k * omega as f64 / total).collect())
    };
    let shares = match strategy {
        GridStrategy::Uniform => uniform,
        GridStrategy::Frequentist => frequentist()?,
        GridStrategy::Mixed { mu } => {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::invalid(format!("mixing parameter must lie in [0, 1], got {mu}")));
            }
            if mu == 1.0 {
                uniform
            } else {
                uniform
                    .iter()
                    .zip(frequentist()?)
                    .map(|(u, f)| mu * u + (1.0 - mu) * f)
                    .collect()
            }
        }
    };
    let omegas = largest_remainder(&shares, omega);
    let points = support
        .intervals
        .iter()
        .zip(&omegas)
        .flat_map(|(&(l, r), &w)| arcsine_points(l, r, w))
        .collect();
    Ok(Grid {
        points,
        omegas,
        intervals: support.intervals.clone(),
        strategy,
        omega,
    })
}
