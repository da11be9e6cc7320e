//! Density and distribution function of the limiting law on a grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{SpectralDistribution, WeightDistribution};
use crate::error::Result;
use crate::grid::Grid;
use crate::resolvent::{density_from_x, solve_x_real};
use crate::C64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub xi: Vec<f64>,
    pub density: Vec<f64>,
    /// `(Re, Im)` of `X̌(ξ_i)`; support edges carry `NaN`.
    pub x_check: Vec<(f64, f64)>,
    /// The solver could not certify the point (support edges, zeros of the
    /// density).
    pub degenerate: Vec<bool>,
    pub zero_mass: f64,
    /// Index ranges of the support intervals in `xi`.
    pub pieces: Vec<(usize, usize)>,
}

impl DensityCurve {
    /// `zero_mass + ∫ F'` by the trapezoid rule.
    pub fn total_mass(&self) -> f64 {
        self.cdf().values.last().copied().unwrap_or(self.zero_mass)
    }

    /// Cumulative trapezoid of the density plus the mass at zero.
    pub fn cdf(&self) -> CdfCurve {
        let mut values = Vec::with_capacity(self.xi.len());
        let mut acc = self.zero_mass;
        for &(a, b) in &self.pieces {
            for i in a..b {
                if i > a {
                    acc += 0.5 * (self.density[i] + self.density[i - 1]) * (self.xi[i] - self.xi[i - 1]);
                }
                values.push(acc);
            }
        }
        CdfCurve {
            x: self.xi.clone(),
            values,
            zero_mass: self.zero_mass,
        }
    }
}

/// Piecewise linear distribution function through `(x_i, values_i)`, flat
/// between and beyond the knots, with a jump of `zero_mass` at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdfCurve {
    pub x: Vec<f64>,
    pub values: Vec<f64>,
    pub zero_mass: f64,
}

impl CdfCurve {
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        let i = self.x.partition_point(|&x| x <= t);
        if i == 0 {
            return self.zero_mass;
        }
        if i == self.x.len() {
            return self.values[i - 1];
        }
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        if x1 > x0 {
            v0 + (v1 - v0) * (t - x0) / (x1 - x0)
        } else {
            v1
        }
    }

    /// Left limit `F(t-)`.
    pub fn eval_left(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let i = self.x.partition_point(|&x| x < t);
        if i == 0 {
            return self.zero_mass;
        }
        if i == self.x.len() {
            return self.values[i - 1];
        }
        let (x0, x1) = (self.x[i - 1], self.x[i]);
        let (v0, v1) = (self.values[i - 1], self.values[i]);
        if x1 > x0 {
            v0 + (v1 - v0) * (t - x0) / (x1 - x0)
        } else {
            v0
        }
    }

    /// Same law from a sorted sample: the empirical distribution function.
    pub fn empirical(sorted: &[f64]) -> Self {
        let n = sorted.len() as f64;
        let mut x = Vec::with_capacity(2 * sorted.len());
        let mut values = Vec::with_capacity(2 * sorted.len());
        for (i, &s) in sorted.iter().enumerate() {
            x.push(s);
            values.push(i as f64 / n);
            x.push(s);
            values.push((i + 1) as f64 / n);
        }
        Self {
            x,
            values,
            zero_mass: 0.0,
        }
    }
}

/// `F'` on every grid point. Interval endpoints are support edges where the
/// density vanishes; they are set to 0 and flagged without calling the
/// solver. Points are independent and evaluated in parallel.
pub fn density_curve(
    h: &SpectralDistribution,
    d: &WeightDistribution,
    c: f64,
    grid: &Grid,
    zero_mass: f64,
) -> Result<DensityCurve> {
    let ranges = grid.ranges();
    let edge: Vec<bool> = (0..grid.len())
        .map(|i| ranges.iter().any(|r| i == r.start || i + 1 == r.end))
        .collect();
    let evals: Vec<Result<(f64, C64, bool)>> = grid
        .points
        .par_iter()
        .zip(edge.par_iter())
        .map(|(&x, &is_edge)| {
            if is_edge || x == 0.0 {
                return Ok((0.0, C64::new(f64::NAN, f64::NAN), true));
            }
            let p = solve_x_real(h, d, c, x)?;
            Ok((density_from_x(h, x, p.x), p.x, p.degenerate))
        })
        .collect();
    let mut density = Vec::with_capacity(grid.len());
    let mut x_check = Vec::with_capacity(grid.len());
    let mut degenerate = Vec::with_capacity(grid.len());
    for e in evals {
        let (f, x, deg) = e?;
        density.push(f);
        x_check.push((x.re, x.im));
        degenerate.push(deg);
    }
    Ok(DensityCurve {
        xi: grid.points.clone(),
        density,
        x_check,
        degenerate,
        zero_mass,
        pieces: ranges.iter().map(|r| (r.start, r.end)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_interpolates_and_jumps_at_zero() {
        let c = CdfCurve {
            x: vec![1.0, 2.0, 3.0, 4.0],
            values: vec![0.5, 0.7, 0.7, 1.0],
            zero_mass: 0.5,
        };
        assert_eq!(c.eval(-1.0), 0.0);
        assert_eq!(c.eval(0.0), 0.5);
        assert!((c.eval(1.5) - 0.6).abs() < 1e-15);
        assert_eq!(c.eval(2.5), 0.7);
        assert_eq!(c.eval(10.0), 1.0);
    }

    #[test]
    fn empirical_steps() {
        let c = CdfCurve::empirical(&[1.0, 2.0]);
        assert_eq!(c.eval(0.5), 0.0);
        assert_eq!(c.eval(1.0), 0.5);
        assert_eq!(c.eval(1.5), 0.5);
        assert_eq!(c.eval(2.0), 1.0);
    }
}
