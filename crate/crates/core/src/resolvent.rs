//! Solution of the fundamental equation
//! `f_z(X) = X + ∫ δ / (z - δ q(X)) dD(δ) = 0` with
//! `q(X) = c ∫ τ/(τX + 1) dH(τ)`, and the real-line quantities derived from
//! it: `X̌(λ)`, `m̌(λ)`, `Θ̌^(1)(λ)`, `Im Θ̌^g(λ)` and the density `F'(λ)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distributions::{SpectralDistribution, WeightDistribution};
use crate::error::{Error, Result};
use crate::C64;

/// Lower bound on `Im X` for the upper half-plane search at real `λ`.
pub const IM_FLOOR: f64 = 1e-7;
/// Imaginary offset used to approach the real line, relative to `max(1, |λ|)`.
pub const ETA_REL: f64 = 1e-6;

const MAX_RESTARTS: usize = 8;
const NEWTON_ITERS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolventPoint {
    pub z: C64,
    pub x: C64,
    /// `|f_z(X)|`.
    pub residual: f64,
    /// `X` is the limit `X̌` at the real point `z.re`.
    pub on_real_line: bool,
    /// The upper half-plane search ended on the `Im X = IM_FLOOR` boundary, or
    /// the real-line polish failed (typically at a support edge). The value is
    /// the approach limit and the usual identities need not hold.
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaValue {
    pub lambda: f64,
    pub x_check: C64,
    pub m_check: C64,
    pub theta1_check: C64,
    pub im_theta_g: f64,
    pub degenerate: bool,
}

/// `(f_z(X), f_z'(X))`.
pub fn fundamental(h: &SpectralDistribution, d: &WeightDistribution, c: f64, z: C64, x: C64) -> Result<(C64, C64)> {
    let (q, dq) = h.q(c, x);
    let (g, dg) = d.kernel(z, q)?;
    Ok((x + g, 1.0 + dg * dq))
}

/// `dx_F/dX` at real `X`, from implicit differentiation of `f_x(X) = 0`.
///
/// `g(z, q)` is homogeneous of degree -1, so `∂g/∂z = -(g + q ∂g/∂q) / z`.
pub fn x_f_derivative(h: &SpectralDistribution, d: &WeightDistribution, c: f64, lambda: f64, x: f64) -> Result<f64> {
    let z = C64::new(lambda, 0.0);
    let (q, dq) = h.q(c, C64::new(x, 0.0));
    let (g, dg) = d.kernel(z, q)?;
    let dfdx = 1.0 + dg * dq;
    let dfdz = -(g + q * dg) / z;
    Ok((-dfdx / dfdz).re)
}

fn tol_for(z: C64) -> f64 {
    1e-10 * z.norm().max(1.0)
}

struct NewtonOutcome {
    x: C64,
    residual: f64,
    converged: bool,
}

/// Damped Newton iteration on `f_z` keeping `Im X > floor`. Steps are
/// backtracked until `|f|` decreases. Stops on tolerance or stagnation.
fn newton(h: &SpectralDistribution, d: &WeightDistribution, c: f64, z: C64, x0: C64, floor: f64) -> NewtonOutcome {
    let eval = |x: C64| fundamental(h, d, c, z, x).ok().filter(|(f, df)| f.is_finite() && df.is_finite());
    let goal = 1e-14 * z.norm().max(1.0);
    let accept = tol_for(z);
    let mut x = x0;
    let Some((mut f, mut df)) = eval(x) else {
        return NewtonOutcome {
            x,
            residual: f64::INFINITY,
            converged: false,
        };
    };
    for _ in 0..NEWTON_ITERS {
        let r = f.norm();
        if r <= goal {
            break;
        }
        let step = f / df;
        if !step.is_finite() {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let cand = x - step * t;
            if cand.im > floor {
                if let Some((fc, dfc)) = eval(cand) {
                    if fc.norm() < r * (1.0 - 1e-4 * t) {
                        x = cand;
                        f = fc;
                        df = dfc;
                        moved = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        if (step * t).norm() <= 4.0 * f64::EPSILON * x.norm() {
            break;
        }
    }
    let residual = f.norm();
    NewtonOutcome {
        x,
        residual,
        converged: residual <= accept,
    }
}

fn asymptotic_seed(d: &WeightDistribution, z: C64) -> C64 {
    -d.mean() / z
}

/// Track `X(Re z + iη)` from a large `η` (where the asymptotic seed is
/// accurate) down to `η = Im z`, shrinking the step whenever Newton fails.
fn continuation(h: &SpectralDistribution, d: &WeightDistribution, c: f64, z: C64) -> Option<NewtonOutcome> {
    let scale = (1.0 + c.sqrt()).powi(2) * h.h2() * d.d2();
    let mut eta = (4.0 * (z.re.abs() + scale)).max(z.im);
    let zs = C64::new(z.re, eta);
    let first = newton(h, d, c, zs, asymptotic_seed(d, zs), 0.0);
    if !first.converged {
        return None;
    }
    let mut x = first.x;
    let mut ratio: f64 = 0.05;
    let mut last = first;
    while eta > z.im {
        let next = (eta * ratio).max(z.im);
        let out = newton(h, d, c, C64::new(z.re, next), x, 0.0);
        if out.converged {
            eta = next;
            x = out.x;
            last = out;
            ratio = (ratio * ratio.sqrt()).max(1e-3);
        } else {
            ratio = ratio.sqrt();
            if ratio > 0.999 {
                return None;
            }
        }
    }
    Some(last)
}

/// Damped fixed-point iteration `X <- (1 - ω) X - ω g(z, q(X))`, used to
/// produce restart points.
fn fixed_point(h: &SpectralDistribution, d: &WeightDistribution, c: f64, z: C64, mut x: C64, iters: usize) -> C64 {
    for _ in 0..iters {
        let (q, _) = h.q(c, x);
        let Ok((g, _)) = d.kernel(z, q) else { break };
        let next = x * 0.5 - g * 0.5;
        if !next.is_finite() || next.im <= 0.0 {
            break;
        }
        x = next;
    }
    x
}

/// Solves `f_z(X) = 0` for `Im z > 0`, returning the unique root in the upper
/// half-plane.
pub fn solve_x_upper(h: &SpectralDistribution, d: &WeightDistribution, c: f64, z: C64) -> Result<ResolventPoint> {
    solve_x_upper_warm(h, d, c, z, None)
}

/// As [`solve_x_upper`], trying `warm` first.
pub fn solve_x_upper_warm(
    h: &SpectralDistribution,
    d: &WeightDistribution,
    c: f64,
    z: C64,
    warm: Option<C64>,
) -> Result<ResolventPoint> {
    if !(z.im > 0.0 && z.is_finite()) {
        return Err(Error::invalid(format!("solve_x_upper needs Im z > 0, got {z}")));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("concentration must be positive, got {c}")));
    }
    let done = |o: NewtonOutcome| ResolventPoint {
        z,
        x: o.x,
        residual: o.residual,
        on_real_line: false,
        degenerate: false,
    };
    let mut best = f64::INFINITY;
    let mut attempts = 0;
    let mut track = |o: &NewtonOutcome, attempts: &mut usize| {
        *attempts += 1;
        best = best.min(o.residual);
    };

    if let Some(w) = warm.filter(|w| w.im > 0.0 && w.is_finite()) {
        let o = newton(h, d, c, z, w, 0.0);
        if o.converged {
            return Ok(done(o));
        }
        track(&o, &mut attempts);
    }
    let seed = asymptotic_seed(d, z);
    let o = newton(h, d, c, z, seed, 0.0);
    if o.converged {
        return Ok(done(o));
    }
    track(&o, &mut attempts);
    if let Some(o) = continuation(h, d, c, z) {
        return Ok(done(o));
    }
    attempts += 1;

    let mut rng = ChaCha8Rng::seed_from_u64(z.re.to_bits() ^ z.im.to_bits().rotate_left(32));
    while attempts < MAX_RESTARTS {
        let jitter = C64::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        let mut start = seed * (jitter + 1.0);
        if start.im <= 0.0 {
            start.im = seed.im.abs().max(1e-3);
        }
        let start = fixed_point(h, d, c, z, start, 50);
        let o = newton(h, d, c, z, start, 0.0);
        if o.converged {
            return Ok(done(o));
        }
        track(&o, &mut attempts);
    }
    Err(Error::Convergence {
        what: format!("fundamental equation at z = {z}"),
        best_residual: best,
    })
}

/// Real Newton iteration on `f_λ` for real `X`.
fn newton_real(h: &SpectralDistribution, d: &WeightDistribution, c: f64, lambda: f64, x0: f64) -> Option<(f64, f64)> {
    let z = C64::new(lambda, 0.0);
    let eval = |x: f64| {
        fundamental(h, d, c, z, C64::new(x, 0.0))
            .ok()
            .map(|(f, df)| (f.re, df.re))
            .filter(|(f, df)| f.is_finite() && df.is_finite())
    };
    let goal = 1e-14 * lambda.abs().max(1.0);
    let mut x = x0;
    let (mut f, mut df) = eval(x)?;
    for _ in 0..NEWTON_ITERS {
        if f.abs() <= goal || df == 0.0 {
            break;
        }
        let step = f / df;
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            if let Some((fc, dfc)) = eval(x - t * step) {
                if fc.abs() < f.abs() * (1.0 - 1e-4 * t) {
                    x -= t * step;
                    f = fc;
                    df = dfc;
                    moved = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !moved || (t * step).abs() <= 4.0 * f64::EPSILON * x.abs() {
            break;
        }
    }
    (f.abs() <= tol_for(z)).then_some((x, f.abs()))
}

/// `X̌(λ)`, the limit of `X(λ + iη)` as `η -> 0+`.
///
/// First tries to solve `f_λ(X) = 0` directly with `Im X >= IM_FLOOR`,
/// starting from `X(λ + iη)`; success means `λ` lies in the interior of the
/// support. Otherwise the limit is real: `Re X` is extrapolated from `η` and
/// `η/2` and polished by a real Newton iteration, which is accepted when
/// `x_F'(X̌) > 0`.
pub fn solve_x_real(h: &SpectralDistribution, d: &WeightDistribution, c: f64, lambda: f64) -> Result<ResolventPoint> {
    if !(lambda.is_finite() && lambda != 0.0) {
        return Err(Error::invalid(format!("solve_x_real needs a nonzero finite λ, got {lambda}")));
    }
    let eta = ETA_REL * lambda.abs().max(1.0);
    let z = C64::new(lambda, 0.0);
    let near = solve_x_upper(h, d, c, C64::new(lambda, eta))?;

    let inner = newton(h, d, c, z, near.x, IM_FLOOR);
    if inner.converged && inner.x.im > IM_FLOOR * (1.0 + 1e-6) {
        return Ok(ResolventPoint {
            z,
            x: inner.x,
            residual: inner.residual,
            on_real_line: true,
            degenerate: false,
        });
    }

    let half = solve_x_upper_warm(h, d, c, C64::new(lambda, eta / 2.0), Some(near.x))?;
    let extrapolated = 2.0 * half.x.re - near.x.re;
    for start in [extrapolated, half.x.re] {
        if let Some((x, residual)) = newton_real(h, d, c, lambda, start) {
            if x_f_derivative(h, d, c, lambda, x).is_ok_and(|v| v > 0.0) {
                return Ok(ResolventPoint {
                    z,
                    x: C64::new(x, 0.0),
                    residual,
                    on_real_line: true,
                    degenerate: false,
                });
            }
        }
    }

    // Neither route closed: a support edge or a zero of the density inside
    // the support. Report the approach value.
    let x = if inner.converged { inner.x } else { C64::new(extrapolated, 0.0) };
    let residual = fundamental(h, d, c, z, x).map(|(f, _)| f.norm()).unwrap_or(f64::INFINITY);
    Ok(ResolventPoint {
        z,
        x,
        residual,
        on_real_line: true,
        degenerate: true,
    })
}

/// `m̌(λ)`, `Θ̌^(1)(λ)` and `Im Θ̌^g(λ)` for a function `g` evaluated at the
/// atoms of `H`.
pub fn theta_at<G>(h: &SpectralDistribution, d: &WeightDistribution, c: f64, lambda: f64, g: G) -> Result<ThetaValue>
where
    G: Fn(f64) -> f64,
{
    let p = solve_x_real(h, d, c, lambda)?;
    Ok(theta_from_x(h, lambda, p.x, p.degenerate, g))
}

pub(crate) fn theta_from_x<G>(h: &SpectralDistribution, lambda: f64, x: C64, degenerate: bool, g: G) -> ThetaValue
where
    G: Fn(f64) -> f64,
{
    let mut m = C64::new(0.0, 0.0);
    let mut t1 = C64::new(0.0, 0.0);
    let mut im_g = 0.0;
    for (&tau, &w) in h.atoms().iter().zip(h.weights()) {
        let den = x * tau + 1.0;
        let r = den.inv();
        m += w * r;
        t1 += w * tau * r;
        im_g += g(tau) * tau * w * x.im / den.norm_sqr();
    }
    ThetaValue {
        lambda,
        x_check: x,
        m_check: -m / lambda,
        theta1_check: -t1 / lambda,
        im_theta_g: im_g / lambda,
        degenerate,
    }
}

/// `F'(λ) = Im m̌(λ) / π`, clamped at 0.
pub fn density_from_x(h: &SpectralDistribution, lambda: f64, x: C64) -> f64 {
    let v = theta_from_x(h, lambda, x, false, |_| 1.0).m_check.im / std::f64::consts::PI;
    if v <= 1e-12 {
        0.0
    } else {
        v
    }
}

/// Limiting spectral density `F'(λ)` for `λ ≠ 0`. The mass `max(0, 1 - 1/c)`
/// at zero is not part of it.
pub fn density_at(h: &SpectralDistribution, d: &WeightDistribution, c: f64, lambda: f64) -> Result<f64> {
    let p = solve_x_real(h, d, c, lambda)?;
    Ok(density_from_x(h, lambda, p.x))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mp() -> (SpectralDistribution, WeightDistribution) {
        (SpectralDistribution::dirac(1.0).unwrap(), WeightDistribution::identity())
    }

    /// Marchenko-Pastur Stieltjes transform with the branch of the square
    /// root chosen so that `Im m > 0` in the upper half-plane.
    fn mp_stieltjes(c: f64, z: C64) -> C64 {
        let a = (1.0 - c.sqrt()).powi(2);
        let b = (1.0 + c.sqrt()).powi(2);
        let s = ((z - a) * (z - b)).sqrt();
        let cands = [(1.0 - c - z + s) / (2.0 * c * z), (1.0 - c - z - s) / (2.0 * c * z)];
        *cands.iter().find(|m| m.im > 0.0).unwrap_or(&cands[0])
    }

    #[test]
    fn matches_marchenko_pastur_companion() {
        let (h, d) = mp();
        let c = 0.25;
        for z in [C64::new(1.0, 1.0), C64::new(0.3, 0.01), C64::new(4.0, 0.5), C64::new(-1.0, 0.2)] {
            let p = solve_x_upper(&h, &d, c, z).unwrap();
            // X is the Stieltjes transform of the N x N companion matrix.
            let x = c * mp_stieltjes(c, z) - (1.0 - c) / z;
            assert!((p.x - x).norm() < 1e-10, "z = {z}: {} vs {x}", p.x);
            assert!(p.residual <= 1e-10 * z.norm().max(1.0));
            assert!(p.x.im > 0.0);
        }
    }

    #[test]
    fn mp_density_at_one() {
        let (h, d) = mp();
        let f = density_at(&h, &d, 0.25, 1.0).unwrap();
        let exact = ((2.25f64 - 1.0) * (1.0 - 0.25)).sqrt() / (2.0 * std::f64::consts::PI * 0.25);
        assert!((f - exact).abs() < 1e-9, "{f} vs {exact}");
    }

    #[test]
    fn mp_outside_support_is_real() {
        let (h, d) = mp();
        let p = solve_x_real(&h, &d, 0.25, 4.0).unwrap();
        assert_eq!(p.x.im, 0.0);
        assert!(p.residual <= 1e-10);
        assert!(!p.degenerate);
        let m = (0.75 - 4.0 + ((4.0f64 - 0.25) * (4.0 - 2.25)).sqrt()) / (2.0 * 0.25 * 4.0);
        let x = 0.25 * m - 0.75 / 4.0;
        assert!((p.x.re - x).abs() < 1e-10, "{} vs {x}", p.x.re);
        assert_eq!(density_at(&h, &d, 0.25, 4.0).unwrap(), 0.0);
        assert!(x_f_derivative(&h, &d, 0.25, 4.0, p.x.re).unwrap() > 0.0);
    }

    #[test]
    fn theta_identities() {
        let h = SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).unwrap();
        let d = WeightDistribution::uniform(1.0).unwrap();
        let t = theta_at(&h, &d, 0.25, 3.0, |_| 1.0).unwrap();
        assert!(t.x_check.im > 0.0);
        assert!((t.im_theta_g - t.m_check.im).abs() < 1e-12);
        let x = t.x_check;
        let direct: C64 = h
            .atoms()
            .iter()
            .zip(h.weights())
            .map(|(&tau, &w)| w * tau / (x * tau + 1.0))
            .sum::<C64>()
            * (-1.0 / 3.0);
        assert!((t.theta1_check - direct).norm() < 1e-14);
        let off = theta_at(&h, &d, 0.25, 100.0, |tau| tau).unwrap();
        assert_eq!(off.im_theta_g, 0.0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let (h, d) = mp();
        assert!(solve_x_upper(&h, &d, 0.25, C64::new(1.0, 0.0)).is_err());
        assert!(solve_x_real(&h, &d, 0.25, 0.0).is_err());
    }
}
