//! Bracketing scalar root finders.

use crate::error::{Error, Result};

/// Relative bracket width at which [`root_find`] stops.
pub const BRACKET_RTOL: f64 = 1e-13;

/// Brent's method on a sign-changing bracket.
///
/// Returns `x` such that the final bracket around the root is narrower than
/// `1e-13 (1 + |x|)`, or an endpoint where `f` vanishes exactly.
pub fn root_find<F>(f: F, a: f64, b: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    brent(f, a, b, BRACKET_RTOL, 200)
}

pub fn brent<F>(mut f: F, a: f64, b: f64, rtol: f64, max_iter: usize) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let (mut a, mut b) = (a, b);
    let mut fa = f(a);
    let mut fb = f(b);
    if !(fa.is_finite() && fb.is_finite()) || fa * fb > 0.0 || !(a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidBracket { a, b, fa, fb });
    }
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }

    let mut c = a;
    let mut fc = fa;
    let mut d = b - a;
    let mut e = d;
    for _ in 0..max_iter {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol = 2.0 * f64::EPSILON * b.abs() + 0.5 * rtol * (1.0 + b.abs());
        let m = 0.5 * (c - b);
        if m.abs() <= tol || fb == 0.0 {
            return Ok(b);
        }
        if e.abs() >= tol && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * m * s;
                q = 1.0 - s;
            } else {
                let qa = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * m * qa * (qa - r) - (b - a) * (r - 1.0));
                q = (qa - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            } else {
                p = -p;
            }
            if 2.0 * p < (3.0 * m * q - (tol * q).abs()).min((e * q).abs()) {
                e = d;
                d = p / q;
            } else {
                d = m;
                e = m;
            }
        } else {
            d = m;
            e = m;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol { d } else { tol.copysign(m) };
        fb = f(b);
        if !fb.is_finite() {
            return Err(Error::Convergence {
                what: format!("non-finite function value at {b}"),
                best_residual: fa.abs(),
            });
        }
    }
    Err(Error::Convergence {
        what: "brent iteration limit".into(),
        best_residual: fb.abs(),
    })
}

/// Safeguarded Newton iteration for an increasing function on `[lo, hi]`.
///
/// `f` returns `(value, derivative)`. `f(lo) < 0 < f(hi)` is required. Newton
/// steps that leave the bracket or fail to shrink it fast enough fall back to
/// bisection. Stops once `|f| <= ftol` or the bracket collapses to a few ulps.
pub fn newton_bisect<F>(
    mut f: F,
    mut lo: f64,
    mut hi: f64,
    start: Option<f64>,
    ftol: f64,
    max_iter: usize,
) -> Result<f64>
where
    F: FnMut(f64) -> (f64, f64),
{
    if lo >= hi || lo.is_nan() || hi.is_nan() {
        return Err(Error::InvalidBracket {
            a: lo,
            b: hi,
            fa: f64::NAN,
            fb: f64::NAN,
        });
    }
    let mut x = match start {
        Some(x0) if x0 > lo && x0 < hi => x0,
        _ => 0.5 * (lo + hi),
    };
    let mut dx_old = hi - lo;
    let mut best = f64::INFINITY;
    for _ in 0..max_iter {
        let (fx, dfx) = f(x);
        if !fx.is_finite() {
            return Err(Error::Convergence {
                what: format!("non-finite value at {x}"),
                best_residual: best,
            });
        }
        best = best.min(fx.abs());
        if fx.abs() <= ftol {
            return Ok(x);
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(f64::MIN_POSITIVE) {
            return Ok(x);
        }
        let newton = x - fx / dfx;
        let bisect = 0.5 * (lo + hi);
        let step_ok = dfx > 0.0 && newton > lo && newton < hi && (newton - x).abs() < 0.5 * dx_old;
        let next = if step_ok { newton } else { bisect };
        dx_old = (next - x).abs();
        if next == x {
            return Ok(x);
        }
        x = next;
    }
    Err(Error::Convergence {
        what: "safeguarded newton iteration limit".into(),
        best_residual: best,
    })
}
