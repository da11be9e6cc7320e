//! Support `S_F` of the limiting spectral law.
//!
//! With `u = -1/X`, each branch `k` of the inverse of `m_LD` gives
//! `y_k(u) = -u t(u) v_k(t(u))`, where `t(u) = c ∫ τ/(τ - u) dH` and
//! `v_k = (m_LD^(k))^{-1}`. A point `x > 0` lies outside `S_F` exactly when it
//! is the image `y_k(u)` of a point where `y_k` is increasing. On every
//! component of `R \ S_H` (a "piece") we locate the zeros of `y_k'` by a
//! sign scan refined with Brent's method, take the images of the increasing
//! runs, and return the complement of their union in `(0, ∞)`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{SpectralDistribution, WeightDistribution};
use crate::error::{Error, Result};
use crate::roots::root_find;

const SCAN_POINTS: usize = 512;
const MAX_LINE_STEPS: usize = 200;

/// Edge of a support interval together with the critical point producing it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub x: f64,
    #[serde(rename = "X")]
    pub x_star: f64,
    pub branch: usize,
}

/// `S_F` as sorted disjoint closed intervals, plus the point mass at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportIntervals {
    pub intervals: Vec<(f64, f64)>,
    pub zero_mass: f64,
    pub boundaries: Vec<Boundary>,
}

impl SupportIntervals {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn lower_edge(&self) -> Option<f64> {
        self.intervals.first().map(|iv| iv.0)
    }

    pub fn upper_edge(&self) -> Option<f64> {
        self.intervals.last().map(|iv| iv.1)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.intervals.iter().any(|&(l, r)| x >= l && x <= r)
    }

    /// Intervals widened by `frac` of their own length on each side and
    /// re-merged.
    pub fn dilated(&self, frac: f64) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for &(l, r) in &self.intervals {
            let w = frac * (r - l);
            let (l, r) = ((l - w).max(0.0), r + w);
            match out.last_mut() {
                Some(last) if l <= last.1 => last.1 = last.1.max(r),
                _ => out.push((l, r)),
            }
        }
        out
    }

    /// Boundary record for edge `x`, if one was produced.
    pub fn boundary_at(&self, x: f64) -> Option<&Boundary> {
        self.boundaries.iter().find(|b| b.x == x)
    }
}

/// `y_k(u)` for one branch, with its first two derivatives.
#[derive(Debug, Clone, Copy)]
pub struct BranchFunction<'a> {
    pub h: &'a SpectralDistribution,
    pub d: &'a WeightDistribution,
    pub c: f64,
    pub k: usize,
}

impl<'a> BranchFunction<'a> {
    pub fn new(h: &'a SpectralDistribution, d: &'a WeightDistribution, c: f64, k: usize) -> Result<Self> {
        if k == 0 || k > d.n_branches() {
            return Err(Error::invalid(format!("branch {k} out of range 1..={}", d.n_branches())));
        }
        Ok(Self { h, d, c, k })
    }

    /// `(y, y', y'')` at `u ∉ S_H`.
    pub fn eval(&self, u: f64) -> Result<(f64, f64, f64)> {
        let (t, t1, t2) = self.h.t(self.c, u)?;
        let (p, p1, p2) = self.d.phi(self.k, t)?;
        let y = -u * p;
        let y1 = -p - u * p1 * t1;
        let y2 = -2.0 * p1 * t1 - u * p2 * t1 * t1 - u * p1 * t2;
        Ok((y, y1, y2))
    }

    /// `(x_F, x_F', x_F'')` at real `X ≠ 0`.
    pub fn eval_x(&self, x: f64) -> Result<(f64, f64, f64)> {
        if x == 0.0 {
            return Err(Error::invalid("x_F is not defined at X = 0"));
        }
        let u = -1.0 / x;
        let (y, y1, y2) = self.eval(u)?;
        Ok((y, y1 * u * u, u * u * (u * u * y2 + 2.0 * u * y1)))
    }

    /// Limit of `y_k` as `u -> ±∞`, finite for `k < M`.
    fn limit_at_infinity(&self, sign: f64) -> f64 {
        if self.k == self.d.n_branches() {
            return sign * f64::INFINITY;
        }
        let v0 = self.d.m_ld_inverse(self.k, 0.0).unwrap_or(f64::NAN);
        self.c * self.h.mean() * v0
    }
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    /// `]-∞, τ_1[`, `u = τ_1 (1 - 2s)/(1 - s)`.
    Left(f64),
    /// `]τ_i, τ_{i+1}[`, linear in `s`.
    Inner(f64, f64),
    /// `]τ_K, ∞[`, `u = τ_K / (1 - s)`.
    Right(f64),
}

impl Piece {
    fn u(&self, s: f64) -> f64 {
        match *self {
            Piece::Left(a) => a * (1.0 - 2.0 * s) / (1.0 - s),
            Piece::Inner(a, b) => a + s * (b - a),
            Piece::Right(b) => b / (1.0 - s),
        }
    }

    fn far_end_is_infinite(&self) -> bool {
        !matches!(self, Piece::Inner(..))
    }

    /// Sign of `u` at the `s = 1` end when it is infinite.
    fn infinity_sign(&self) -> f64 {
        match self {
            Piece::Left(_) => -1.0,
            _ => 1.0,
        }
    }
}

/// An increasing run of `y_k`, as its image interval and the critical points
/// at its ends.
#[derive(Debug, Clone, Copy)]
struct Image {
    lo: f64,
    hi: f64,
    lo_gen: Option<Boundary>,
    hi_gen: Option<Boundary>,
}

fn scan_points() -> Vec<f64> {
    let denom = 2.0 * (SCAN_POINTS + 1) as f64;
    (1..=SCAN_POINTS)
        .map(|j| (std::f64::consts::PI * j as f64 / denom).sin().powi(2))
        .collect()
}

fn piece_error(branch: usize, piece: &Piece, reason: impl Into<String>) -> Error {
    let (lo, hi) = match *piece {
        Piece::Left(a) => (f64::NEG_INFINITY, a),
        Piece::Inner(a, b) => (a, b),
        Piece::Right(b) => (b, f64::INFINITY),
    };
    Error::RootFinding {
        branch,
        lo,
        hi,
        reason: reason.into(),
    }
}

fn analyse_piece(bf: &BranchFunction, piece: Piece) -> Result<Vec<Image>> {
    let dy = |s: f64| bf.eval(piece.u(s)).map(|v| v.1).unwrap_or(f64::NAN);
    let d2y = |s: f64| bf.eval(piece.u(s)).map(|v| v.2).unwrap_or(f64::NAN);

    let mut pts: Vec<(f64, f64, f64)> = Vec::with_capacity(SCAN_POINTS + 16);
    let mut skipped = 0;
    for s in scan_points() {
        match bf.eval(piece.u(s)) {
            Ok((_, y1, y2)) if y1.is_finite() && y2.is_finite() => pts.push((s, y1, y2)),
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("branch {}: {skipped} scan points could not be evaluated on {piece:?}", bf.k);
    }
    if pts.is_empty() {
        return Err(piece_error(bf.k, &piece, "no evaluable scan points"));
    }

    // The pole at s = 0 must be approached with y' < 0.
    let mut s = pts[0].0;
    let mut i = 0;
    while pts[0].1 >= 0.0 {
        s *= 0.5;
        i += 1;
        if i > MAX_LINE_STEPS || piece.u(s) == piece.u(0.0) {
            return Err(piece_error(bf.k, &piece, "y' does not become negative near the pole"));
        }
        if let Ok((_, y1, y2)) = bf.eval(piece.u(s)) {
            if y1.is_finite() {
                pts.insert(0, (s, y1, y2));
            }
        }
    }
    // The far end: a pole (y' < 0 required) or infinity (y' > 0 required on
    // the outer branch).
    let need_negative = !piece.far_end_is_infinite();
    let need_positive = piece.far_end_is_infinite() && bf.k == bf.d.n_branches();
    let mut s = *pts.last().map(|p| &p.0).unwrap();
    i = 0;
    loop {
        let last = pts[pts.len() - 1].1;
        if !((need_negative && last >= 0.0) || (need_positive && last <= 0.0)) {
            break;
        }
        s = 1.0 - 0.5 * (1.0 - s);
        i += 1;
        if i > MAX_LINE_STEPS || s >= 1.0 || !piece.u(s).is_finite() {
            return Err(piece_error(bf.k, &piece, "wrong sign of y' at the end of the piece"));
        }
        if let Ok((_, y1, y2)) = bf.eval(piece.u(s)) {
            if y1.is_finite() {
                pts.push((s, y1, y2));
            }
        }
    }

    // Critical points of y' join the scan so double crossings are not missed.
    let mut extra = Vec::new();
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.2 > 0.0) != (b.2 > 0.0) {
            if let Ok(sc) = root_find(d2y, a.0, b.0) {
                let v = dy(sc);
                if v.is_finite() {
                    extra.push((sc, v, 0.0));
                }
            }
        }
    }
    pts.extend(extra);
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts.dedup_by(|a, b| a.0 == b.0);

    // Runs of constant sign of y', delimited by refined zeros.
    let mut images = Vec::new();
    let mut run_start: Option<f64> = if pts[0].1 > 0.0 { Some(f64::NAN) } else { None };
    let crossing = |a: (f64, f64, f64), b: (f64, f64, f64)| -> Result<f64> {
        if a.1 == 0.0 {
            return Ok(a.0);
        }
        if b.1 == 0.0 {
            return Ok(b.0);
        }
        root_find(dy, a.0, b.0).map_err(|e| piece_error(bf.k, &piece, e.to_string()))
    };
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (pa, pb) = (a.1 > 0.0, b.1 > 0.0);
        if pa == pb {
            continue;
        }
        let root = crossing(a, b)?;
        if pb {
            run_start = Some(root);
        } else if let Some(start) = run_start.take() {
            images.push(run_image(bf, &piece, start, root)?);
        }
    }
    if let Some(start) = run_start {
        images.push(run_image(bf, &piece, start, 1.0)?);
    }
    Ok(images)
}

/// Image of the increasing run `s ∈ [sa, sb]`. `sb = 1` stands for the
/// infinite end of an outer piece.
fn run_image(bf: &BranchFunction, piece: &Piece, sa: f64, sb: f64) -> Result<Image> {
    let end = |s: f64| -> Result<(f64, Option<Boundary>)> {
        if s.is_nan() {
            return Err(piece_error(bf.k, piece, "increasing run reaches a pole"));
        }
        if s >= 1.0 {
            return Ok((bf.limit_at_infinity(piece.infinity_sign()), None));
        }
        let u = piece.u(s);
        let (y, _, _) = bf.eval(u).map_err(|e| piece_error(bf.k, piece, e.to_string()))?;
        Ok((
            y,
            Some(Boundary {
                x: y,
                x_star: -1.0 / u,
                branch: bf.k,
            }),
        ))
    };
    let (ya, ga) = end(sa)?;
    let (yb, gb) = end(sb)?;
    Ok(if ya <= yb {
        Image {
            lo: ya,
            hi: yb,
            lo_gen: ga,
            hi_gen: gb,
        }
    } else {
        Image {
            lo: yb,
            hi: ya,
            lo_gen: gb,
            hi_gen: ga,
        }
    })
}

fn pieces(h: &SpectralDistribution) -> Vec<Piece> {
    let atoms = h.atoms();
    let mut out = vec![Piece::Left(atoms[0])];
    out.extend(atoms.windows(2).map(|w| Piece::Inner(w[0], w[1])));
    out.push(Piece::Right(atoms[atoms.len() - 1]));
    out
}

fn assemble(mut images: Vec<Image>, c: f64) -> Result<SupportIntervals> {
    images.retain(|im| im.hi > im.lo);
    images.sort_by(|a, b| a.lo.total_cmp(&b.lo));
    let mut merged: Vec<Image> = Vec::new();
    for im in images {
        match merged.last_mut() {
            Some(last) if im.lo < last.hi => {
                if im.hi > last.hi {
                    last.hi = im.hi;
                    last.hi_gen = im.hi_gen;
                }
            }
            _ => merged.push(im),
        }
    }

    let mut intervals: Vec<(f64, f64)> = Vec::new();
    let mut gens: Vec<(Option<Boundary>, Option<Boundary>)> = Vec::new();
    let mut cur = 0.0;
    let mut cur_gen = None;
    for im in &merged {
        if im.hi <= cur {
            continue;
        }
        if im.lo > cur {
            intervals.push((cur, im.lo));
            gens.push((cur_gen, im.lo_gen));
        }
        cur = im.hi;
        cur_gen = im.hi_gen;
    }
    if cur.is_finite() {
        return Err(Error::NoSolution("support is unbounded above".into()));
    }
    if intervals.is_empty() {
        return Err(Error::EmptySupport);
    }

    let scale = intervals.last().map(|iv| iv.1.abs()).unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let mut out_iv: Vec<(f64, f64)> = Vec::new();
    let mut out_gen: Vec<(Option<Boundary>, Option<Boundary>)> = Vec::new();
    for (iv, g) in intervals.into_iter().zip(gens) {
        if iv.1 - iv.0 <= 0.0 {
            continue;
        }
        match (out_iv.last_mut(), out_gen.last_mut()) {
            (Some(last), Some(lg)) if iv.0 - last.1 < 1e-9 * scale => {
                last.1 = iv.1;
                lg.1 = g.1;
            }
            _ => {
                out_iv.push(iv);
                out_gen.push(g);
            }
        }
    }
    if out_iv.is_empty() {
        return Err(Error::EmptySupport);
    }
    let boundaries = out_gen
        .into_iter()
        .flat_map(|(a, b)| [a, b])
        .flatten()
        .collect();
    Ok(SupportIntervals {
        intervals: out_iv,
        zero_mass: (1.0 - 1.0 / c).max(0.0),
        boundaries,
    })
}

/// `S_F` from the branches listed in `branches` (all of `1..=M` when `None`).
///
/// Passing only the outer branch `Some(&[M])` is faster and exact when the
/// gaps of `S_D` are small.
pub fn find_support_mixture(
    h: &SpectralDistribution,
    d: &WeightDistribution,
    c: f64,
    branches: Option<&[usize]>,
) -> Result<SupportIntervals> {
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::invalid(format!("concentration must be positive, got {c}")));
    }
    let m = d.n_branches();
    let all: Vec<usize> = (1..=m).collect();
    let ks = branches.unwrap_or(&all);
    if ks.is_empty() {
        return Err(Error::invalid("no branches selected"));
    }
    let mut tasks = Vec::new();
    for &k in ks {
        let bf = BranchFunction::new(h, d, c, k)?;
        for p in pieces(h) {
            tasks.push((bf, p));
        }
    }
    let per_task: Vec<Result<Vec<Image>>> = tasks.par_iter().map(|(bf, p)| analyse_piece(bf, *p)).collect();
    let mut images = Vec::new();
    for r in per_task {
        images.extend(r?);
    }
    assemble(images, c)
}

/// `S_F` for a weight law with connected support.
pub fn find_support_convex(h: &SpectralDistribution, d: &WeightDistribution, c: f64) -> Result<SupportIntervals> {
    if !d.is_convex() {
        return Err(Error::invalid("weight distribution support is not an interval"));
    }
    find_support_mixture(h, d, c, None)
}

/// `S_F` using every branch.
pub fn find_support(h: &SpectralDistribution, d: &WeightDistribution, c: f64) -> Result<SupportIntervals> {
    find_support_mixture(h, d, c, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marchenko_pastur_support() {
        let h = SpectralDistribution::dirac(1.0).unwrap();
        let d = WeightDistribution::identity();
        for c in [0.1, 0.25, 0.5, 2.0] {
            let s = find_support_convex(&h, &d, c).unwrap();
            assert_eq!(s.len(), 1, "c = {c}: {:?}", s.intervals);
            let (l, r) = s.intervals[0];
            assert!((l - (1.0 - c.sqrt()).powi(2)).abs() < 1e-10, "{l}");
            assert!((r - (1.0 + c.sqrt()).powi(2)).abs() < 1e-10, "{r}");
            assert_eq!(s.zero_mass, (1.0 - 1.0 / c).max(0.0));
            assert_eq!(s.boundaries.len(), 2);
        }
    }

    #[test]
    fn boundaries_are_critical_points() {
        let h = SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).unwrap();
        let d = WeightDistribution::uniform(1.0).unwrap();
        let s = find_support(&h, &d, 0.1).unwrap();
        assert_eq!(s.len(), 3);
        for b in &s.boundaries {
            let bf = BranchFunction::new(&h, &d, 0.1, b.branch).unwrap();
            let (x, dx, _) = bf.eval_x(b.x_star).unwrap();
            assert!(dx.abs() < 1e-9, "x_F' = {dx}");
            assert!((x - b.x).abs() <= 1e-9 * b.x.abs());
        }
    }

    #[test]
    fn outer_branch_slope_tends_to_mean() {
        let h = SpectralDistribution::new(vec![1.0, 3.0], vec![0.5, 0.5]).unwrap();
        let d = WeightDistribution::ewma(2.0).unwrap();
        let bf = BranchFunction::new(&h, &d, 0.3, 1).unwrap();
        for u in [-1e7, 1e7] {
            let (_, y1, _) = bf.eval(u).unwrap();
            assert!((y1 - d.mean()).abs() < 1e-5);
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).unwrap();
        let d = WeightDistribution::dirac(vec![0.5, 40.5], vec![79.0 / 80.0, 1.0 / 80.0]).unwrap();
        for k in 1..=2 {
            let bf = BranchFunction::new(&h, &d, 0.1, k).unwrap();
            for u in [-3.0, 0.4, 2.0, 5.5, 20.0] {
                let step = 1e-5 * (1.0 + f64::abs(u));
                let (_, y1, y2) = bf.eval(u).unwrap();
                let (yp, y1p, _) = bf.eval(u + step).unwrap();
                let (ym, y1m, _) = bf.eval(u - step).unwrap();
                let fd1 = (yp - ym) / (2.0 * step);
                let fd2 = (y1p - y1m) / (2.0 * step);
                assert!((fd1 - y1).abs() <= 1e-5 * y1.abs().max(1.0), "k={k} u={u}: {fd1} vs {y1}");
                assert!((fd2 - y2).abs() <= 1e-5 * y2.abs().max(1.0), "k={k} u={u}: {fd2} vs {y2}");
            }
        }
    }

    #[test]
    fn zero_of_t_inverts_exactly() {
        // t(u) = 0 between the two atoms; there x_F(X) = -(1/X) ∫δ dD.
        let h = SpectralDistribution::new(vec![1.0, 3.0], vec![0.5, 0.5]).unwrap();
        let d = WeightDistribution::uniform(1.0).unwrap();
        let u0 = 1.5; // 0.5/(1-u) + 1.5/(3-u) = 0
        let bf = BranchFunction::new(&h, &d, 0.2, 1).unwrap();
        let (y, _, _) = bf.eval(u0).unwrap();
        assert!((y - u0 * d.mean()).abs() < 1e-12);
    }
}
