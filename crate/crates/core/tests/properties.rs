use proptest::prelude::*;
use wesper::grid::arcsine_points;
use wesper::resolvent::{fundamental, solve_x_upper_warm};
use wesper::{build_grid, solve_x_upper, GridStrategy, SpectralDistribution, SupportIntervals, WeightDistribution, C64};

fn weight_law() -> impl Strategy<Value = WeightDistribution> {
    prop_oneof![
        (0.1..50.0f64).prop_map(|a| WeightDistribution::ewma(a).unwrap()),
        (0.05..1.9f64).prop_map(|a| WeightDistribution::uniform(a).unwrap()),
        (prop::collection::vec(0.1..3.0f64, 1..5), prop::collection::vec(0.1..1.0f64, 5)).prop_map(|(steps, w)| {
            let atoms: Vec<f64> = steps.iter().scan(0.0, |acc, s| {
                *acc += s;
                Some(*acc)
            }).collect();
            let w: Vec<f64> = w[..atoms.len()].to_vec();
            let total: f64 = w.iter().sum();
            WeightDistribution::dirac(atoms, w.iter().map(|x| x / total).collect()).unwrap()
        }),
    ]
}

fn population() -> impl Strategy<Value = SpectralDistribution> {
    (prop::collection::vec(0.2..4.0f64, 1..5), prop::collection::vec(0.1..1.0f64, 4)).prop_map(|(steps, w)| {
        let atoms: Vec<f64> = steps.iter().scan(0.0, |acc, s| {
            *acc += s;
            Some(*acc)
        }).collect();
        let w: Vec<f64> = w[..atoms.len()].to_vec();
        let total: f64 = w.iter().sum();
        SpectralDistribution::new(atoms, w.iter().map(|x| x / total).collect()).unwrap()
    })
}

/// Domain of branch `k < M`: the gap between the `k`-th and `k+1`-th
/// components of `S_D`.
fn gap(d: &WeightDistribution, k: usize) -> (f64, f64) {
    let iv = d.support_intervals();
    (iv[k - 1].1, iv[k].0)
}

/// A point of branch `k` selected by `s ∈ (0, 1)` and, on the outer branch,
/// a side and a distance factor.
fn branch_point(d: &WeightDistribution, k: usize, s: f64, left: bool, far: f64) -> f64 {
    if k < d.n_branches() {
        let (lo, hi) = gap(d, k);
        lo + s * (hi - lo)
    } else if left {
        d.d1() - far * d.d2()
    } else {
        d.d2() + far * d.d2()
    }
}

fn distance_to_support(d: &WeightDistribution, x: f64) -> f64 {
    d.support_intervals()
        .iter()
        .map(|&(l, r)| if x < l { l - x } else if x > r { x - r } else { 0.0 })
        .fold(f64::INFINITY, f64::min)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn m_ld_inverse_round_trip(
        d in weight_law(),
        kf in 0.0..1.0f64,
        s in 0.01..0.99f64,
        left in any::<bool>(),
        far in 0.01..10.0f64,
    ) {
        let k = 1 + ((kf * d.n_branches() as f64) as usize).min(d.n_branches() - 1);
        let x = branch_point(&d, k, s, left, far);
        let y = d.m_ld(x).unwrap();
        let back = d.m_ld_inverse(k, y).unwrap();
        prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0), "k = {k}, x = {x}, back = {back}");
    }

    #[test]
    fn m_ld_increases_on_each_component(d in weight_law()) {
        let m = d.n_branches();
        for k in 1..=m {
            let scan: Vec<f64> = if k < m {
                let (lo, hi) = gap(&d, k);
                (1..200).map(|i| lo + (hi - lo) * i as f64 / 200.0).collect()
            } else {
                let left = (1..100).map(|i| d.d1() - 10.0 * d.d2() * (1.0 - i as f64 / 100.0));
                left.chain((1..100).map(|i| d.d2() + 10.0 * d.d2() * i as f64 / 100.0)).collect()
            };
            let vals: Vec<f64> = scan.iter().map(|&x| d.m_ld(x).unwrap()).collect();
            for (i, x) in scan.iter().enumerate() {
                prop_assert!(d.m_ld_derivatives(*x).unwrap().0 > 0.0);
                if i > 0 && (scan[i - 1] < d.d1()) == (*x < d.d1()) {
                    prop_assert!(vals[i] > vals[i - 1], "not increasing at {x}");
                }
            }
        }
    }

    #[test]
    fn m_ld_is_one_at_zero(d in weight_law()) {
        prop_assert!((d.m_ld(0.0).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn m_ld_derivatives_match_differences(
        d in weight_law(),
        kf in 0.0..1.0f64,
        s in 0.01..0.99f64,
        left in any::<bool>(),
        far in 0.01..10.0f64,
    ) {
        let k = 1 + ((kf * d.n_branches() as f64) as usize).min(d.n_branches() - 1);
        let x = branch_point(&d, k, s, left, far);
        prop_assume!(distance_to_support(&d, x) >= 0.05 * (1.0 + x.abs()));
        let h = 1e-5 * (1.0 + x.abs());
        let (_, d1, d2) = d.m_ld_all(x).unwrap();
        let (fp, d1p, _) = d.m_ld_all(x + h).unwrap();
        let (fm, d1m, _) = d.m_ld_all(x - h).unwrap();
        let fd1 = (fp - fm) / (2.0 * h);
        let fd2 = (d1p - d1m) / (2.0 * h);
        prop_assert!((fd1 - d1).abs() <= 1e-5 * d1.abs(), "m' {d1} vs {fd1}");
        prop_assert!((fd2 - d2).abs() <= 1e-5 * d2.abs().max(1e-300), "m'' {d2} vs {fd2}");
    }

    #[test]
    fn t_derivatives_match_differences(h in population(), c in 0.05..3.0f64, u in -20.0..50.0f64) {
        let dist = h.atoms().iter().map(|a| (a - u).abs()).fold(f64::INFINITY, f64::min);
        prop_assume!(dist >= 0.05 * (1.0 + u.abs()));
        let step = 1e-5 * (1.0 + u.abs());
        let (_, t1, t2) = h.t(c, u).unwrap();
        let (tp, t1p, _) = h.t(c, u + step).unwrap();
        let (tm, t1m, _) = h.t(c, u - step).unwrap();
        prop_assert!(((tp - tm) / (2.0 * step) - t1).abs() <= 1e-5 * t1.abs());
        prop_assert!(((t1p - t1m) / (2.0 * step) - t2).abs() <= 1e-5 * t2.abs().max(1e-300));
    }

    #[test]
    fn arcsine_grid_is_symmetric(l in -10.0..10.0f64, len in 1e-3..100.0f64, omega in 1usize..300) {
        let r = l + len;
        let p = arcsine_points(l, r, omega);
        prop_assert_eq!(p.len(), omega + 2);
        for j in 0..p.len() {
            let mirror = p[p.len() - 1 - j];
            prop_assert!((p[j] + mirror - l - r).abs() <= 1e-12 * (l.abs() + r.abs() + len));
        }
        prop_assert!(p.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn arcsine_grid_clusters_at_edges(len in 1e-3..100.0f64, omega in 3usize..500) {
        let p = arcsine_points(0.0, len, omega);
        let first = p[1] - p[0];
        let mid = omega.div_ceil(2);
        let inner = p[mid + 1] - p[mid];
        prop_assert!(first < inner);
        prop_assert!(first <= 2.5 * len / ((omega + 1) * (omega + 1)) as f64);
    }

    #[test]
    fn mixed_strategy_limits(
        eigs in prop::collection::vec(0.0..3.0f64, 1..200),
        omega in 3usize..400,
    ) {
        let support = SupportIntervals {
            intervals: vec![(0.0, 1.0), (1.5, 2.0), (2.5, 3.0)],
            zero_mass: 0.0,
            boundaries: vec![],
        };
        prop_assume!(eigs.iter().any(|&x| support.contains(x)));
        let uni = build_grid(&support, omega, GridStrategy::Uniform, None).unwrap();
        let freq = build_grid(&support, omega, GridStrategy::Frequentist, Some(&eigs)).unwrap();
        let m1 = build_grid(&support, omega, GridStrategy::Mixed { mu: 1.0 }, Some(&eigs)).unwrap();
        let m0 = build_grid(&support, omega, GridStrategy::Mixed { mu: 0.0 }, Some(&eigs)).unwrap();
        prop_assert_eq!(&m1.omegas, &uni.omegas);
        prop_assert_eq!(&m0.omegas, &freq.omegas);
        prop_assert_eq!(m0.points, freq.points);
        prop_assert_eq!(freq.omegas.iter().sum::<usize>(), omega);
    }
}

fn m_from_x(h: &SpectralDistribution, z: C64, x: C64) -> C64 {
    let s: C64 = h.atoms().iter().zip(h.weights()).map(|(&t, &w)| w / (x * t + 1.0)).sum();
    -s / z
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn resolvent_contract(
        h in population(),
        d in weight_law(),
        c in 0.05..3.0f64,
        re in -2.0..30.0f64,
        log_im in -3.0..1.0f64,
        inits in prop::collection::vec((-3.0..3.0f64, 0.01..3.0f64), 5),
    ) {
        let z = C64::new(re, 10f64.powf(log_im));
        let p = solve_x_upper(&h, &d, c, z).unwrap();
        let (f, _) = fundamental(&h, &d, c, z, p.x).unwrap();
        prop_assert!(f.norm() <= 1e-10 * z.norm().max(1.0), "residual {}", f.norm());
        prop_assert!(p.x.im > 0.0);
        prop_assert!(m_from_x(&h, z, p.x).im > 0.0);
        for (a, b) in inits {
            let q = solve_x_upper_warm(&h, &d, c, z, Some(C64::new(a, b))).unwrap();
            prop_assert!((q.x - p.x).norm() <= 1e-8 * p.x.norm().max(1.0), "{} vs {}", q.x, p.x);
        }
    }

    #[test]
    fn approach_to_the_real_line_is_cauchy(
        h in population(),
        d in weight_law(),
        c in 0.05..3.0f64,
        lambda in 0.05..30.0f64,
    ) {
        let xs: Vec<C64> = (2..=6)
            .map(|e| solve_x_upper(&h, &d, c, C64::new(lambda, 10f64.powi(-e))).unwrap().x)
            .collect();
        let diffs: Vec<f64> = xs.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        for w in diffs.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-6) + 1e-12, "differences {diffs:?}");
        }
    }
}
