use wesper::resolvent::{density_from_x, x_f_derivative};
use wesper::{
    build_grid, density_at, density_curve, find_support, sample_spectrum, solve_x_real, BranchFunction, GridStrategy,
    Noise, SimulationConfig, SpectralDistribution, SupportIntervals, WeightDistribution,
};

struct Case {
    name: &'static str,
    h: SpectralDistribution,
    d: WeightDistribution,
    c: f64,
}

fn three_atoms() -> SpectralDistribution {
    SpectralDistribution::new(vec![1.0, 3.0, 10.0], vec![0.2, 0.4, 0.4]).unwrap()
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            name: "mp",
            h: SpectralDistribution::dirac(1.0).unwrap(),
            d: WeightDistribution::identity(),
            c: 0.25,
        },
        Case {
            name: "mp-rank-deficient",
            h: SpectralDistribution::dirac(1.0).unwrap(),
            d: WeightDistribution::identity(),
            c: 2.0,
        },
        Case {
            name: "uniform-c0.25",
            h: three_atoms(),
            d: WeightDistribution::uniform(1.0).unwrap(),
            c: 0.25,
        },
        Case {
            name: "uniform-c0.1",
            h: three_atoms(),
            d: WeightDistribution::uniform(1.0).unwrap(),
            c: 0.1,
        },
        Case {
            name: "ewma",
            h: three_atoms(),
            d: WeightDistribution::ewma(1.0).unwrap(),
            c: 0.1,
        },
        Case {
            name: "two-dirac",
            h: three_atoms(),
            d: WeightDistribution::dirac(vec![0.5, 40.5], vec![79.0 / 80.0, 1.0 / 80.0]).unwrap(),
            c: 0.1,
        },
    ]
}

fn support(case: &Case) -> SupportIntervals {
    find_support(&case.h, &case.d, case.c).unwrap()
}

#[test]
fn edges_are_critical_points_of_their_branch() {
    for case in cases() {
        let s = support(&case);
        for b in &s.boundaries {
            let f = BranchFunction::new(&case.h, &case.d, case.c, b.branch).unwrap();
            let (x, dx, _) = f.eval_x(b.x_star).unwrap();
            assert!((x - b.x).abs() <= 1e-9 * b.x.max(1.0), "{}: image {x} vs edge {}", case.name, b.x);
            assert!(dx.abs() <= 1e-9 * b.x.max(1.0), "{}: x_F' = {dx} at edge {}", case.name, b.x);
        }
        assert_eq!(s.boundaries.len(), 2 * s.len(), "{}", case.name);
    }
}

#[test]
fn density_has_square_root_edges() {
    for case in cases() {
        let s = support(&case);
        for &(l, r) in &s.intervals {
            let scale = r - l;
            for (edge, dir) in [(l, 1.0), (r, -1.0)] {
                let pts: Vec<(f64, f64)> = (0..12)
                    .map(|i| {
                        let delta = scale * 10f64.powf(-4.0 + 2.0 * i as f64 / 11.0);
                        let f = density_at(&case.h, &case.d, case.c, edge + dir * delta).unwrap();
                        (delta.ln(), f.ln())
                    })
                    .collect();
                let n = pts.len() as f64;
                let (sx, sy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
                let (sxx, sxy) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 * p.0, a.1 + p.0 * p.1));
                let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
                assert!((0.4..=0.6).contains(&slope), "{}: slope {slope} at edge {edge}", case.name);
            }
        }
    }
}

#[test]
fn off_support_points_are_real_and_increasing() {
    for case in cases() {
        let s = support(&case);
        let mut probes: Vec<f64> = s
            .intervals
            .windows(2)
            .flat_map(|w| (1..=9).map(move |i| w[0].1 + (w[1].0 - w[0].1) * i as f64 / 10.0))
            .collect();
        let (lo, hi) = (s.lower_edge().unwrap(), s.upper_edge().unwrap());
        probes.extend((1..=5).map(|i| lo * i as f64 / 6.0));
        probes.extend((1..=5).map(|i| hi * (1.0 + 0.2 * i as f64)));
        for x in probes.into_iter().filter(|&x| x > 0.0) {
            let p = solve_x_real(&case.h, &case.d, case.c, x).unwrap();
            assert_eq!(p.x.im, 0.0, "{}: X̌({x}) = {}", case.name, p.x);
            assert!(!p.degenerate, "{}: degenerate at {x}", case.name);
            let slope = x_f_derivative(&case.h, &case.d, case.c, x, p.x.re).unwrap();
            assert!(slope > 0.0, "{}: x_F' = {slope} at {x}", case.name);
        }
    }
}

#[test]
fn interior_points_have_positive_density() {
    for case in cases() {
        let s = support(&case);
        for &(l, r) in &s.intervals {
            for i in 1..50 {
                let x = l + (r - l) * i as f64 / 50.0;
                let p = solve_x_real(&case.h, &case.d, case.c, x).unwrap();
                assert!(p.x.im > 0.0, "{}: X̌({x}) = {}", case.name, p.x);
                assert!(density_from_x(&case.h, x, p.x) > 0.0);
            }
        }
    }
}

#[test]
fn increasing_runs_map_outside_the_support() {
    for case in cases() {
        let s = support(&case);
        let atoms = case.h.atoms();
        let (lo, hi) = (atoms[0], atoms[atoms.len() - 1]);
        let span = hi - lo + 1.0;
        for k in 1..=case.d.n_branches() {
            let f = BranchFunction::new(&case.h, &case.d, case.c, k).unwrap();
            for i in 0..4000 {
                let u = lo - 20.0 * span + 60.0 * span * i as f64 / 4000.0;
                let Ok((y, dy, _)) = f.eval(u) else { continue };
                if dy > 1e-8 && y > 0.0 {
                    let inside = s.intervals.iter().any(|&(l, r)| {
                        let tol = 1e-7 * (r - l);
                        y > l + tol && y < r - tol
                    });
                    assert!(!inside, "{}: branch {k} increasing at u = {u} maps into S_F at {y}", case.name);
                }
            }
        }
    }
}

#[test]
fn density_integrates_to_one() {
    for case in cases() {
        let s = support(&case);
        let grid = build_grid(&s, 2000, GridStrategy::Uniform, None).unwrap();
        let curve = density_curve(&case.h, &case.d, case.c, &grid, s.zero_mass).unwrap();
        let mass = curve.total_mass();
        assert!((mass - 1.0).abs() <= 1e-3, "{}: mass {mass}", case.name);
        assert_eq!(s.zero_mass, (1.0 - 1.0 / case.c).max(0.0));
    }
}

#[test]
fn sampled_eigenvalues_fall_inside_the_dilated_support() {
    for (i, case) in cases().into_iter().enumerate() {
        let s = support(&case);
        let cfg = SimulationConfig {
            n: 1000,
            c: case.c,
            noise: Noise::Gaussian,
            seed: 400 + i as u64,
            h: case.h.clone(),
            d: case.d.clone(),
        };
        let eigs = sample_spectrum(&cfg).unwrap().eigenvalues;
        let dilated = s.dilated(0.05);
        // Exact zeros of a rank-deficient matrix belong to the atom at zero.
        let outside = eigs
            .iter()
            .filter(|&&x| x > 1e-9 && !dilated.iter().any(|&(l, r)| x >= l && x <= r))
            .count();
        assert!(outside as f64 <= 0.01 * eigs.len() as f64, "{}: {outside} outside", case.name);
    }
}
