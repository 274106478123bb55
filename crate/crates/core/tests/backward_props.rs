use proptest::prelude::*;
use rbdsde::bdsde::{self, PenaltyMode, Scheme, SolverOptions};
use rbdsde::coefficients::{AffineNoise, CoefficientSet, Constants};
use rbdsde::fixpoint::{weighted_distance, NormWeights};
use rbdsde::geometry::Domain;
use rbdsde::noise::{Channel, Increments, TimeGrid};
use rbdsde::reflected_sde::{simulate_ensemble, EnsembleSpec, PathEnsemble, SdeSpec};
use std::sync::Arc;

const N: usize = 20;
const PATHS: usize = 600;

fn ensemble(seed: u64, with_noise: bool) -> PathEnsemble {
    let dom = Domain::interval(-1.0, 1.5).unwrap();
    let sde = SdeSpec::constant(vec![0.1], vec![0.8]).unwrap();
    let grid = TimeGrid::new(0.0, 1.0, N).unwrap();
    let b = if with_noise {
        Increments::sample(&grid, 1, seed, Channel::Backward, 0).unwrap()
    } else {
        Increments::zeros(N, 1)
    };
    let spec = EnsembleSpec {
        n_paths: PATHS,
        seed,
        first_stream: 0,
    };
    simulate_ensemble(&dom, &sde, &grid, 0.0, &[0.2], spec, &b, 0).unwrap()
}

fn problem(a: f64, b: f64, level: f64, noise: f64) -> CoefficientSet {
    CoefficientSet::zero(1, 1)
        // kept above the obstacle at T
        .with_terminal(move |x| (a * x[0] + b * (2.0 * x[0]).sin()).max(level + 0.2 * x[0] - 0.1))
        .with_driver(move |_, x, y, z| -0.5 * y + 0.2 * z[0] + 0.1 * x[0])
        .with_boundary(move |_, x, y| 0.3 * x[0] - 0.2 * y)
        .with_obstacle(move |t, x| level + 0.2 * x[0] - 0.1 * t)
        .with_noise(Arc::new(AffineNoise {
            a_y: vec![0.1],
            a_z: Vec::new(),
            offset: vec![noise],
        }))
}

fn schemes() -> impl Strategy<Value = Scheme> {
    prop_oneof![
        Just(Scheme::Generalized),
        Just(Scheme::Direct),
        (1.0..100.0f64).prop_map(|n| Scheme::Penalized {
            n,
            mode: PenaltyMode::Implicit
        }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn terminal_values_and_k_bookkeeping_are_exact(
        a in -1.0..1.0f64, b in -1.0..1.0f64, level in -0.5..0.5f64, noise in 0.0..0.3f64,
        seed in 0u64..1000, scheme in schemes(),
    ) {
        let cs = problem(a, b, level, noise);
        let ens = ensemble(seed, true);
        let sol = bdsde::solve(&cs, &ens, scheme, &SolverOptions::default()).unwrap();
        for p in 0..PATHS {
            prop_assert_eq!(sol.y(p, N), cs.l(ens.x(p, N)));
            let total: f64 = (0..N).map(|i| sol.dk(p, i)).sum();
            prop_assert_eq!(sol.k(p, N) - sol.k(p, 0), total);
        }
    }

    #[test]
    fn direct_scheme_dominates_the_obstacle(
        a in -1.0..1.0f64, b in -1.0..1.0f64, level in -0.5..0.5f64, seed in 0u64..1000,
    ) {
        let cs = problem(a, b, level, 0.2);
        let ens = ensemble(seed, true);
        let sol = bdsde::solve_reflected_direct(&cs, &ens, &SolverOptions::default()).unwrap();
        for i in 0..=N {
            let t = ens.grid.time(i);
            for p in 0..PATHS {
                prop_assert!(sol.y(p, i) - cs.h(t, ens.x(p, i)).unwrap() >= 0.0);
            }
        }
    }

    #[test]
    fn penalized_means_increase_with_n(
        a in -1.0..1.0f64, level in -0.5..0.5f64, seed in 0u64..1000, n in 1.0..50.0f64, factor in 1.5..8.0f64,
    ) {
        let cs = problem(a, 0.3, level, 0.2);
        let ens = ensemble(seed, true);
        let opts = SolverOptions::default();
        let lo = bdsde::solve_penalized(&cs, n, PenaltyMode::Implicit, &ens, &opts).unwrap();
        let hi = bdsde::solve_penalized(&cs, n * factor, PenaltyMode::Implicit, &ens, &opts).unwrap();
        for i in 0..=N {
            let d: Vec<f64> = hi.y_node(i).iter().zip(lo.y_node(i)).map(|(u, v)| u - v).collect();
            let m = d.iter().sum::<f64>() / PATHS as f64;
            let var = d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (PATHS - 1) as f64;
            let node_se = |s: &bdsde::BackwardSolution| s.node_se.get(i).copied().unwrap_or(0.0);
            let se = (var / PATHS as f64).sqrt().max(node_se(&lo).hypot(node_se(&hi)));
            prop_assert!(m >= -3.0 * se, "node {i}: mean difference {m:e}, se {se:e}");
        }
    }

    #[test]
    fn y_at_a_point_start_is_deterministic_without_backward_noise(
        a in -1.0..1.0f64, b in -1.0..1.0f64, seed in 0u64..1000, scheme in schemes(),
    ) {
        let cs = problem(a, b, -0.3, 0.0).with_noise(Arc::new(AffineNoise::constant(vec![0.0])));
        let ens = ensemble(seed, false);
        let sol = bdsde::solve(&cs, &ens, scheme, &SolverOptions::default()).unwrap();
        let y0 = sol.y_node(0);
        let spread = y0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - y0.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(spread <= 1e-12 * (1.0 + y0[0].abs()), "spread {spread:e}");
    }

    #[test]
    fn weighted_distance_is_a_metric(
        shifts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 3), seed in 0u64..1000,
    ) {
        let ens = ensemble(seed, true);
        let opts = SolverOptions::default();
        let sols: Vec<_> = shifts
            .iter()
            .map(|&(a, b)| {
                let cs = problem(a, b, 0.0, 0.2).without_obstacle();
                bdsde::solve(&cs, &ens, Scheme::Generalized, &opts).unwrap()
            })
            .collect();
        let consts = Constants { c: 0.5, k: 1.0, beta: -1.0, alpha: 0.5, mu: 0.0 };
        let w = NormWeights::from_constants(&consts, None).unwrap();
        let dist = |i: usize, j: usize| weighted_distance(&sols[i], &sols[j], &w, &ens).unwrap().sqrt();
        prop_assert_eq!(dist(0, 0), 0.0);
        prop_assert!((dist(0, 1) - dist(1, 0)).abs() <= 1e-12 * dist(0, 1));
        prop_assert!(dist(0, 2) <= dist(0, 1) + dist(1, 2) + 1e-12);
    }
}
