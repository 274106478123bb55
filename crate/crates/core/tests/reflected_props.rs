use proptest::prelude::*;
use rbdsde::geometry::Domain;
use rbdsde::noise::{sample_bundle, Increments, TimeGrid};
use rbdsde::reflected_sde::{simulate_ensemble, simulate_reflected, EnsembleSpec, SdeSpec};

fn ellipse_start() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(0.3..2.0f64, 2),
        0.0..std::f64::consts::TAU,
        0.0..0.95f64,
    )
        .prop_map(|(axes, a, s)| {
            let x0 = vec![s * axes[0] * a.cos(), s * axes[1] * a.sin()];
            (vec![0.0, 0.0], axes, x0)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn paths_stay_in_the_closure(
        (c, axes, x0) in ellipse_start(),
        drift in prop::collection::vec(-3.0..3.0f64, 2),
        vol in 0.1..2.0f64,
        seed in any::<u64>(),
    ) {
        let dom = Domain::ellipsoid(c, axes).unwrap();
        let sde = SdeSpec::constant(drift, vec![vol, 0.0, 0.3 * vol, vol]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let b = Increments::zeros(100, 1);
        let ens = simulate_ensemble(
            &dom, &sde, &grid, 0.0, &x0,
            EnsembleSpec { n_paths: 200, seed, first_stream: 0 }, &b, 0,
        ).unwrap();
        for p in 0..200 {
            for i in 0..=100 {
                prop_assert!(-dom.psi(ens.x(p, i)) <= dom.boundary_tol());
            }
            prop_assert_eq!(ens.a(p, 100), (0..100).map(|i| ens.da(p, i)).sum::<f64>());
        }
    }

    #[test]
    fn local_time_grows_only_on_projected_steps(
        (c, axes, x0) in ellipse_start(),
        seed in any::<u64>(),
        stream in 0u64..1000,
    ) {
        let dom = Domain::ellipsoid(c, axes).unwrap();
        let sde = SdeSpec::constant(vec![0.5, -0.5], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 200).unwrap();
        let bundle = sample_bundle(&grid, 2, 1, seed, stream).unwrap();
        let path = simulate_reflected(&dom, &sde, 0.0, &x0, &bundle).unwrap();
        let interior: f64 = (0..200)
            .filter(|&i| !path.exited[i])
            .map(|i| path.a[i + 1] - path.a[i])
            .sum();
        prop_assert_eq!(interior, 0.0);
        prop_assert!(path.a.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn ordered_starts_stay_ordered_without_noise(
        x1 in 0.05..0.95f64,
        gap in 0.0..0.5f64,
        rate in -3.0..3.0f64,
    ) {
        let dom = Domain::interval(0.0, 1.0).unwrap();
        let sde = SdeSpec::geometric(rate, 0.0).unwrap();
        let grid = TimeGrid::new(0.0, 1.0, 100).unwrap();
        let x2 = (x1 + gap).min(1.0);
        let bundle = sample_bundle(&grid, 1, 1, 0, 0).unwrap();
        let lo = simulate_reflected(&dom, &sde, 0.0, &[x1], &bundle).unwrap();
        let hi = simulate_reflected(&dom, &sde, 0.0, &[x2], &bundle).unwrap();
        for i in 0..=100 {
            prop_assert!(lo.x_at(i)[0] <= hi.x_at(i)[0]);
        }
    }
}

#[test]
fn halving_the_step_moves_the_mean_by_less_than_root_dt() {
    let dom = Domain::interval(0.0, 1.0).unwrap();
    let sde = SdeSpec::brownian(1, 1.0).unwrap();
    let mean_at = |n: usize, seed: u64| {
        let grid = TimeGrid::new(0.0, 1.0, n).unwrap();
        let ens = simulate_ensemble(
            &dom,
            &sde,
            &grid,
            0.0,
            &[0.3],
            EnsembleSpec {
                n_paths: 20_000,
                seed,
                first_stream: 0,
            },
            &Increments::zeros(n, 1),
            0,
        )
        .unwrap();
        (0..20_000).map(|p| ens.x(p, n)[0]).sum::<f64>() / 20_000.0
    };
    let n = 100;
    let diff = (mean_at(n, 1) - mean_at(2 * n, 2)).abs();
    assert!(diff <= (1.0 / n as f64).sqrt(), "E[X_T] moved by {diff}");
}
