use proptest::prelude::*;
use rbdsde::bdsde::{PenaltyMode, Scheme, SolverOptions};
use rbdsde::coefficients::CoefficientSet;
use rbdsde::field::{build_field, FieldLayout, Problem};
use rbdsde::geometry::Domain;
use rbdsde::noise::TimeGrid;
use rbdsde::reflected_sde::{EnsembleSpec, SdeSpec};

fn problem(a: f64, b: f64, level: f64) -> Problem {
    let h = move |t: f64, x: &[f64]| level + 0.3 * x[0] * x[0] - 0.2 * t;
    Problem {
        domain: Domain::interval(-1.0, 1.0).unwrap(),
        sde: SdeSpec::constant(vec![0.2], vec![0.7]).unwrap(),
        coeffs: CoefficientSet::zero(1, 1)
            .with_terminal(move |x| (a * x[0] + b * (3.0 * x[0]).cos()).max(h(1.0, x)))
            .with_driver(|_, x, y, _| -0.4 * y + 0.2 * x[0])
            .with_boundary(|_, _, y| -0.3 * y)
            .with_obstacle(h),
        grid: TimeGrid::new(0.0, 1.0, 10).unwrap(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn terminal_row_is_l_and_direct_fields_dominate_h(
        a in -1.0..1.0f64, b in -1.0..1.0f64, level in -0.5..0.3f64, seed in 0u64..1000,
    ) {
        let p = problem(a, b, level);
        let layout = FieldLayout::uniform(&p.grid, 3, &[-0.9], &[0.9], 5).unwrap();
        let ens = EnsembleSpec { n_paths: 300, seed, first_stream: 0 };
        let opts = SolverOptions::default();
        let direct = build_field(&p, &layout, Scheme::Direct, &opts, ens, 0, None).unwrap();
        let last = layout.t_nodes.len() - 1;
        for (xi, x) in direct.points.iter().enumerate() {
            prop_assert_eq!(direct.u_at(last, xi).to_bits(), p.coeffs.l(x).to_bits());
        }
        let h = direct.h.as_ref().unwrap();
        for (u, h) in direct.u.iter().zip(h) {
            prop_assert!(u - h >= 0.0);
        }
        let gen = build_field(&p, &layout, Scheme::Generalized, &opts, ens, 0, None).unwrap();
        for (xi, x) in gen.points.iter().enumerate() {
            prop_assert_eq!(gen.u_at(last, xi).to_bits(), p.coeffs.l(x).to_bits());
        }
    }

    #[test]
    fn penalized_fields_approach_the_direct_field(level in -0.3..0.3f64, seed in 0u64..1000) {
        let p = problem(0.2, 0.1, level);
        let layout = FieldLayout::uniform(&p.grid, 3, &[-0.9], &[0.9], 5).unwrap();
        let ens = EnsembleSpec { n_paths: 300, seed, first_stream: 0 };
        let opts = SolverOptions::default();
        let direct = build_field(&p, &layout, Scheme::Direct, &opts, ens, 0, None).unwrap();
        let mut prev = f64::INFINITY;
        for n in [4.0, 32.0, 256.0] {
            let pen = Scheme::Penalized { n, mode: PenaltyMode::Implicit };
            let f = build_field(&p, &layout, pen, &opts, ens, 0, None).unwrap();
            let dist = f.u.iter().zip(&direct.u).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(dist <= prev, "n = {n}: {dist} after {prev}");
            prev = dist;
        }
    }
}
