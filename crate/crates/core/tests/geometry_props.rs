use proptest::prelude::*;
use rbdsde::geometry::Domain;

fn ellipse() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (
        prop::collection::vec(-1.0..1.0f64, 2),
        prop::collection::vec(0.3..3.0f64, 2),
    )
}

fn direction() -> impl Strategy<Value = Vec<f64>> {
    (0.0..std::f64::consts::TAU).prop_map(|a| vec![a.cos(), a.sin()])
}

fn exterior(c: &[f64], axes: &[f64], dir: &[f64], scale: f64) -> Vec<f64> {
    let r = axes.iter().cloned().fold(0.0, f64::max);
    c.iter()
        .zip(dir)
        .map(|(ci, di)| ci + scale * r * di)
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interior_points_have_positive_psi((c, axes) in ellipse(), dir in direction(), s in 0.0..0.99f64) {
        let dom = Domain::ellipsoid(c.clone(), axes.clone()).unwrap();
        let x: Vec<f64> = (0..2).map(|k| c[k] + s * axes[k] * dir[k]).collect();
        prop_assert!(dom.psi(&x) > 0.0);
    }

    #[test]
    fn projections_land_on_the_boundary_and_are_idempotent(
        (c, axes) in ellipse(), dir in direction(), scale in 1.05..4.0f64,
    ) {
        let dom = Domain::ellipsoid(c.clone(), axes.clone()).unwrap();
        let x = exterior(&c, &axes, &dir, scale);
        let (p, moved) = dom.project_to_closure(&x);
        prop_assert!(dom.psi(&p).abs() <= 1e-9, "psi = {}", dom.psi(&p));
        prop_assert!(moved > 0.0);
        let (q, again) = dom.project_to_closure(&p);
        prop_assert_eq!(again, 0.0);
        prop_assert_eq!(q, p);
    }

    #[test]
    fn no_boundary_point_is_closer_than_the_projection(
        (c, axes) in ellipse(), dir in direction(), scale in 1.05..4.0f64,
    ) {
        let dom = Domain::ellipsoid(c.clone(), axes.clone()).unwrap();
        let x = exterior(&c, &axes, &dir, scale);
        let (p, _) = dom.project_to_closure(&x);
        let best = ((p[0] - x[0]).powi(2) + (p[1] - x[1]).powi(2)).sqrt();
        let m = 20_000;
        for k in 0..m {
            let th = std::f64::consts::TAU * k as f64 / m as f64;
            let b = [c[0] + axes[0] * th.cos(), c[1] + axes[1] * th.sin()];
            let d = ((b[0] - x[0]).powi(2) + (b[1] - x[1]).powi(2)).sqrt();
            prop_assert!(d >= best - 1e-7, "mesh point {b:?} at {d} beats {best}");
        }
    }

    #[test]
    fn inward_normal_points_back_from_the_exterior(
        (c, axes) in ellipse(), dir in direction(), scale in 1.05..4.0f64,
    ) {
        let dom = Domain::ellipsoid(c.clone(), axes.clone()).unwrap();
        let x = exterior(&c, &axes, &dir, scale);
        let (p, _) = dom.project_to_closure(&x);
        let n = dom.inward_normal(&p).unwrap();
        let dot: f64 = n.iter().zip(p.iter().zip(&x)).map(|(ni, (pi, xi))| ni * (pi - xi)).sum();
        prop_assert!(dot > 0.0);
        prop_assert!((n.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn ball_projection_in_three_dimensions(
        c in prop::collection::vec(-1.0..1.0f64, 3),
        r in 0.2..2.0f64,
        v in prop::collection::vec(-5.0..5.0f64, 3),
    ) {
        let dom = Domain::ball(c.clone(), r).unwrap();
        let x: Vec<f64> = c.iter().zip(&v).map(|(a, b)| a + b).collect();
        let norm = v.iter().map(|u| u * u).sum::<f64>().sqrt();
        let (p, moved) = dom.project_to_closure(&x);
        if norm <= r {
            prop_assert_eq!(moved, 0.0);
            prop_assert_eq!(p, x);
        } else {
            prop_assert!((moved - (norm - r)).abs() <= 1e-12);
            prop_assert!(dom.psi(&p).abs() <= 1e-9);
        }
    }
}
