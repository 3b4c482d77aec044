use ccgeo_core::families::builtin;
use ccgeo_core::fields::{bracket, generate_commutators, CommutatorBasis, VectorField};
use ccgeo_core::flows::{approx_exponential, box_norm, flow_combination};
use ccgeo_core::linalg::{dist, op_norm};
use ccgeo_core::metrics::{path_from_coefficients, path_radius, sample_controls, Metric};
use ccgeo_core::multilinear::cramer_in_columns;
use ccgeo_core::ode::IntegratorConfig;
use ccgeo_core::poly::Poly;
use ccgeo_core::pullback::neumann_bound_check;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn basis(name: &str) -> CommutatorBasis {
    generate_commutators(&builtin(name).unwrap())
}

fn scaled(entries: &[f64], p: usize, target: f64) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(p, p, &entries[..p * p]);
    let n = op_norm(&m);
    if n == 0.0 {
        m
    } else {
        m * (target / n)
    }
}

/// Quadratic field on the plane with the given six coefficients per component.
fn quadratic_field(c: &[f64]) -> VectorField {
    let comp = |k: &[f64]| {
        let mut p = Poly::constant(2, k[0]);
        for (coef, e) in k[1..].iter().zip([[1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]) {
            p = p.add(&Poly::monomial(*coef, &e));
        }
        p
    };
    VectorField::from_polys(vec![comp(&c[..6]), comp(&c[6..12])], vec![0]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn neumann_bound_holds(
        p in 1usize..5,
        chi in prop::collection::vec(-1.0f64..1.0, 16),
        b in prop::collection::vec(-1.0f64..1.0, 16),
        sc in 0.0f64..0.5,
        sb in 0.0f64..2.0,
    ) {
        let v = neumann_bound_check(&scaled(&chi, p, sc), &scaled(&b, p, sb)).unwrap();
        prop_assert!(v.holds, "{v:?}");
    }

    #[test]
    fn path_radius_is_dilation_equivariant(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 1..5),
        lambda in 0.1f64..10.0,
    ) {
        let lengths = [1, 1, 2, 3];
        let a: Vec<f64> = rows.concat();
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let d: Vec<f64> = rows
            .iter()
            .flat_map(|row| row.iter().zip(lengths).map(|(v, l)| v * lambda.powi(l as i32)).collect::<Vec<_>>())
            .collect();
        let r = path_radius(&a, &lengths);
        prop_assert!((path_radius(&d, &lengths) / (lambda * r) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cc_path_radius_is_l1_of_rows(rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 2), 1..6)) {
        let a: Vec<f64> = rows.concat();
        let expect: f64 = rows.iter().map(|r| (r[0] * r[0] + r[1] * r[1]).sqrt()).sum();
        prop_assert!((path_radius(&a, &[1, 1]) - expect).abs() <= 1e-12 * expect.max(1.0));
    }

    #[test]
    fn bracket_is_antisymmetric(
        c1 in prop::collection::vec(-1.0f64..1.0, 12),
        c2 in prop::collection::vec(-1.0f64..1.0, 12),
        x in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let (v, w) = (quadratic_field(&c1), quadratic_field(&c2));
        let a = bracket(&v, &w, &x).unwrap();
        let b = bracket(&w, &v, &x).unwrap();
        prop_assert!(a.iter().zip(&b).all(|(p, q)| (p + q).abs() < 1e-12));
        prop_assert!(bracket(&v, &v, &x).unwrap().iter().all(|p| p.abs() < 1e-12));
    }

    #[test]
    fn cramer_reconstructs_vectors_in_the_span(
        cols in prop::collection::vec(-1.0f64..1.0, 8),
        xi in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let m = DMatrix::from_column_slice(4, 2, &cols);
        let s = ccgeo_core::linalg::singular_values(&m);
        prop_assume!(s[1] > 1e-3 * s[0]);
        let w: Vec<f64> = (0..4).map(|i| m[(i, 0)] * xi[0] + m[(i, 1)] * xi[1]).collect();
        let (got, res) = cramer_in_columns(&m, &w);
        prop_assert!(res < 1e-9);
        prop_assert!(dist(&got, &xi) < 1e-6 * (1.0 / (s[1] / s[0])));
    }

    #[test]
    fn box_norm_is_homogeneous(
        h in prop::collection::vec(-1.0f64..1.0, 3),
        lambda in 0.01f64..10.0,
    ) {
        let lengths = [1, 2, 3];
        let d: Vec<f64> = h.iter().zip(lengths).map(|(v, l)| v * lambda.powi(l)).collect();
        let a = box_norm(&h, &[1, 2, 3]);
        prop_assert!((box_norm(&d, &[1, 2, 3]) - lambda * a).abs() <= 1e-12 * (lambda * a).max(1e-300));
    }

    #[test]
    fn sampled_controls_depend_only_on_seed(seed in 0u64..1000) {
        let a = sample_controls(4, Metric::Rho, 3, seed);
        let b = sample_controls(4, Metric::Rho, 3, seed);
        for (p, q) in a.iter().zip(&b) {
            prop_assert_eq!(p.hash(), q.hash());
            prop_assert!((p.segments.iter().map(|s| s.duration).sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.segments.iter().all(|s| s.coeffs.iter().map(|c| c * c).sum::<f64>() <= 1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn exp_ap_negative_parameter_inverts(
        fam in prop::sample::select(vec!["heisenberg", "grushin", "martinet"]),
        k in 0usize..16,
        h in -0.05f64..0.05,
        x in prop::collection::vec(-0.5f64..0.5, 3),
    ) {
        let b = basis(fam);
        let words = b.words();
        let word = &words[k % words.len()];
        let x = &x[..b.dim()];
        let cfg = IntegratorConfig::default();
        let y = approx_exponential(&b, word, h, x, &cfg).unwrap();
        let z = approx_exponential(&b, word, -h, &y, &cfg).unwrap();
        prop_assert!(dist(&z, x) < 1e-8, "{word:?} {h} {:e}", dist(&z, x));
    }

    #[test]
    fn coefficient_paths_replay_segment_flows(
        rows in prop::collection::vec(prop::collection::vec(-0.05f64..0.05, 4), 1..4),
    ) {
        let b = basis("heisenberg");
        let cfg = IntegratorConfig::default();
        let a: Vec<f64> = rows.concat();
        prop_assume!(a.iter().any(|v| v.abs() > 1e-3));
        let path = path_from_coefficients(&a, &b.lengths, Metric::Rho);
        let got = path.endpoint(&b, &[0.0; 3], &cfg).unwrap();
        let mut y = vec![0.0; 3];
        for row in &rows {
            y = flow_combination(row, &b, &y, 1.0, &cfg).unwrap();
        }
        prop_assert!(dist(&got, &y) < 1e-8, "{got:?} {y:?}");
        prop_assert!((path.radius - path_radius(&a, &b.lengths)).abs() < 1e-12);
    }
}
