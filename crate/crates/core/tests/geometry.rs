use ccgeo_core::families::builtin;
use ccgeo_core::fields::{generate_commutators, CommutatorBasis};
use ccgeo_core::linalg::fit_slope;
use ccgeo_core::measures::{
    effective_rank, poincare_ratio, sigma_ball, tuple_at, MeasureOptions, TestFunction,
};
use ccgeo_core::metrics::{reach_upper, sample_ball, Metric, ReachOptions};
use ccgeo_core::ode::IntegratorConfig;
use ccgeo_core::poly::Poly;

fn basis(name: &str) -> CommutatorBasis {
    generate_commutators(&builtin(name).unwrap())
}

fn upper(b: &CommutatorBasis, x: &[f64], y: &[f64], metric: Metric) -> f64 {
    let opts = ReachOptions {
        seed: 3,
        ..ReachOptions::default()
    };
    reach_upper(b, x, y, metric, &opts, &IntegratorConfig::default())
        .unwrap()
        .radius()
        .expect("reached")
}

const TARGETS: [[f64; 3]; 3] = [[0.05, 0.0, 0.0], [0.0, 0.0, 0.003], [0.02, -0.03, 0.002]];

#[test]
fn rho_upper_bound_not_above_cc() {
    let b = basis("heisenberg");
    for y in TARGETS {
        let cc = upper(&b, &[0.0; 3], &y, Metric::Cc);
        let rho = upper(&b, &[0.0; 3], &y, Metric::Rho);
        assert!(rho <= 1.05 * cc, "{y:?}: rho {rho} cc {cc}");
    }
}

#[test]
fn cc_upper_bound_nearly_symmetric() {
    let b = basis("heisenberg");
    let x = [0.01, 0.02, -0.001];
    for y in TARGETS {
        let there = upper(&b, &x, &y, Metric::Cc);
        let back = upper(&b, &y, &x, Metric::Cc);
        assert!((there / back - 1.0).abs() < 0.1, "{y:?}: {there} vs {back}");
    }
}

#[test]
fn poincare_ratio_ignores_scaling_of_f() {
    let b = basis("heisenberg");
    let f = Poly::parse("x1*x2 - 0.3*x3 + x2^2", 3).unwrap();
    let suite = vec![
        TestFunction {
            name: "f".into(),
            f: f.clone(),
        },
        TestFunction {
            name: "10f".into(),
            f: f.scale(10.0),
        },
    ];
    let opts = MeasureOptions {
        samples: 400,
        seed: 4,
        ..MeasureOptions::default()
    };
    let rep = poincare_ratio(
        &b,
        &[0.0; 3],
        0.1,
        &suite,
        3.0,
        &opts,
        &IntegratorConfig::default(),
    )
    .unwrap();
    let (a, c) = (rep.entries[0].ratio, rep.entries[1].ratio);
    assert!(a > 0.0 && ((a - c) / a).abs() < 1e-10, "{a} vs {c}");
}

#[test]
fn heisenberg_volume_grows_with_homogeneous_dimension() {
    let b = basis("heisenberg");
    let cfg = IntegratorConfig::default();
    let x = [0.0; 3];
    let opts = MeasureOptions {
        samples: 1000,
        seed: 3,
        ..MeasureOptions::default()
    };
    let radii = [0.05, 0.1, 0.2];
    let sig: Vec<f64> = radii
        .iter()
        .map(|&r| {
            let t = tuple_at(&b, &x, r).unwrap();
            sigma_ball(&b, &t, &x, r, Metric::Cc, &opts, &cfg)
                .unwrap()
                .sigma_p
        })
        .collect();
    assert!(sig.windows(2).all(|w| w[0] < w[1]), "{sig:?}");
    let lx: Vec<f64> = radii.iter().map(|r| r.ln()).collect();
    let ly: Vec<f64> = sig.iter().map(|s| s.ln()).collect();
    let slope = fit_slope(&lx, &ly);
    assert!((slope - 4.0).abs() <= 0.2, "slope {slope}");
}

#[test]
fn measure_is_reproducible_per_seed() {
    let b = basis("grushin");
    let cfg = IntegratorConfig::default();
    let x = [0.5, 0.0];
    let t = tuple_at(&b, &x, 0.1).unwrap();
    let run = |seed| {
        let opts = MeasureOptions {
            samples: 300,
            seed,
            ..MeasureOptions::default()
        };
        sigma_ball(&b, &t, &x, 0.1, Metric::Cc, &opts, &cfg)
            .unwrap()
            .sigma_p
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn shear_cloud_rank_drops_on_the_singular_plane() {
    let b = basis("shear");
    let cfg = IntegratorConfig::default();
    let flat = sample_ball(&b, &[0.0, 0.0, 0.0], 0.1, Metric::Cc, 60, 2, &cfg).unwrap();
    let full = sample_ball(&b, &[0.0, 0.0, 1.0], 0.1, Metric::Cc, 60, 2, &cfg).unwrap();
    assert_eq!(effective_rank(&flat.coordinates(), 1e-6), 1);
    assert_eq!(effective_rank(&full.coordinates(), 1e-6), 2);
}
