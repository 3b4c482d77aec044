//! The acceptance matrix: twelve numbered checks over the built-in families,
//! each reporting a verdict and the measured quantity it was judged on.

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{GeoError, Result};
use crate::families::{builtin, default_center, BUILTIN_NAMES};
use crate::fields::{box_grid, generate_commutators, CommutatorBasis};
use crate::flows::{approx_exponential, box_norm, Chart, EMap};
use crate::linalg::{dist, norm, op_norm};
use crate::measures::{
    doubling_ratio, poincare_ratio, test_suite, tuple_at, MeasureOptions, TestFunction,
};
use crate::metrics::{
    ball_box_check, reach_upper, sample_ball, stream_rng, BallBoxOptions, BallBoxReport, Metric,
    Reach, ReachOptions,
};
use crate::multilinear::TupleIndex;
use crate::ode::IntegratorConfig;
use crate::poly::Poly;
use crate::pullback::{
    a_matrix_at, chi_matrix, injectivity_check_e, lift_path, lift_phi_through_e, map_psi,
    neumann_bound_check, pushforward_defect, solve_a_ode,
};

/// Criterion names in order; `--only` takes one of these or a number.
pub const CRITERIA: [&str; 12] = [
    "brackets",
    "exp-ap-order",
    "chi",
    "a-ode",
    "psi",
    "ballbox-inner",
    "ballbox-outer",
    "injectivity",
    "doubling",
    "poincare",
    "orbits",
    "neumann",
];

#[derive(Clone, Debug, Serialize)]
pub struct CriterionReport {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub detail: Vec<String>,
}

impl CriterionReport {
    /// One line: `criterion N name: PASS|FAIL measured=...`.
    pub fn line(&self) -> String {
        format!(
            "criterion {:>2} {:<14} {} measured={:.6e}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.measured
        )
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Two seeds for the reproducibility checks; the first drives single-seed checks.
    pub seeds: [u64; 2],
    /// Restrict to one built-in family.
    pub family: Option<String>,
    pub measure_samples: usize,
    pub poincare_samples: usize,
    pub ballbox_samples: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seeds: [1, 2],
            family: None,
            measure_samples: 2000,
            poincare_samples: 1000,
            ballbox_samples: 200,
        }
    }
}

/// Resolves a criterion given by number or name to its id.
pub fn criterion_id(key: &str) -> Result<usize> {
    if let Ok(k) = key.parse::<usize>() {
        if (1..=CRITERIA.len()).contains(&k) {
            return Ok(k);
        }
    }
    CRITERIA
        .iter()
        .position(|n| *n == key)
        .map(|i| i + 1)
        .ok_or_else(|| {
            GeoError::invalid(format!(
                "unknown criterion '{key}' (known: {})",
                CRITERIA.join(", ")
            ))
        })
}

fn basis(name: &str) -> Result<CommutatorBasis> {
    Ok(generate_commutators(&builtin(name)?))
}

fn families<'a>(opts: &SuiteOptions, list: &[&'a str]) -> Vec<&'a str> {
    list.iter()
        .copied()
        .filter(|n| opts.family.as_deref().is_none_or(|f| f == *n))
        .collect()
}

fn report(id: usize, passed: bool, measured: f64, detail: Vec<String>) -> CriterionReport {
    CriterionReport {
        id,
        name: CRITERIA[id - 1].to_string(),
        passed,
        measured,
        detail,
    }
}

/// Point uniform in the Euclidean ball of radius `rad` in `R^p`.
fn in_ball(rng: &mut ChaCha8Rng, p: usize, rad: f64) -> Vec<f64> {
    let g: Vec<f64> = (0..p)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let n = norm(&g).max(1e-300);
    let s = rad * rng.random::<f64>().powf(1.0 / p as f64) / n;
    g.iter().map(|v| v * s).collect()
}

/// Random `p x p` matrix with spectral norm `target`.
fn matrix_with_norm(rng: &mut ChaCha8Rng, p: usize, target: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let n = op_norm(&m);
    if n == 0.0 {
        return m;
    }
    m * (target / n)
}

fn max_min_ratio(a: f64, b: f64) -> f64 {
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Symbolic brackets against nested finite differences of the horizontal fields.
fn brackets(opts: &SuiteOptions) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &["heisenberg", "grushin", "martinet", "shear"]);
    if fams.is_empty() {
        return Ok(None);
    }
    let mut worst: f64 = 0.0;
    let mut all_symbolic = true;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let nb = b.to_numeric();
        let mut rng = stream_rng(opts.seeds[0], 7);
        let mut fam_worst: f64 = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = b
                .domain_box
                .iter()
                .map(|(lo, hi)| {
                    let (c, w) = (0.5 * (lo + hi), 0.45 * (hi - lo));
                    c + w * (2.0 * rng.random::<f64>() - 1.0)
                })
                .collect();
            for j in b.m..b.q() {
                all_symbolic &= b.members[j].is_polynomial();
                let s = b.members[j].eval(&x);
                let n = nb.members[j].eval(&x);
                let err = dist(&s, &n) / norm(&s).max(1.0);
                fam_worst = fam_worst.max(err);
            }
        }
        detail.push(format!(
            "{name}: max relative error {fam_worst:.3e} over 100 points"
        ));
        worst = worst.max(fam_worst);
    }
    Ok(Some(report(
        1,
        all_symbolic && worst <= 1e-6,
        worst,
        detail,
    )))
}

/// Remainders below this count as integration noise.
const EXP_AP_FLOOR: f64 = 1e-11;

/// Log-log slope of `|exp_ap(h X_w) x - x - h Y_w(x)|` against `h`.
fn exp_ap_order(opts: &SuiteOptions) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &BUILTIN_NAMES);
    if fams.is_empty() {
        return Ok(None);
    }
    let cfg = IntegratorConfig {
        rel_tol: 1e-13,
        abs_tol: 1e-15,
        ..IntegratorConfig::default()
    };
    let hs = [1e-2, 3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5];
    let mut passed = true;
    let mut worst_margin = f64::INFINITY;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        for j in b.m..b.q() {
            let word = b.members[j].word().to_vec();
            let l = word.len();
            let y = b.members[j].eval(&x);
            let mut lx = Vec::new();
            let mut ly = Vec::new();
            for &h in &hs {
                let z = approx_exponential(&b, &word, h, &x, &cfg)?;
                let rem: f64 = z
                    .iter()
                    .zip(&x)
                    .zip(&y)
                    .map(|((zi, xi), yi)| (zi - xi - h * yi).powi(2))
                    .sum::<f64>()
                    .sqrt();
                if rem > EXP_AP_FLOOR {
                    lx.push(h.ln());
                    ly.push(rem.ln());
                }
            }
            let required = 1.0 + 1.0 / l as f64 - 0.15;
            let w: Vec<usize> = word.iter().map(|a| a + 1).collect();
            if lx.len() < 3 {
                detail.push(format!("{name} {w:?}: remainder at noise level"));
                continue;
            }
            let slope = crate::linalg::fit_slope(&lx, &ly);
            let margin = slope - required;
            worst_margin = worst_margin.min(margin);
            passed &= margin >= 0.0;
            detail.push(format!(
                "{name} {w:?}: slope {slope:.3} (need {required:.3})"
            ));
        }
    }
    let measured = if worst_margin.is_finite() {
        worst_margin
    } else {
        0.0
    };
    Ok(Some(report(2, passed, measured, detail)))
}

/// Candidate box and ball radii, largest first.
const RADIUS_LADDER: [f64; 5] = [1.0, 0.5, 0.25, 0.125, 0.0625];

fn box_sides(basis: &CommutatorBasis, tuple: &TupleIndex, eps: f64) -> Vec<(f64, f64)> {
    tuple
        .member_lengths(&basis.lengths)
        .iter()
        .map(|&l| {
            let a = eps.powi(l as i32);
            (-a, a)
        })
        .collect()
}

/// Largest `|chi|` over a grid, or `None` when some frame collapses.
fn chi_sup(
    b: &CommutatorBasis,
    t: &TupleIndex,
    x: &[f64],
    r: f64,
    grid: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<Option<(f64, f64, f64)>> {
    let lengths = t.member_lengths(&b.lengths);
    let (mut sup, mut c, mut res) = (0.0f64, 0.0f64, 0.0f64);
    for h in grid {
        let rep = match chi_matrix(b, t, x, r, h, cfg) {
            Ok(rep) => rep,
            Err(GeoError::FrameCollapse { .. }) | Err(GeoError::EscapedDomain { .. }) => {
                return Ok(None)
            }
            Err(e) => return Err(e),
        };
        let n = op_norm(&rep.chi);
        sup = sup.max(n);
        res = res.max(rep.residual);
        let hn = box_norm(h, &lengths);
        if hn > 0.0 {
            c = c.max(n / hn);
        }
    }
    Ok(Some((sup, c, res)))
}

/// `|chi(h)| <= C |h|_I` on a `7^p` grid of the largest box with `|chi| <= 1/2`.
fn chi(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &["heisenberg", "grushin"]);
    if fams.is_empty() {
        return Ok(None);
    }
    let r = 0.1;
    let mut passed = true;
    let mut worst_c: f64 = 0.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let t = tuple_at(&b, &x, r)?;
        let mut eps0 = None;
        for &eps in &RADIUS_LADDER {
            let coarse = box_grid(&box_sides(&b, &t, eps), 3);
            if let Some((sup, _, _)) = chi_sup(&b, &t, &x, r, &coarse, cfg)? {
                if sup <= 0.5 {
                    eps0 = Some(eps);
                    break;
                }
            }
        }
        let Some(eps0) = eps0 else {
            passed = false;
            detail.push(format!("{name} {t}: no box with |chi| <= 1/2"));
            continue;
        };
        let grid = box_grid(&box_sides(&b, &t, eps0), 7);
        let at0 = op_norm(&chi_matrix(&b, &t, &x, r, &vec![0.0; t.len()], cfg)?.chi);
        match chi_sup(&b, &t, &x, r, &grid, cfg)? {
            Some((sup, c, res)) => {
                let ok = c.is_finite() && at0 <= 1e-3 && res <= 1e-4;
                passed &= ok;
                worst_c = worst_c.max(c);
                detail.push(format!(
                    "{name} {t}: eps0 {eps0}, C {c:.4}, sup |chi| {sup:.3e}, |chi(0)| {at0:.1e}, residual {res:.1e}"
                ));
            }
            None => {
                passed = false;
                detail.push(format!(
                    "{name} {t}: frame collapse on the 7^p grid at eps0 {eps0}"
                ));
            }
        }
    }
    Ok(Some(report(3, passed, worst_c, detail)))
}

/// Pushforward of `Z_j` by `Phi` along rays on Heisenberg; `A = 0` on the plane.
fn a_ode(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &["heisenberg", "euclid2in3"]);
    if fams.is_empty() {
        return Ok(None);
    }
    let r = 0.1;
    let rho_max = 0.5;
    let mut passed = true;
    let mut measured: f64 = 0.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let t = tuple_at(&b, &x, r)?;
        let mut rng = stream_rng(opts.seeds[0], 41);
        let mut worst: f64 = 0.0;
        for _ in 0..5 {
            let mut omega = in_ball(&mut rng, t.len(), 1.0);
            let n = norm(&omega);
            omega.iter_mut().for_each(|v| *v /= n);
            let ray = solve_a_ode(&b, &t, &x, r, &omega, rho_max, 10, cfg)?;
            for (rho, a) in ray.rhos.iter().zip(&ray.a) {
                if name == "heisenberg" {
                    let u: Vec<f64> = omega.iter().map(|v| v * rho).collect();
                    worst = worst.max(pushforward_defect(&b, &t, &x, r, &u, a, cfg)?);
                } else {
                    worst = worst.max(op_norm(a));
                }
            }
        }
        if name == "heisenberg" {
            passed &= worst <= 1e-3;
            measured = measured.max(worst);
            detail.push(format!(
                "{name} {t}: max pushforward defect {worst:.3e} over 5 rays x 10 radii"
            ));
        } else {
            passed &= worst <= 1e-12;
            detail.push(format!("{name} {t}: max |A| {worst:.3e}"));
        }
    }
    Ok(Some(report(4, passed, measured, detail)))
}

/// Bi-Lipschitz ratios of `Psi_{u1}` on the largest ball where `|A| <= 1/4`.
fn psi(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &BUILTIN_NAMES);
    if fams.is_empty() {
        return Ok(None);
    }
    let r = 0.1;
    let mut passed = true;
    let mut measured: f64 = 1.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let t = tuple_at(&b, &x, r)?;
        let p = t.len();
        let mut eta2 = None;
        'ladder: for &eta in &RADIUS_LADDER {
            let mut rng = stream_rng(opts.seeds[0], 53);
            for _ in 0..10 {
                let u = in_ball(&mut rng, p, 2.0 * eta);
                match a_matrix_at(&b, &t, &x, r, &u, cfg) {
                    Ok(a) if op_norm(&a) <= 0.25 => {}
                    Ok(_)
                    | Err(GeoError::RadiusTooLarge { .. })
                    | Err(GeoError::EscapedDomain { .. }) => continue 'ladder,
                    Err(e) => return Err(e),
                }
            }
            eta2 = Some(eta);
            break;
        }
        let Some(eta2) = eta2 else {
            passed = false;
            detail.push(format!("{name} {t}: no ball with |A| <= 1/4"));
            continue;
        };
        let mut rng = stream_rng(opts.seeds[0], 59);
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for _ in 0..200 {
            let u1 = in_ball(&mut rng, p, eta2);
            let v = in_ball(&mut rng, p, eta2);
            let w = in_ball(&mut rng, p, eta2);
            let d = dist(&v, &w);
            if d == 0.0 {
                continue;
            }
            let a = map_psi(&b, &t, &x, r, &u1, &v, cfg)?;
            let c = map_psi(&b, &t, &x, r, &u1, &w, cfg)?;
            let q = dist(&a, &c) / d;
            lo = lo.min(q);
            hi = hi.max(q);
        }
        passed &= lo >= 0.5 && hi <= 2.0;
        measured = measured.max(hi).max(1.0 / lo);
        detail.push(format!(
            "{name} {t}: eta2 {eta2}, ratios in [{lo:.4}, {hi:.4}]"
        ));
    }
    Ok(Some(report(5, passed, measured, detail)))
}

struct BallBoxRun {
    family: &'static str,
    r: f64,
    seed: u64,
    rep: BallBoxReport,
}

fn ballbox_runs(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Vec<BallBoxRun>> {
    let mut out = Vec::new();
    for name in families(opts, &["heisenberg", "grushin"]) {
        let b = basis(name)?;
        let x = default_center(name);
        for r in [0.05, 0.1] {
            let t = tuple_at(&b, &x, r)?;
            for seed in opts.seeds {
                let bo = BallBoxOptions {
                    samples: opts.ballbox_samples,
                    seed,
                    ..BallBoxOptions::default()
                };
                let rep = ball_box_check(&b, &t, &x, r, 0.3, &bo, cfg)?;
                out.push(BallBoxRun {
                    family: name,
                    r,
                    seed,
                    rep,
                });
            }
        }
    }
    Ok(out)
}

fn ballbox_inner(opts: &SuiteOptions, runs: &[BallBoxRun]) -> Option<CriterionReport> {
    if runs.is_empty() {
        return None;
    }
    let mut passed = true;
    let mut measured: f64 = 1.0;
    let mut detail = Vec::new();
    for run in runs {
        let rep = &run.rep;
        let ok = rep.inner_constant > 0.0 && rep.inner_max_residual <= 1e-6 * run.r;
        passed &= ok;
        detail.push(format!(
            "{} r={} seed={}: c {:.4}, max |theta|_I {:.4}, residual {:.2e}",
            run.family,
            run.r,
            run.seed,
            rep.inner_constant,
            rep.inner_max_box_norm,
            rep.inner_max_residual
        ));
    }
    for pair in runs.chunks(opts.seeds.len()) {
        if let [a, b] = pair {
            let q = max_min_ratio(a.rep.inner_constant, b.rep.inner_constant);
            passed &= q <= 1.25;
            measured = measured.max(q);
        }
    }
    Some(report(6, passed, measured, detail))
}

fn ballbox_outer(opts: &SuiteOptions, runs: &[BallBoxRun]) -> Option<CriterionReport> {
    if runs.is_empty() {
        return None;
    }
    let mut passed = true;
    let mut measured: f64 = 1.0;
    let mut detail = Vec::new();
    let mut names: Vec<&str> = runs.iter().map(|r| r.family).collect();
    names.dedup();
    for name in names {
        let per_seed: Vec<f64> = opts
            .seeds
            .iter()
            .map(|s| {
                runs.iter()
                    .filter(|r| r.family == name && r.seed == *s)
                    .map(|r| r.rep.outer_constant)
                    .fold(0.0, f64::max)
            })
            .collect();
        let unreached: usize = runs
            .iter()
            .filter(|r| r.family == name)
            .map(|r| r.rep.outer_unreached)
            .sum();
        let q = max_min_ratio(per_seed[0], per_seed[1]);
        passed &= unreached == 0 && per_seed.iter().all(|c| c.is_finite() && *c > 0.0) && q <= 1.25;
        measured = measured.max(q);
        detail.push(format!(
            "{name}: C per seed {:?}, unreached grid images {unreached}",
            per_seed
                .iter()
                .map(|c| format!("{c:.4}"))
                .collect::<Vec<_>>()
        ));
    }
    Some(report(7, passed, measured, detail))
}

/// Grid in the Euclidean ball of radius `eta` in `R^p`.
fn ball_grid(p: usize, eta: f64, per_axis: usize) -> Vec<Vec<f64>> {
    box_grid(&vec![(-eta, eta); p], per_axis)
        .into_iter()
        .filter(|u| norm(u) <= eta * (1.0 + 1e-12))
        .collect()
}

/// Lift of `Phi` through `E` near the identity on `B(eta3)`, then no collisions
/// of `E` on a `9^p` grid of `Q_I(eta3 / 2)`.
fn injectivity(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &BUILTIN_NAMES);
    if fams.is_empty() {
        return Ok(None);
    }
    let r = 0.1;
    let mut passed = true;
    let mut measured: f64 = 0.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let t = tuple_at(&b, &x, r)?;
        let mut found = None;
        for eta in [0.4, 0.2, 0.1, 0.05] {
            match lift_phi_through_e(&b, &t, &x, r, &ball_grid(t.len(), eta, 5), cfg) {
                Ok(rep) if rep.max_dtheta_defect <= 0.5 => {
                    found = Some((eta, rep));
                    break;
                }
                Ok(_) => {}
                Err(GeoError::EscapedDomain { .. })
                | Err(GeoError::FrameCollapse { .. })
                | Err(GeoError::LiftDiverged { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        let Some((eta3, lift)) = found else {
            passed = false;
            detail.push(format!("{name} {t}: no ball with |d theta - I| <= 1/2"));
            continue;
        };
        measured = measured.max(lift.max_dtheta_defect);
        match injectivity_check_e(&b, &t, &x, r, eta3 / 2.0, 9, cfg) {
            Ok(inj) => detail.push(format!(
                "{name} {t}: eta3 {eta3}, |d theta - I| {:.3e}, {} grid points, min separation ratio {:.3}",
                lift.max_dtheta_defect, inj.grid_points, inj.min_ratio
            )),
            Err(GeoError::NotInjective { a, b: bb, distance }) => {
                passed = false;
                detail.push(format!("{name} {t}: collision {a:?} {bb:?} at distance {distance:.3e}"));
            }
            Err(e) => return Err(e),
        }
    }
    Ok(Some(report(8, passed, measured, detail)))
}

fn doubling(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let targets = [
        ("euclid2in3", 4.0, 0.10),
        ("heisenberg", 16.0, 0.15),
        ("grushin", 8.0, 0.15),
    ];
    let names = families(opts, &targets.map(|t| t.0));
    if names.is_empty() {
        return Ok(None);
    }
    let mo = MeasureOptions {
        samples: opts.measure_samples,
        seed: opts.seeds[0],
        ..MeasureOptions::default()
    };
    let mut passed = true;
    let mut measured = f64::NAN;
    let mut worst: f64 = 0.0;
    let mut detail = Vec::new();
    for (name, target, tol) in targets.iter().filter(|t| names.contains(&t.0)) {
        let b = basis(name)?;
        let x = default_center(name);
        let d = doubling_ratio(&b, &x, 0.1, Metric::Cc, &mo, cfg)?;
        let rel = (d.ratio / target - 1.0).abs();
        passed &= rel <= *tol && !d.small.unreliable && !d.large.unreliable;
        if rel >= worst {
            worst = rel;
            measured = d.ratio;
        }
        detail.push(format!(
            "{name}: ratio {:.4} +- {:.4} (target {target} +- {:.0}%), {} samples",
            d.ratio,
            d.std_error,
            tol * 100.0,
            d.small.sample_size
        ));
    }
    Ok(Some(report(9, passed, measured, detail)))
}

fn poincare(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &BUILTIN_NAMES);
    if fams.is_empty() {
        return Ok(None);
    }
    let mut passed = true;
    let mut measured: f64 = 0.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let n = b.dim();
        let mut suite = test_suite(n, 5, 11);
        suite.push(TestFunction {
            name: "constant".into(),
            f: Poly::constant(n, 1.7),
        });
        for r in [0.1, 0.2] {
            let mut maxima = Vec::new();
            for seed in opts.seeds {
                let mo = MeasureOptions {
                    samples: opts.poincare_samples,
                    seed,
                    ..MeasureOptions::default()
                };
                let rep = poincare_ratio(&b, &x, r, &suite, 3.0, &mo, cfg)?;
                let constant = rep
                    .entries
                    .iter()
                    .find(|e| e.name == "constant")
                    .map(|e| e.ratio);
                passed &= rep.max_ratio <= 10.0
                    && constant == Some(0.0)
                    && !rep.inner.unreliable
                    && !rep.outer.unreliable;
                measured = measured.max(rep.max_ratio);
                maxima.push((rep.max_ratio, rep.argmax));
            }
            let q = max_min_ratio(maxima[0].0, maxima[1].0);
            passed &= q <= 1.25;
            detail.push(format!(
                "{name} r={r}: max ratio {:.4} ({}) / {:.4} ({}), seed spread {:.3}",
                maxima[0].0, maxima[0].1, maxima[1].0, maxima[1].1, q
            ));
        }
    }
    Ok(Some(report(10, passed, measured, detail)))
}

/// Clouds and lifted paths stay on the orbit; the transverse direction is unreachable.
fn orbits(opts: &SuiteOptions, cfg: &IntegratorConfig) -> Result<Option<CriterionReport>> {
    let fams = families(opts, &["euclid2in3", "shear"]);
    if fams.is_empty() {
        return Ok(None);
    }
    let r = 0.1;
    let mut passed = true;
    let mut measured: f64 = 0.0;
    let mut detail = Vec::new();
    for name in fams {
        let b = basis(name)?;
        let x = default_center(name);
        let t = tuple_at(&b, &x, r)?;
        let e = EMap::new(&b, t.clone(), &x, r, cfg);
        let mut drift: f64 = 0.0;
        let mut lifts = 0;
        for metric in [Metric::Cc, Metric::Rho] {
            let cloud = sample_ball(&b, &x, r, metric, 100, opts.seeds[0], cfg)?;
            for cp in &cloud.points {
                drift = drift.max((cp.point[2] - x[2]).abs());
            }
            for cp in cloud.points.iter().take(10) {
                let lift = lift_path(&b, &t, &x, r, &cp.path, cfg)?;
                for th in &lift.theta {
                    drift = drift.max((e.point(th)?[2] - x[2]).abs());
                }
                lifts += 1;
            }
        }
        let mut y = x.clone();
        y[2] += 0.1;
        let mut unreached = true;
        for metric in [Metric::Cc, Metric::Rho] {
            let ro = ReachOptions {
                budget: 1500,
                seed: opts.seeds[0],
                ..ReachOptions::default()
            };
            unreached &= matches!(
                reach_upper(&b, &x, &y, metric, &ro, cfg)?,
                Reach::Unreached { .. }
            );
        }
        passed &= drift <= 1e-8 && unreached;
        measured = measured.max(drift);
        detail.push(format!(
            "{name}: max drift of x3 {drift:.2e} over 200 cloud points and {lifts} lifts, transverse target unreached: {unreached}"
        ));
    }
    Ok(Some(report(11, passed, measured, detail)))
}

fn neumann(opts: &SuiteOptions) -> Result<Option<CriterionReport>> {
    if opts.family.is_some() {
        return Ok(None);
    }
    let mut rng = stream_rng(opts.seeds[0], 97);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(1..=4);
        let (sc, sb) = (0.5 * rng.random::<f64>(), rng.random::<f64>());
        let chi = matrix_with_norm(&mut rng, p, sc);
        let b = matrix_with_norm(&mut rng, p, sb);
        let v = neumann_bound_check(&chi, &b)?;
        if !v.holds {
            failures += 1;
        }
        if v.rhs > 0.0 {
            worst = worst.max(v.lhs / v.rhs);
        }
    }
    Ok(Some(report(
        12,
        failures == 0,
        worst,
        vec![format!(
            "1000 pairs, {failures} violations, largest lhs/rhs {worst:.4}"
        )],
    )))
}

/// Runs one criterion; `None` when the family filter leaves nothing to check.
pub fn run_criterion(
    id: usize,
    opts: &SuiteOptions,
    cfg: &IntegratorConfig,
) -> Result<Option<CriterionReport>> {
    match id {
        1 => brackets(opts),
        2 => exp_ap_order(opts),
        3 => chi(opts, cfg),
        4 => a_ode(opts, cfg),
        5 => psi(opts, cfg),
        6 => Ok(ballbox_inner(opts, &ballbox_runs(opts, cfg)?)),
        7 => Ok(ballbox_outer(opts, &ballbox_runs(opts, cfg)?)),
        8 => injectivity(opts, cfg),
        9 => doubling(opts, cfg),
        10 => poincare(opts, cfg),
        11 => orbits(opts, cfg),
        12 => neumann(opts),
        _ => Err(GeoError::invalid(format!("no criterion {id}"))),
    }
}

/// Runs the listed criteria in order (all when `ids` is empty), sharing the
/// ball-box runs between the inner and outer checks.
pub fn run_suite(
    ids: &[usize],
    opts: &SuiteOptions,
    cfg: &IntegratorConfig,
) -> Result<Vec<CriterionReport>> {
    let ids: Vec<usize> = if ids.is_empty() {
        (1..=CRITERIA.len()).collect()
    } else {
        ids.to_vec()
    };
    let mut runs: Option<Vec<BallBoxRun>> = None;
    let mut out = Vec::new();
    for id in ids {
        let rep = match id {
            6 | 7 => {
                if runs.is_none() {
                    runs = Some(ballbox_runs(opts, cfg)?);
                }
                let runs = runs.as_deref().unwrap_or(&[]);
                if id == 6 {
                    ballbox_inner(opts, runs)
                } else {
                    ballbox_outer(opts, runs)
                }
            }
            _ => run_criterion(id, opts, cfg)?,
        };
        out.extend(rep);
    }
    Ok(out)
}
