//! First-order frames of `E` and `Phi`: the chi matrix, rescaled structure
//! constants, the radial ODE for `A`, the map `Psi`, and path lifting.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, GeoError, Result};
use crate::fields::{
    member_bracket, scaled_structure_constants, structure_constants, CommutatorBasis,
    DEFAULT_RANK_TOL,
};
use crate::flows::{box_norm, cfg_for, map_phi, Chart, EMap, PhiMap};
use crate::linalg::{dist, norm, op_norm, pinv, singular_values};
use crate::metrics::ControlPath;
use crate::multilinear::{cramer_in_columns, wedge_norm, TupleIndex};
use crate::ode::{integrate, IntegratorConfig};

/// `chi(h)` with `dE(h) = [Y~_I(E(h))] (I + chi(h))`, and the relative
/// reconstruction residual of that identity.
#[derive(Clone, Debug)]
pub struct ChiReport {
    pub chi: DMatrix<f64>,
    pub residual: f64,
}

/// Columns `r^{l_j} Y_{i_j}(y)` of the scaled frame.
fn scaled_frame(basis: &CommutatorBasis, tuple: &TupleIndex, y: &[f64], r: f64) -> DMatrix<f64> {
    basis.eval_scaled(tuple, y, r)
}

/// Coordinates of each column of `m` in `frame`; largest residual relative to `|m|`.
fn frame_coordinates(frame: &DMatrix<f64>, m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let p = frame.ncols();
    let mut out = DMatrix::zeros(p, m.ncols());
    let mut res: f64 = 0.0;
    for c in 0..m.ncols() {
        let col: Vec<f64> = m.column(c).iter().copied().collect();
        let (xi, r) = cramer_in_columns(frame, &col);
        for k in 0..p {
            out[(k, c)] = xi[k];
        }
        res = res.max(r);
    }
    (out, res / m.norm().max(f64::MIN_POSITIVE))
}

pub fn chi_matrix(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    h: &[f64],
    cfg: &IntegratorConfig,
) -> Result<ChiReport> {
    let e = EMap::new(basis, tuple.clone(), x, r, cfg);
    let y = e.point(h)?;
    let de = e.jacobian(h)?;
    let frame = scaled_frame(basis, tuple, &y, r);
    let vol = wedge_norm(&frame);
    let scale: f64 = (0..frame.ncols()).map(|c| frame.column(c).norm()).product();
    if vol <= DEFAULT_RANK_TOL * scale || vol == 0.0 {
        return Err(GeoError::FrameCollapse { h: h.to_vec() });
    }
    let (coords, residual) = frame_coordinates(&frame, &de);
    let p = tuple.len();
    Ok(ChiReport {
        chi: coords - DMatrix::identity(p, p),
        residual,
    })
}

/// `c~_ab^k(y)`: `[Y~_a, Y~_b](y) = sum_k c~_ab^k(y) Y~_k(y)` for the scaled tuple
/// `Y~_a = r^{l_{i_a}} Y_{i_a}`. Layout `(a * p + b) * p + k`. Also returns the
/// largest reconstruction residual.
pub fn rescaled_constants_at(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    r: f64,
    y: &[f64],
) -> (Vec<f64>, f64) {
    let p = tuple.len();
    let idx = tuple.indices();
    let frame = scaled_frame(basis, tuple, y, r);
    let mut c = vec![0.0; p * p * p];
    let mut res: f64 = 0.0;
    for a in 0..p {
        for b in (a + 1)..p {
            let s = r.powi((basis.lengths[idx[a]] + basis.lengths[idx[b]]) as i32);
            let br: Vec<f64> = member_bracket(basis, idx[a], idx[b], y)
                .iter()
                .map(|v| v * s)
                .collect();
            let (xi, rr) = cramer_in_columns(&frame, &br);
            res = res.max(rr);
            for k in 0..p {
                c[(a * p + b) * p + k] = xi[k];
                c[(b * p + a) * p + k] = -xi[k];
            }
        }
    }
    (c, res)
}

/// The same constants assembled from the scaled structure constants of the whole
/// family: `c~_ab^k = sum_l c^_{i_a i_b}^l xi_k(Y~_l)`.
pub fn rescaled_constants_via_family(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    r: f64,
    y: &[f64],
) -> Result<Vec<f64>> {
    let p = tuple.len();
    let idx = tuple.indices();
    let c = structure_constants(basis, y, DEFAULT_RANK_TOL)?;
    let ch = scaled_structure_constants(basis, &c, r)?;
    let frame = scaled_frame(basis, tuple, y, r);
    let coords: Vec<Vec<f64>> = (0..basis.q())
        .map(|l| {
            let v: Vec<f64> = basis.members[l]
                .eval(y)
                .iter()
                .map(|t| t * r.powi(basis.lengths[l] as i32))
                .collect();
            cramer_in_columns(&frame, &v).0
        })
        .collect();
    let mut out = vec![0.0; p * p * p];
    for a in 0..p {
        for b in 0..p {
            for (l, xl) in coords.iter().enumerate() {
                let v = ch.get(idx[a], idx[b], l);
                if v == 0.0 {
                    continue;
                }
                for k in 0..p {
                    out[(a * p + b) * p + k] += v * xl[k];
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct RescaledReport {
    pub sup_c: f64,
    pub sup_directional: f64,
    pub max_residual: f64,
    /// Sample points where the tuple is no longer comparable to the maximal one.
    pub maximality_warnings: Vec<Vec<f64>>,
}

/// Ratio used for the maximality check on the ball.
pub const MAXIMALITY_RATIO: f64 = 8.0;

pub fn rescaled_constants_on_ball(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    r: f64,
    sample: &[Vec<f64>],
) -> Result<RescaledReport> {
    if sample.is_empty() {
        return Err(GeoError::invalid("sample must be nonempty"));
    }
    let p = tuple.len();
    let mut sup_c: f64 = 0.0;
    let mut sup_d: f64 = 0.0;
    let mut max_res: f64 = 0.0;
    let mut warnings = Vec::new();
    let h = 1e-5;
    for y in sample {
        check_dim(basis.dim(), y.len())?;
        let (c, res) = rescaled_constants_at(basis, tuple, r, y);
        let scale = basis.eval_scaled(tuple, y, r).norm().max(1e-300);
        max_res = max_res.max(res / scale);
        sup_c = c.iter().fold(sup_c, |a, v| a.max(v.abs()));
        let frame = scaled_frame(basis, tuple, y, r);
        for l in 0..p {
            let dir: Vec<f64> = frame.column(l).iter().copied().collect();
            let yp: Vec<f64> = y.iter().zip(&dir).map(|(a, b)| a + h * b).collect();
            let ym: Vec<f64> = y.iter().zip(&dir).map(|(a, b)| a - h * b).collect();
            let (cp, _) = rescaled_constants_at(basis, tuple, r, &yp);
            let (cm, _) = rescaled_constants_at(basis, tuple, r, &ym);
            for (u, v) in cp.iter().zip(&cm) {
                sup_d = sup_d.max(((u - v) / (2.0 * h)).abs());
            }
        }
        let own = wedge_norm(&frame);
        let cols = basis.eval_all(y);
        let best = crate::multilinear::select_max_volume(&cols, &basis.lengths, p, r).1;
        if own * MAXIMALITY_RATIO < best {
            warnings.push(y.clone());
        }
    }
    Ok(RescaledReport {
        sup_c,
        sup_directional: sup_d,
        max_residual: max_res,
        maximality_warnings: warnings,
    })
}

/// `K(rho)_{ik} = sum_j omega_j c~_ij^k(Phi(rho omega))`, so that `C(rho omega) = rho K(rho)`.
fn k_matrix(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    omega: &[f64],
    rho: f64,
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let p = tuple.len();
    let u: Vec<f64> = omega.iter().map(|w| w * rho).collect();
    let y = map_phi(basis, tuple, x, r, &u, cfg)?;
    let (c, _) = rescaled_constants_at(basis, tuple, r, &y);
    let mut k = DMatrix::zeros(p, p);
    for i in 0..p {
        for kk in 0..p {
            let mut acc = 0.0;
            for (j, w) in omega.iter().enumerate() {
                acc += w * c[(i * p + j) * p + kk];
            }
            k[(i, kk)] = acc;
        }
    }
    Ok(k)
}

/// `C(u)_{ik} = sum_j u_j c~_ij^k(Phi(u))`.
pub fn c_matrix(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u: &[f64],
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let rho = norm(u);
    if rho == 0.0 {
        return Ok(DMatrix::zeros(tuple.len(), tuple.len()));
    }
    let omega: Vec<f64> = u.iter().map(|v| v / rho).collect();
    Ok(k_matrix(basis, tuple, x, r, &omega, rho, cfg)? * rho)
}

/// `A` sampled along a ray `rho -> rho omega`.
#[derive(Clone, Debug)]
pub struct ARay {
    pub omega: Vec<f64>,
    pub rhos: Vec<f64>,
    pub a: Vec<DMatrix<f64>>,
}

/// Start of the regular part of the radial integration.
const RHO_START: f64 = 1e-4;
/// Blow-up threshold for `|A|`.
const A_BLOWUP: f64 = 10.0;

/// Solves `d/drho (rho A) = -(A^2 + C A + C)`, `A(0) = 0`, along the ray
/// through `omega`, reporting `A` at `rho_max * k / samples`, `k = 1..=samples`.
///
/// Integrates `M = rho A`: `M' = -((M/rho)^2 + K M + rho K)`, started from the
/// series value `M = -rho^2 K(0) / 2` at a small radius.
#[allow(clippy::too_many_arguments)]
pub fn solve_a_ode(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    omega: &[f64],
    rho_max: f64,
    samples: usize,
    cfg: &IntegratorConfig,
) -> Result<ARay> {
    let p = tuple.len();
    check_dim(p, omega.len())?;
    let on = norm(omega);
    if (on - 1.0).abs() > 1e-9 {
        return Err(GeoError::invalid("omega must be a unit vector"));
    }
    if !(rho_max > 0.0) {
        return Err(GeoError::invalid("rho_max must be positive"));
    }
    let cfg = cfg_for(basis, cfg);
    let k0 = k_matrix(basis, tuple, x, r, omega, 0.0, &cfg)?;
    let samples = samples.max(1);
    let targets: Vec<f64> = (1..=samples)
        .map(|k| rho_max * k as f64 / samples as f64)
        .collect();
    let mut out = Vec::with_capacity(samples);
    let rho0 = RHO_START.min(targets[0]);
    let mut m = (&k0 * (-0.5 * rho0 * rho0)).as_slice().to_vec();
    let mut rho = rho0;
    let failure: RefCell<Option<GeoError>> = RefCell::new(None);
    let mut ode_cfg = IntegratorConfig {
        domain: None,
        ..cfg.clone()
    };
    ode_cfg.rel_tol = cfg.rel_tol.max(1e-10);
    for &target in &targets {
        if target > rho {
            let rhs = |t: f64, y: &[f64], d: &mut [f64]| {
                if failure.borrow().is_some() {
                    d.iter_mut().for_each(|v| *v = 0.0);
                    return;
                }
                let mm = DMatrix::from_column_slice(p, p, y);
                let k = match k_matrix(basis, tuple, x, r, omega, t, &cfg) {
                    Ok(k) => k,
                    Err(e) => {
                        *failure.borrow_mut() = Some(e);
                        d.iter_mut().for_each(|v| *v = 0.0);
                        return;
                    }
                };
                let a = &mm / t;
                let dm = -(&a * &a + &k * &mm + &k * t);
                d.copy_from_slice(dm.as_slice());
            };
            m = integrate(rhs, &m, rho, target, &ode_cfg)?;
            if let Some(e) = failure.borrow_mut().take() {
                return Err(e);
            }
            rho = target;
        }
        let a = DMatrix::from_column_slice(p, p, &m) / target;
        if !(a.norm().is_finite()) || op_norm(&a) > A_BLOWUP {
            return Err(GeoError::RadiusTooLarge { rho: target });
        }
        out.push(a);
    }
    Ok(ARay {
        omega: omega.to_vec(),
        rhos: targets,
        a: out,
    })
}

/// `A(u)` by integrating along the ray through `u`.
pub fn a_matrix_at(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u: &[f64],
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let rho = norm(u);
    let p = tuple.len();
    if rho == 0.0 {
        return Ok(DMatrix::zeros(p, p));
    }
    let omega: Vec<f64> = u.iter().map(|v| v / rho).collect();
    let ray = solve_a_ode(basis, tuple, x, r, &omega, rho, 1, cfg)?;
    Ok(ray.a.into_iter().next().expect("one sample"))
}

/// Largest relative pushforward defect `|dPhi(u)(e_j + A_j(u)) - Y~_{i_j}(Phi(u))| / |Y~_{i_j}|`.
pub fn pushforward_defect(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u: &[f64],
    a: &DMatrix<f64>,
    cfg: &IntegratorConfig,
) -> Result<f64> {
    let phi = PhiMap::new(basis, tuple.clone(), x, r, cfg);
    let y = phi.point(u)?;
    let dphi = phi.jacobian(u)?;
    let frame = scaled_frame(basis, tuple, &y, r);
    let p = tuple.len();
    let z = DMatrix::identity(p, p) + a.transpose();
    let pushed = dphi * z;
    let mut worst: f64 = 0.0;
    for j in 0..p {
        let d = (pushed.column(j) - frame.column(j)).norm();
        worst = worst.max(d / frame.column(j).norm().max(1e-300));
    }
    Ok(worst)
}

/// `A^` from pulling the frame back through a finite-difference inverse of `dPhi`.
pub fn pulled_back_a(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u: &[f64],
    cfg: &IntegratorConfig,
) -> Result<DMatrix<f64>> {
    let phi = PhiMap::new(basis, tuple.clone(), x, r, cfg);
    let y = phi.point(u)?;
    let dphi = phi.jacobian(u)?;
    let frame = scaled_frame(basis, tuple, &y, r);
    let p = tuple.len();
    let coords = pinv(&dphi, 1e-12) * frame;
    Ok((coords - DMatrix::identity(p, p)).transpose())
}

/// `Psi_{u1}(v)`: time-one flow of `sum_j v_j Z_j` from `u1`, with
/// `Z_j = d_j + sum_k A_jk(u) d_k`.
#[allow(clippy::too_many_arguments)]
pub fn map_psi(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u1: &[f64],
    v: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    let p = tuple.len();
    check_dim(p, u1.len())?;
    check_dim(p, v.len())?;
    if v.iter().all(|t| *t == 0.0) {
        return Ok(u1.to_vec());
    }
    let failure: RefCell<Option<GeoError>> = RefCell::new(None);
    let inner = IntegratorConfig {
        rel_tol: 1e-10,
        abs_tol: 1e-12,
        ..cfg.clone()
    };
    let flow_cfg = IntegratorConfig {
        rel_tol: 1e-8,
        abs_tol: 1e-10,
        domain: None,
        ..cfg.clone()
    };
    let vv = DVector::from_column_slice(v);
    let out = integrate(
        |_, u, d| {
            if failure.borrow().is_some() {
                d.iter_mut().for_each(|t| *t = 0.0);
                return;
            }
            match a_matrix_at(basis, tuple, x, r, u, &inner) {
                Ok(a) => {
                    let w = &vv + a.transpose() * &vv;
                    d.copy_from_slice(w.as_slice());
                }
                Err(e) => {
                    *failure.borrow_mut() = Some(e);
                    d.iter_mut().for_each(|t| *t = 0.0);
                }
            }
        },
        u1,
        0.0,
        1.0,
        &flow_cfg,
    )?;
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    Ok(out)
}

/// Options for Newton continuation along a curve.
#[derive(Clone, Debug)]
pub struct LiftOptions {
    /// Absolute tracking tolerance.
    pub tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
}

impl LiftOptions {
    pub fn for_radius(r: f64) -> Self {
        LiftOptions {
            tol: 1e-9 * r,
            max_newton: 8,
            max_halvings: 8,
        }
    }
}

/// A lifted curve `theta(t)` with `chart(theta(t)) ~ gamma(t)`.
#[derive(Clone, Debug, Serialize)]
pub struct Lift {
    pub times: Vec<f64>,
    pub theta: Vec<Vec<f64>>,
    /// `max_t |theta(t)|_I` (box norm with the chart's member lengths).
    pub max_box_norm: f64,
    pub max_error: f64,
}

impl Lift {
    pub fn end(&self) -> &[f64] {
        self.theta.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn frame_collapsed(j: &DMatrix<f64>) -> bool {
    let s = singular_values(j);
    match (s.first(), s.last()) {
        (Some(&hi), Some(&lo)) => lo <= 1e-10 * hi || hi == 0.0,
        _ => true,
    }
}

/// One continuation step: Newton iterations from `theta` toward `target`.
fn newton_to<C: Chart>(
    chart: &C,
    theta: &[f64],
    target: &[f64],
    opts: &LiftOptions,
) -> Result<Option<(Vec<f64>, f64)>> {
    let j = chart.jacobian(theta)?;
    if frame_collapsed(&j) {
        return Err(GeoError::FrameCollapse { h: theta.to_vec() });
    }
    let jp = pinv(&j, 1e-12);
    let mut th = theta.to_vec();
    let mut y = match chart.point(&th) {
        Ok(y) => y,
        Err(_) => return Ok(None),
    };
    let mut err = dist(&y, target);
    let mut refreshed = false;
    let mut jp = jp;
    for _ in 0..opts.max_newton {
        if err <= opts.tol {
            return Ok(Some((th, err)));
        }
        let res: Vec<f64> = target.iter().zip(&y).map(|(a, b)| a - b).collect();
        let step = &jp * DVector::from_column_slice(&res);
        let cand: Vec<f64> = th.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
        let ny = match chart.point(&cand) {
            Ok(v) => v,
            Err(_) => return Ok(None),
        };
        let nerr = dist(&ny, target);
        if nerr >= err {
            // refresh the Jacobian once before giving up on this step
            if refreshed {
                return Ok(None);
            }
            let jn = chart.jacobian(&th)?;
            if frame_collapsed(&jn) {
                return Err(GeoError::FrameCollapse { h: th.to_vec() });
            }
            jp = pinv(&jn, 1e-12);
            refreshed = true;
            continue;
        }
        th = cand;
        y = ny;
        err = nerr;
    }
    if err <= opts.tol {
        Ok(Some((th, err)))
    } else {
        Ok(None)
    }
}

/// Lifts a curve given by `gamma` at the node times through a chart, starting at `theta0`.
pub fn lift_curve<C, G>(
    chart: &C,
    lengths: &[usize],
    gamma: G,
    times: &[f64],
    theta0: &[f64],
    opts: &LiftOptions,
) -> Result<Lift>
where
    C: Chart,
    G: Fn(f64) -> Result<Vec<f64>>,
{
    let mut theta = vec![theta0.to_vec()];
    let mut max_err: f64 = dist(&chart.point(theta0)?, &gamma(times[0])?);
    if max_err > opts.tol.max(1e-12) * 10.0 {
        return Err(GeoError::LiftDiverged {
            t: times[0],
            error: max_err,
        });
    }
    let mut max_box = box_norm(theta0, lengths);
    for w in times.windows(2) {
        let (t0, t1) = (w[0], w[1]);
        let mut cur = theta.last().unwrap().clone();
        // stack of sub-targets, processed front to back
        let mut pending: Vec<(f64, usize)> = vec![(t1, 0)];
        let mut t_cur = t0;
        while let Some((tt, depth)) = pending.pop() {
            let target = gamma(tt)?;
            match newton_to(chart, &cur, &target, opts)? {
                Some((th, err)) => {
                    cur = th;
                    t_cur = tt;
                    max_err = max_err.max(err);
                    max_box = max_box.max(box_norm(&cur, lengths));
                }
                None => {
                    if depth >= opts.max_halvings {
                        let y = chart.point(&cur).unwrap_or_default();
                        return Err(GeoError::LiftDiverged {
                            t: tt,
                            error: dist(&y, &target),
                        });
                    }
                    pending.push((tt, depth + 1));
                    pending.push((0.5 * (t_cur + tt), depth + 1));
                }
            }
        }
        theta.push(cur);
    }
    Ok(Lift {
        times: times.to_vec(),
        theta,
        max_box_norm: max_box,
        max_error: max_err,
    })
}

/// Nodes per control segment used when lifting control paths.
pub const LIFT_NODES_PER_SEGMENT: usize = 4;

/// Lifts the path driven by `controls` from `x` through `E_{I,x,r}`.
///
/// `eps` is the box radius the lift is expected to stay in; the result reports
/// the actual `max |theta|_I` and the caller compares.
pub fn lift_path(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    controls: &ControlPath,
    cfg: &IntegratorConfig,
) -> Result<Lift> {
    let e = EMap::new(basis, tuple.clone(), x, r, cfg);
    let (times, points) = controls.trajectory(basis, x, LIFT_NODES_PER_SEGMENT, cfg)?;
    let lengths = tuple.member_lengths(&basis.lengths);
    let opts = LiftOptions::for_radius(r);
    let p = tuple.len();
    let gamma = |t: f64| -> Result<Vec<f64>> {
        if let Some(k) = times.iter().position(|&s| s == t) {
            return Ok(points[k].clone());
        }
        controls.point_at(basis, x, t, cfg)
    };
    lift_curve(&e, &lengths, gamma, &times, &vec![0.0; p], &opts)
}

/// Result of lifting `Phi` through `E` on a grid.
#[derive(Clone, Debug, Serialize)]
pub struct PhiLiftReport {
    pub points: usize,
    /// `max_u |d theta(u) - I|` (spectral norm).
    pub max_dtheta_defect: f64,
    /// `max_u |E(theta(u)) - Phi(u)|`.
    pub max_residual: f64,
    /// `max_u |theta(u) - u|`.
    pub max_offset: f64,
}

/// Lifts `t -> Phi(t u)` through `E` for every `u` of the grid.
pub fn lift_phi_through_e(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    grid: &[Vec<f64>],
    cfg: &IntegratorConfig,
) -> Result<PhiLiftReport> {
    let e = EMap::new(basis, tuple.clone(), x, r, cfg);
    let phi = PhiMap::new(basis, tuple.clone(), x, r, cfg);
    let lengths = tuple.member_lengths(&basis.lengths);
    let opts = LiftOptions::for_radius(r);
    let p = tuple.len();
    let times: Vec<f64> = (0..=8).map(|k| k as f64 / 8.0).collect();
    let mut rep = PhiLiftReport {
        points: grid.len(),
        max_dtheta_defect: 0.0,
        max_residual: 0.0,
        max_offset: 0.0,
    };
    for u in grid {
        check_dim(p, u.len())?;
        let gamma = |t: f64| -> Result<Vec<f64>> {
            let v: Vec<f64> = u.iter().map(|a| a * t).collect();
            phi.point(&v)
        };
        let lift = lift_curve(&e, &lengths, gamma, &times, &vec![0.0; p], &opts)?;
        let th = lift.end().to_vec();
        let res = dist(&e.point(&th)?, &phi.point(u)?);
        let de = e.jacobian(&th)?;
        let dphi = phi.jacobian(u)?;
        let dtheta = pinv(&de, 1e-12) * dphi;
        let defect = op_norm(&(dtheta - DMatrix::identity(p, p)));
        rep.max_dtheta_defect = rep.max_dtheta_defect.max(defect);
        rep.max_residual = rep.max_residual.max(res);
        rep.max_offset = rep.max_offset.max(dist(&th, u));
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize)]
pub struct InjectivityReport {
    pub grid_points: usize,
    pub min_ratio: f64,
    pub kappa: f64,
    pub sigma_min: f64,
    pub spacing: f64,
    pub worst_pair: Option<(Vec<f64>, Vec<f64>)>,
}

/// Evaluates `E` on a `density^p` grid in `Q_I(eps1)` and checks that distinct
/// grid points have images at least `kappa * spacing * sigma_min(dE)` apart.
#[allow(clippy::too_many_arguments)]
pub fn injectivity_check_e(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    eps1: f64,
    density: usize,
    cfg: &IntegratorConfig,
) -> Result<InjectivityReport> {
    let kappa = 0.1;
    let e = EMap::new(basis, tuple.clone(), x, r, cfg);
    let lengths = tuple.member_lengths(&basis.lengths);
    let sides: Vec<(f64, f64)> = lengths
        .iter()
        .map(|&l| {
            let a = eps1.powi(l as i32) * (1.0 - 1e-9);
            (-a, a)
        })
        .collect();
    let grid = crate::fields::box_grid(&sides, density.max(2));
    let spacing = sides
        .iter()
        .map(|(lo, hi)| (hi - lo) / (density.max(2) - 1) as f64)
        .fold(f64::INFINITY, f64::min);
    let images = grid
        .iter()
        .map(|h| e.point(h))
        .collect::<Result<Vec<_>>>()?;
    let mut sigma_min = f64::INFINITY;
    for h in [
        vec![0.0; tuple.len()],
        grid[0].clone(),
        grid[grid.len() - 1].clone(),
    ] {
        let s = singular_values(&e.jacobian(&h)?);
        sigma_min = sigma_min.min(s.last().copied().unwrap_or(0.0));
    }
    let mut min_ratio = f64::INFINITY;
    let mut worst = None;
    for a in 0..grid.len() {
        for b in (a + 1)..grid.len() {
            let d = dist(&images[a], &images[b]);
            let ratio = d / (spacing * sigma_min);
            if ratio < min_ratio {
                min_ratio = ratio;
                worst = Some((grid[a].clone(), grid[b].clone()));
            }
        }
    }
    let rep = InjectivityReport {
        grid_points: grid.len(),
        min_ratio,
        kappa,
        sigma_min,
        spacing,
        worst_pair: worst,
    };
    if rep.min_ratio < kappa {
        let (a, b) = rep.worst_pair.clone().unwrap();
        return Err(GeoError::NotInjective {
            distance: rep.min_ratio * spacing * sigma_min,
            a,
            b,
        });
    }
    Ok(rep)
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct NeumannVerdict {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Checks `|(I + chi)^{-1}(I + b) - I| <= 2(|chi| + |b|)` in the spectral norm.
pub fn neumann_bound_check(chi: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<NeumannVerdict> {
    let p = chi.nrows();
    if chi.ncols() != p || b.shape() != (p, p) {
        return Err(GeoError::invalid("chi and b must be square of equal size"));
    }
    let nc = op_norm(chi);
    if nc > 0.5 {
        return Err(GeoError::invalid(format!("|chi| = {nc} exceeds 1/2")));
    }
    let id = DMatrix::<f64>::identity(p, p);
    let inv = (&id + chi)
        .try_inverse()
        .ok_or_else(|| GeoError::invalid("I + chi is singular"))?;
    let lhs = op_norm(&(inv * (&id + b) - &id));
    let rhs = 2.0 * (nc + op_norm(b));
    Ok(NeumannVerdict {
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::builtin;
    use crate::fields::generate_commutators;

    fn basis(name: &str) -> CommutatorBasis {
        generate_commutators(&builtin(name).unwrap())
    }

    fn triple(b: &CommutatorBasis, idx: &[usize]) -> TupleIndex {
        TupleIndex::from_one_based(idx, &b.lengths).unwrap()
    }

    #[test]
    fn chi_vanishes_at_origin_and_for_euclid() {
        let cfg = IntegratorConfig::default();
        let h = basis("heisenberg");
        let t = triple(&h, &[1, 2, 3]);
        let c = chi_matrix(&h, &t, &[0.0; 3], 0.1, &[0.0; 3], &cfg).unwrap();
        assert!(op_norm(&c.chi) < 1e-6);
        let e = basis("euclid2in3");
        let t = triple(&e, &[1, 2]);
        let c = chi_matrix(&e, &t, &[0.0; 3], 0.1, &[0.3, -0.2], &cfg).unwrap();
        assert!(op_norm(&c.chi) < 1e-8 && c.residual < 1e-8);
    }

    #[test]
    fn heisenberg_chi_closed_form() {
        // chi is zero except chi_32 = -h_1
        let cfg = IntegratorConfig::default();
        let b = basis("heisenberg");
        let t = triple(&b, &[1, 2, 3]);
        let h = [0.2, -0.1, 0.05];
        let c = chi_matrix(&b, &t, &[0.0; 3], 0.1, &h, &cfg).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(2, 1)] = -h[0];
        assert!((c.chi - expect).norm() < 1e-6);
    }

    #[test]
    fn rescaled_constants_agree_with_family_route() {
        for (name, idx, x) in [
            ("heisenberg", vec![1, 2, 3], vec![0.1, -0.2, 0.3]),
            ("grushin", vec![1, 3], vec![0.0, 0.0]),
            ("grushin", vec![1, 2], vec![0.5, 0.1]),
            ("martinet", vec![1, 2, 3], vec![0.3, 0.2, 0.1]),
        ] {
            let b = basis(name);
            let t = triple(&b, &idx);
            let (direct, res) = rescaled_constants_at(&b, &t, 0.1, &x);
            let via = rescaled_constants_via_family(&b, &t, 0.1, &x).unwrap();
            assert!(res < 1e-12, "{name}");
            for (u, v) in direct.iter().zip(&via) {
                assert!((u - v).abs() < 1e-9, "{name}: {u} vs {v}");
            }
        }
    }

    #[test]
    fn heisenberg_a_is_half_c() {
        let cfg = IntegratorConfig::default();
        let b = basis("heisenberg");
        let t = triple(&b, &[1, 2, 3]);
        let u = [0.3, -0.4, 0.2];
        let a = a_matrix_at(&b, &t, &[0.0; 3], 1.0, &u, &cfg).unwrap();
        let mut expect = DMatrix::zeros(3, 3);
        expect[(0, 2)] = -u[1] / 2.0;
        expect[(1, 2)] = u[0] / 2.0;
        assert!((a - expect).norm() < 1e-8);
    }

    #[test]
    fn a_ode_pushes_forward_to_frame() {
        let cfg = IntegratorConfig::default();
        for (name, idx, x, r) in [
            ("heisenberg", vec![1, 2, 3], vec![0.0; 3], 0.1),
            ("martinet", vec![1, 2, 3], vec![0.3, 0.2, 0.1], 0.1),
            ("grushin", vec![1, 2], vec![0.5, 0.0], 0.1),
        ] {
            let b = basis(name);
            let t = triple(&b, &idx);
            let p = t.len();
            let omega: Vec<f64> = (0..p)
                .map(|k| {
                    if k == 0 {
                        0.6
                    } else {
                        0.8 / ((p - 1) as f64).sqrt()
                    }
                })
                .collect();
            let ray = solve_a_ode(&b, &t, &x, r, &omega, 0.5, 5, &cfg).unwrap();
            for (rho, a) in ray.rhos.iter().zip(&ray.a) {
                let u: Vec<f64> = omega.iter().map(|w| w * rho).collect();
                let d = pushforward_defect(&b, &t, &x, r, &u, a, &cfg).unwrap();
                assert!(d < 1e-4, "{name} rho={rho} defect={d}");
                let ah = pulled_back_a(&b, &t, &x, r, &u, &cfg).unwrap();
                assert!((a - ah).abs().max() < 1e-3);
            }
        }
    }

    #[test]
    fn euclid_a_and_psi_are_trivial() {
        let cfg = IntegratorConfig::default();
        let b = basis("euclid2in3");
        let t = triple(&b, &[1, 2]);
        let a = a_matrix_at(&b, &t, &[0.0; 3], 0.2, &[0.3, 0.1], &cfg).unwrap();
        assert!(a.abs().max() <= 1e-12);
        let y = map_psi(&b, &t, &[0.0; 3], 0.2, &[0.1, 0.1], &[0.2, -0.3], &cfg).unwrap();
        assert!(dist(&y, &[0.3, -0.2]) < 1e-9);
        let z = map_psi(&b, &t, &[0.0; 3], 0.2, &[0.1, 0.1], &[0.0, 0.0], &cfg).unwrap();
        assert_eq!(z, vec![0.1, 0.1]);
    }

    #[test]
    fn neumann_examples() {
        let z = DMatrix::<f64>::zeros(2, 2);
        let v = neumann_bound_check(&z, &z).unwrap();
        assert_eq!(v.lhs, 0.0);
        assert!(v.holds);
        let chi = DMatrix::<f64>::identity(2, 2) * 0.1;
        let v = neumann_bound_check(&chi, &z).unwrap();
        assert!((v.lhs - (1.0 - 1.0 / 1.1)).abs() < 1e-12);
        assert!(v.holds && (v.rhs - 0.2).abs() < 1e-12);
        assert!(neumann_bound_check(&(chi * 6.0), &z).is_err());
    }

    #[test]
    fn euclid_phi_lift_is_identity() {
        let cfg = IntegratorConfig::default();
        let b = basis("euclid2in3");
        let t = triple(&b, &[1, 2]);
        let grid = vec![vec![0.0, 0.0], vec![0.1, -0.2], vec![-0.15, 0.05]];
        let rep = lift_phi_through_e(&b, &t, &[0.0; 3], 0.1, &grid, &cfg).unwrap();
        assert!(rep.max_offset < 1e-8 && rep.max_dtheta_defect < 1e-6);
    }

    #[test]
    fn euclid_injective() {
        let cfg = IntegratorConfig::default();
        let b = basis("euclid2in3");
        let t = triple(&b, &[1, 2]);
        let rep = injectivity_check_e(&b, &t, &[0.0; 3], 0.1, 0.5, 5, &cfg).unwrap();
        assert!(rep.min_ratio >= 0.99);
    }
}
