//! Upper bounds for the control distances by piecewise-constant control search,
//! sampling of control balls, and the ball-box inclusion checks.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, GeoError, Result};
use crate::fields::CommutatorBasis;
use crate::flows::{e_schedule, flow_combination, map_e};
use crate::linalg::{dist, norm, pinv};
use crate::multilinear::TupleIndex;
use crate::ode::IntegratorConfig;
use crate::pullback::lift_path;

/// Which control distance: `cc` uses the horizontal fields at speed `r`,
/// `rho` uses every commutator `Y_j` at speed `r^{l_j}`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cc,
    Rho,
}

impl Metric {
    /// Number of generators (`m` or `q`).
    pub fn generators(self, basis: &CommutatorBasis) -> usize {
        match self {
            Metric::Cc => basis.m,
            Metric::Rho => basis.q(),
        }
    }

    pub fn generator_lengths(self, basis: &CommutatorBasis) -> Vec<usize> {
        match self {
            Metric::Cc => vec![1; basis.m],
            Metric::Rho => basis.lengths.clone(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cc => "cc",
            Metric::Rho => "rho",
        })
    }
}

impl FromStr for Metric {
    type Err = GeoError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(Metric::Cc),
            "rho" => Ok(Metric::Rho),
            other => Err(GeoError::invalid(format!(
                "unknown metric '{other}' (cc or rho)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub coeffs: Vec<f64>,
    pub duration: f64,
}

/// A piecewise-constant admissible control on `[0, 1]` at a given radius.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPath {
    pub segments: Vec<Segment>,
    pub metric: Metric,
    pub radius: f64,
}

impl ControlPath {
    pub fn new(segments: Vec<Segment>, metric: Metric, radius: f64) -> Result<Self> {
        if segments.is_empty() {
            return Err(GeoError::invalid(
                "a control path needs at least one segment",
            ));
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(GeoError::invalid("radius must be finite and nonnegative"));
        }
        let g = segments[0].coeffs.len();
        let mut total = 0.0;
        for s in &segments {
            if s.coeffs.len() != g {
                return Err(GeoError::DimensionMismatch {
                    expected: g,
                    got: s.coeffs.len(),
                });
            }
            if !(s.duration > 0.0) {
                return Err(GeoError::invalid("segment durations must be positive"));
            }
            if norm(&s.coeffs) > 1.0 + 1e-9 {
                return Err(GeoError::invalid(
                    "segment coefficients must satisfy |b| <= 1",
                ));
            }
            total += s.duration;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(GeoError::invalid(format!(
                "durations sum to {total}, not 1"
            )));
        }
        Ok(ControlPath {
            segments,
            metric,
            radius,
        })
    }

    /// The constant path `t -> x`.
    pub fn stationary(generators: usize, metric: Metric) -> Self {
        ControlPath {
            segments: vec![Segment {
                coeffs: vec![0.0; generators],
                duration: 1.0,
            }],
            metric,
            radius: 0.0,
        }
    }

    pub fn with_radius(&self, radius: f64) -> Self {
        ControlPath {
            radius,
            ..self.clone()
        }
    }

    fn check(&self, basis: &CommutatorBasis) -> Result<()> {
        let g = self.metric.generators(basis);
        for s in &self.segments {
            check_dim(g, s.coeffs.len())?;
        }
        Ok(())
    }

    /// Coefficients on the full commutator family of the velocity on a segment.
    fn velocity(&self, basis: &CommutatorBasis, seg: &Segment) -> Vec<f64> {
        let mut v = vec![0.0; basis.q()];
        for (j, b) in seg.coeffs.iter().enumerate() {
            let s = match self.metric {
                Metric::Cc => self.radius,
                Metric::Rho => self.radius.powi(basis.lengths[j] as i32),
            };
            v[j] = b * s;
        }
        v
    }

    /// Node times and points, `nodes_per_segment` nodes inside each segment.
    pub fn trajectory(
        &self,
        basis: &CommutatorBasis,
        x: &[f64],
        nodes_per_segment: usize,
        cfg: &IntegratorConfig,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(basis)?;
        let k = nodes_per_segment.max(1);
        let mut times = vec![0.0];
        let mut pts = vec![x.to_vec()];
        let mut t = 0.0;
        let mut y = x.to_vec();
        for seg in &self.segments {
            let v = self.velocity(basis, seg);
            let dt = seg.duration / k as f64;
            for _ in 0..k {
                y = flow_combination(&v, basis, &y, dt, cfg)?;
                t += dt;
                times.push(t);
                pts.push(y.clone());
            }
        }
        Ok((times, pts))
    }

    pub fn point_at(
        &self,
        basis: &CommutatorBasis,
        x: &[f64],
        t: f64,
        cfg: &IntegratorConfig,
    ) -> Result<Vec<f64>> {
        self.check(basis)?;
        let mut y = x.to_vec();
        let mut t0 = 0.0;
        for seg in &self.segments {
            if t <= t0 {
                break;
            }
            let dt = seg.duration.min(t - t0);
            y = flow_combination(&self.velocity(basis, seg), basis, &y, dt, cfg)?;
            t0 += seg.duration;
        }
        Ok(y)
    }

    pub fn endpoint(
        &self,
        basis: &CommutatorBasis,
        x: &[f64],
        cfg: &IntegratorConfig,
    ) -> Result<Vec<f64>> {
        self.point_at(basis, x, f64::INFINITY, cfg)
    }

    /// Hex SHA-256 of the serialized path.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("control paths serialize");
        let d = Sha256::digest(&bytes);
        d.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Solves `sum_i sqrt(sum_j a_ij^2 R^{-2 l_j}) = 1` for `R`, where row `i` of
/// `a` holds the unit-time coefficients of segment `i`.
pub fn path_radius(a: &[f64], lengths: &[usize]) -> f64 {
    let g = lengths.len();
    if a.iter().all(|v| *v == 0.0) {
        return 0.0;
    }
    if lengths.iter().all(|&l| l == 1) {
        return a.chunks(g).map(norm).sum();
    }
    let f = |r: f64| -> f64 {
        a.chunks(g)
            .map(|row| {
                row.iter()
                    .zip(lengths)
                    .map(|(v, &l)| (v / r.powi(l as i32)).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .sum()
    };
    let mut hi = 1.0;
    while f(hi) > 1.0 {
        hi *= 2.0;
    }
    let mut lo = hi;
    while f(lo) <= 1.0 && lo > 1e-300 {
        lo *= 0.5;
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if f(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi / lo - 1.0 < 1e-14 {
            break;
        }
    }
    hi
}

/// The admissible path of radius `path_radius(a)` with the same segment flows as `a`.
pub fn path_from_coefficients(a: &[f64], lengths: &[usize], metric: Metric) -> ControlPath {
    let g = lengths.len();
    let r = path_radius(a, lengths);
    if r == 0.0 {
        return ControlPath::stationary(g, metric);
    }
    let mut segs = Vec::new();
    for row in a.chunks(g) {
        let tau: f64 = row
            .iter()
            .zip(lengths)
            .map(|(v, &l)| (v / r.powi(l as i32)).powi(2))
            .sum::<f64>()
            .sqrt();
        if tau <= 0.0 {
            continue;
        }
        let coeffs: Vec<f64> = row
            .iter()
            .zip(lengths)
            .map(|(v, &l)| v / (tau * r.powi(l as i32)))
            .collect();
        segs.push(Segment {
            coeffs,
            duration: tau,
        });
    }
    let total: f64 = segs.iter().map(|s| s.duration).sum();
    // total is 1 up to the bisection tolerance
    for s in &mut segs {
        s.duration /= total;
        let nb = norm(&s.coeffs);
        if nb > 1.0 {
            s.coeffs.iter_mut().for_each(|c| *c /= nb);
        }
    }
    ControlPath {
        segments: segs,
        metric,
        radius: r,
    }
}

/// Fixed-step shooting with exact sensitivities with respect to the control coefficients.
struct Shooter<'a> {
    basis: &'a CommutatorBasis,
    g: usize,
    x: Vec<f64>,
    substeps: usize,
}

impl<'a> Shooter<'a> {
    fn new(basis: &'a CommutatorBasis, metric: Metric, x: &[f64]) -> Self {
        Shooter {
            basis,
            g: metric.generators(basis),
            x: x.to_vec(),
            substeps: 4,
        }
    }

    fn members(&self, y: &[f64]) -> DMatrix<f64> {
        let n = y.len();
        let mut m = DMatrix::zeros(n, self.g);
        for j in 0..self.g {
            let v = self.basis.members[j].eval(y);
            for i in 0..n {
                m[(i, j)] = v[i];
            }
        }
        m
    }

    fn endpoint(&self, a: &[f64]) -> Vec<f64> {
        let n = self.x.len();
        let mut y = DVector::from_column_slice(&self.x);
        let h = 1.0 / self.substeps as f64;
        for row in a.chunks(self.g) {
            if row.iter().all(|v| *v == 0.0) {
                continue;
            }
            let c = DVector::from_column_slice(row);
            let f = |y: &DVector<f64>| self.members(y.as_slice()) * &c;
            for _ in 0..self.substeps {
                let k1 = f(&y);
                let k2 = f(&(&y + &k1 * (0.5 * h)));
                let k3 = f(&(&y + &k2 * (0.5 * h)));
                let k4 = f(&(&y + &k3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
            }
        }
        debug_assert_eq!(y.len(), n);
        y.as_slice().to_vec()
    }

    fn stage(
        &self,
        c: &DVector<f64>,
        y: &DVector<f64>,
        gm: &DMatrix<f64>,
    ) -> (DVector<f64>, DMatrix<f64>) {
        let n = y.len();
        let ym = self.members(y.as_slice());
        let k = &ym * c;
        let mut dv = DMatrix::zeros(n, n);
        for j in 0..self.g {
            if c[j] != 0.0 {
                dv += self.basis.members[j].jacobian(y.as_slice()) * c[j];
            }
        }
        let mut dk = dv * gm;
        let mut tail = dk.columns_mut(n, self.g);
        tail += ym;
        (k, dk)
    }

    /// Endpoint and its Jacobian (`n x len(a)`).
    fn endpoint_jac(&self, a: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let n = self.x.len();
        let g = self.g;
        let nseg = a.len() / g;
        let h = 1.0 / self.substeps as f64;
        let mut y = DVector::from_column_slice(&self.x);
        let mut parts = Vec::with_capacity(nseg);
        for row in a.chunks(g) {
            let c = DVector::from_column_slice(row);
            let mut gm = DMatrix::zeros(n, n + g);
            gm.view_mut((0, 0), (n, n)).fill_with_identity();
            for _ in 0..self.substeps {
                let (k1, d1) = self.stage(&c, &y, &gm);
                let (k2, d2) = self.stage(&c, &(&y + &k1 * (0.5 * h)), &(&gm + &d1 * (0.5 * h)));
                let (k3, d3) = self.stage(&c, &(&y + &k2 * (0.5 * h)), &(&gm + &d2 * (0.5 * h)));
                let (k4, d4) = self.stage(&c, &(&y + &k3 * h), &(&gm + &d3 * h));
                y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
                gm += (d1 + d2 * 2.0 + d3 * 2.0 + d4) * (h / 6.0);
            }
            parts.push(gm);
        }
        let mut jac = DMatrix::zeros(n, a.len());
        let mut p = DMatrix::<f64>::identity(n, n);
        for (i, gm) in parts.iter().enumerate().rev() {
            let block = &p * gm.columns(n, g);
            jac.columns_mut(i * g, g).copy_from(&block);
            p = &p * gm.columns(0, n);
        }
        (y.as_slice().to_vec(), jac)
    }
}

/// Search settings for [`reach_upper`].
#[derive(Clone, Debug)]
pub struct ReachOptions {
    /// Maximum number of shooting evaluations.
    pub budget: usize,
    pub seed: u64,
    pub segments: usize,
    /// Relative endpoint tolerance of the witness, in units of the radius.
    pub tol: f64,
    pub restarts: usize,
    /// Unit-time coefficients of a known path to `y`, one row per segment.
    pub warm_start: Option<Vec<Vec<f64>>>,
    /// Stop as soon as a witness of radius at most this is certified.
    pub stop_below: Option<f64>,
}

impl Default for ReachOptions {
    fn default() -> Self {
        ReachOptions {
            budget: 4000,
            seed: 0,
            segments: 8,
            tol: 1e-3,
            restarts: 2,
            warm_start: None,
            stop_below: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Reach {
    Reached {
        radius: f64,
        path: ControlPath,
        miss: f64,
        evaluations: usize,
    },
    /// No path found within budget. Not a proof that the distance is infinite.
    Unreached { best_miss: f64, evaluations: usize },
}

impl Reach {
    pub fn radius(&self) -> Option<f64> {
        match self {
            Reach::Reached { radius, .. } => Some(*radius),
            Reach::Unreached { .. } => None,
        }
    }
}

struct Search<'a> {
    sh: Shooter<'a>,
    target: Vec<f64>,
    lengths: Vec<usize>,
    evals: usize,
    budget: usize,
    best: Option<(f64, Vec<f64>)>,
    best_miss: f64,
}

impl Search<'_> {
    fn exhausted(&self) -> bool {
        self.evals >= self.budget
    }

    fn miss(&mut self, a: &[f64]) -> f64 {
        self.evals += 1;
        let y = self.sh.endpoint(a);
        let m = dist(&y, &self.target);
        if m.is_finite() {
            m
        } else {
            f64::INFINITY
        }
    }

    fn offer(&mut self, a: &[f64], miss: f64, tol: f64) {
        self.best_miss = self.best_miss.min(miss);
        let r = path_radius(a, &self.lengths);
        if miss <= tol * r.max(1e-300) && self.best.as_ref().is_none_or(|(b, _)| r < *b) {
            self.best = Some((r, a.to_vec()));
        }
    }

    /// Scaled Jacobian `J diag(r^{l})` and residual at `a`.
    fn linearize(&mut self, a: &[f64], scale: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        self.evals += 1;
        let g = self.sh.g;
        let (y, mut jac) = self.sh.endpoint_jac(a);
        for k in 0..jac.ncols() {
            jac.column_mut(k).scale_mut(scale[k % g]);
        }
        let res = self.target.iter().zip(&y).map(|(t, v)| t - v).collect();
        (res, jac)
    }

    /// Newton corrections `z <- z + J^+ res` until the miss is below `abs_tol`.
    fn restore(
        &mut self,
        a: &[f64],
        scale: &[f64],
        abs_tol: f64,
        steps: usize,
    ) -> Option<(Vec<f64>, f64)> {
        let g = self.sh.g;
        let mut a = a.to_vec();
        for _ in 0..=steps {
            let (res, jz) = self.linearize(&a, scale);
            let miss = norm(&res);
            if !miss.is_finite() {
                return None;
            }
            if miss <= abs_tol {
                return Some((a, miss));
            }
            let dz = pinv(&jz, 1e-10) * DVector::from_column_slice(&res);
            for (k, v) in a.iter_mut().enumerate() {
                *v += dz[k] * scale[k % g];
            }
        }
        None
    }

    /// Gauss-Newton toward the minimum weighted-norm solution at weight radius `r`.
    ///
    /// Infeasible iterates take the min-norm linearized step with backtracking on
    /// the miss; feasible ones take it followed by Newton restoration, kept only
    /// when the path radius decreases.
    fn gauss_newton(&mut self, a0: &[f64], r: f64, tol: f64) -> Option<Vec<f64>> {
        let g = self.sh.g;
        let scale: Vec<f64> = self.lengths.iter().map(|&l| r.powi(l as i32)).collect();
        let mut a = a0.to_vec();
        let abs_tol = tol * r;
        let mut feasible: Option<f64> = None;
        for _ in 0..40 {
            if self.exhausted() {
                break;
            }
            let (res, jz) = self.linearize(&a, &scale);
            let miss = norm(&res);
            if !miss.is_finite() {
                break;
            }
            self.offer(&a, miss, tol);
            let z = DVector::from_iterator(
                a.len(),
                a.iter().enumerate().map(|(k, v)| v / scale[k % g]),
            );
            let zn = pinv(&jz, 1e-10) * (DVector::from_column_slice(&res) + &jz * &z);
            let dz = &zn - &z;
            let to_a = |alpha: f64| -> Vec<f64> {
                (0..z.len())
                    .map(|k| (z[k] + alpha * dz[k]) * scale[k % g])
                    .collect()
            };
            if miss <= abs_tol {
                let cur = path_radius(&a, &self.lengths);
                feasible = Some(cur);
                if dz.norm() <= 1e-6 * zn.norm().max(1e-300) {
                    break;
                }
                let mut moved = false;
                let mut alpha = 1.0;
                for _ in 0..4 {
                    if let Some((cand, m)) = self.restore(&to_a(alpha), &scale, abs_tol, 3) {
                        let pr = path_radius(&cand, &self.lengths);
                        if pr < cur * (1.0 - 1e-6) {
                            self.offer(&cand, m, tol);
                            a = cand;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            } else {
                let mut moved = false;
                let mut alpha = 1.0;
                for _ in 0..6 {
                    let cand = to_a(alpha);
                    if self.miss(&cand) < miss {
                        a = cand;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    break;
                }
            }
        }
        if feasible.is_some() {
            return Some(a);
        }
        let m = self.miss(&a);
        self.offer(&a, m, tol);
        (m <= abs_tol).then_some(a)
    }

    /// Alternates Gauss-Newton at weight `r` with `r <- path_radius`.
    fn descend(&mut self, a0: Vec<f64>, r0: f64, tol: f64, stop_below: Option<f64>) {
        let mut a = a0;
        let mut r = r0.max(1e-12);
        for _ in 0..8 {
            if self.exhausted() {
                return;
            }
            let Some(sol) = self.gauss_newton(&a, r, tol) else {
                return;
            };
            let r2 = path_radius(&sol, &self.lengths);
            a = sol;
            if let (Some(s), Some((b, _))) = (stop_below, &self.best) {
                if *b <= s {
                    return;
                }
            }
            if (r2 - r).abs() <= 1e-3 * r || r2 == 0.0 {
                return;
            }
            r = r2;
        }
    }

    /// Cross-entropy search over coefficients at weight radius `r`, minimizing the miss.
    fn cross_entropy(&mut self, nvar: usize, r: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let g = self.sh.g;
        let scale: Vec<f64> = self.lengths.iter().map(|&l| r.powi(l as i32)).collect();
        let nseg = nvar / g;
        let mut mean = vec![0.0; nvar];
        let mut sd = vec![1.0 / nseg as f64; nvar];
        let (pop, elite, iters) = (64, 8, 40);
        let mut best = (f64::INFINITY, mean.clone());
        for _ in 0..iters {
            if self.exhausted() {
                break;
            }
            let mut scored: Vec<(f64, Vec<f64>)> = (0..pop)
                .map(|_| {
                    let z: Vec<f64> = (0..nvar)
                        .map(|k| {
                            let e: f64 = StandardNormal.sample(rng);
                            mean[k] + sd[k] * e
                        })
                        .collect();
                    let a: Vec<f64> = z
                        .iter()
                        .enumerate()
                        .map(|(k, v)| v * scale[k % g])
                        .collect();
                    let pr = path_radius(&a, &self.lengths);
                    let m = self.miss(&a);
                    (m / r + (pr / r - 1.0).max(0.0), z)
                })
                .collect();
            scored.sort_by(|a, b| a.0.total_cmp(&b.0));
            if scored[0].0 < best.0 {
                best = scored[0].clone();
            }
            for k in 0..nvar {
                let vals: Vec<f64> = scored[..elite].iter().map(|s| s.1[k]).collect();
                let mu = vals.iter().sum::<f64>() / elite as f64;
                let var = vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / elite as f64;
                mean[k] = 0.7 * mu + 0.3 * mean[k];
                sd[k] = 0.7 * var.sqrt() + 0.3 * sd[k];
            }
        }
        best.1
            .iter()
            .enumerate()
            .map(|(k, v)| v * scale[k % g])
            .collect()
    }
}

fn random_unit_rows(rng: &mut ChaCha8Rng, nseg: usize, g: usize) -> Vec<f64> {
    let mut z: Vec<f64> = (0..nseg * g).map(|_| StandardNormal.sample(rng)).collect();
    let total: f64 = z.chunks(g).map(norm).sum();
    z.iter_mut().for_each(|v| *v /= total.max(1e-300));
    z
}

/// Certified upper bound on the control distance from `x` to `y`.
///
/// Minimizes the path radius over piecewise-constant controls with Gauss-Newton
/// on the endpoint map, alternated with updates of the weight radius, from a
/// warm start, the zero control and random restarts; cross-entropy search is
/// the fallback when none of these reaches `y`.
pub fn reach_upper(
    basis: &CommutatorBasis,
    x: &[f64],
    y: &[f64],
    metric: Metric,
    opts: &ReachOptions,
    cfg: &IntegratorConfig,
) -> Result<Reach> {
    check_dim(basis.dim(), x.len())?;
    check_dim(basis.dim(), y.len())?;
    let g = metric.generators(basis);
    if x == y {
        return Ok(Reach::Reached {
            radius: 0.0,
            path: ControlPath::stationary(g, metric),
            miss: 0.0,
            evaluations: 0,
        });
    }
    let lengths = metric.generator_lengths(basis);
    let s = basis.step.max(1) as f64;
    let mut search = Search {
        sh: Shooter::new(basis, metric, x),
        target: y.to_vec(),
        lengths: lengths.clone(),
        evals: 0,
        budget: opts.budget,
        best: None,
        best_miss: f64::INFINITY,
    };
    let fit_tol = opts.tol * 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let d = dist(x, y);
    let r_init = d.powf(1.0 / s).max(d);
    let mut nseg = opts.segments.max(1);
    if let Some(w) = &opts.warm_start {
        nseg = nseg.max(w.len());
        let mut a = vec![0.0; nseg * g];
        for (i, row) in w.iter().enumerate() {
            check_dim(g, row.len())?;
            a[i * g..(i + 1) * g].copy_from_slice(row);
        }
        let r0 = path_radius(&a, &lengths);
        search.descend(a, r0, fit_tol, opts.stop_below);
    }
    let done = |search: &Search| match (opts.stop_below, &search.best) {
        (Some(sb), Some((b, _))) => *b <= sb,
        _ => false,
    };
    if !done(&search) {
        search.descend(vec![0.0; nseg * g], r_init, fit_tol, opts.stop_below);
    }
    for _ in 0..opts.restarts {
        if done(&search) || search.exhausted() {
            break;
        }
        let r0 = search.best.as_ref().map(|b| b.0).unwrap_or(r_init);
        let z = random_unit_rows(&mut rng, nseg, g);
        let a: Vec<f64> = z
            .iter()
            .enumerate()
            .map(|(k, v)| v * r0.powi(lengths[k % g] as i32))
            .collect();
        search.descend(a, r0, fit_tol, opts.stop_below);
    }
    if search.best.is_none() && !search.exhausted() {
        let a = search.cross_entropy(nseg * g, 2.0 * r_init, &mut rng);
        let r0 = path_radius(&a, &lengths).max(r_init);
        search.descend(a, r0, fit_tol, opts.stop_below);
    }
    let evaluations = search.evals;
    let Some((_, a)) = search.best else {
        return Ok(Reach::Unreached {
            best_miss: search.best_miss,
            evaluations,
        });
    };
    let path = path_from_coefficients(&a, &lengths, metric);
    match path.endpoint(basis, x, cfg) {
        Ok(end) => {
            let miss = dist(&end, y);
            if miss <= opts.tol * path.radius {
                Ok(Reach::Reached {
                    radius: path.radius,
                    path,
                    miss,
                    evaluations,
                })
            } else {
                Ok(Reach::Unreached {
                    best_miss: miss,
                    evaluations,
                })
            }
        }
        Err(GeoError::EscapedDomain { .. }) => Ok(Reach::Unreached {
            best_miss: search.best_miss,
            evaluations,
        }),
        Err(e) => Err(e),
    }
}

/// Unit-time segment coefficients replaying the flow schedule of `E(h)`.
pub fn construction_controls(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    r: f64,
    h: &[f64],
    metric: Metric,
) -> Vec<Vec<f64>> {
    let g = metric.generators(basis);
    e_schedule(basis, tuple, r, h)
        .into_iter()
        .map(|(a, t)| {
            let mut row = vec![0.0; g];
            row[a] = t;
            row
        })
        .collect()
}

/// Length of the construction path of `E(h)`: `r sum_k N(l_k) |h_k|^{1/l_k}`.
pub fn construction_length(basis: &CommutatorBasis, tuple: &TupleIndex, r: f64, h: &[f64]) -> f64 {
    e_schedule(basis, tuple, r, h)
        .iter()
        .map(|(_, t)| t.abs())
        .sum()
}

#[derive(Clone, Debug, Serialize)]
pub struct CloudPoint {
    pub point: Vec<f64>,
    pub path: ControlPath,
}

#[derive(Clone, Debug, Serialize)]
pub struct BallCloud {
    pub center: Vec<f64>,
    pub radius: f64,
    pub metric: Metric,
    pub points: Vec<CloudPoint>,
    pub discarded: usize,
}

impl BallCloud {
    pub fn coordinates(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(|p| p.point.clone()).collect()
    }

    /// CSV with one row per point: coordinates, then the path hash.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let n = self.center.len();
        let mut header: Vec<String> = (1..=n).map(|i| format!("x{i}")).collect();
        header.push("path_hash".into());
        w.write_record(&header)
            .map_err(|e| GeoError::Parse(e.to_string()))?;
        for p in &self.points {
            let mut row: Vec<String> = p.point.iter().map(|v| format!("{v:.17e}")).collect();
            row.push(p.path.hash());
            w.write_record(&row)
                .map_err(|e| GeoError::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| GeoError::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GeoError::Parse(e.to_string()))
    }

    /// Largest distance between a recorded point and the re-simulated endpoint of its path.
    pub fn resimulation_error(
        &self,
        basis: &CommutatorBasis,
        cfg: &IntegratorConfig,
    ) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for p in &self.points {
            let y = p.path.endpoint(basis, &self.center, cfg)?;
            worst = worst.max(dist(&y, &p.point));
        }
        Ok(worst)
    }
}

/// Segments per sampled control.
pub const SAMPLE_SEGMENTS: usize = 8;

/// Random unit-speed control shape: directions persist with a random weight,
/// durations are normalized exponentials.
pub fn random_segments(g: usize, rng: &mut ChaCha8Rng) -> Vec<Segment> {
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..g).map(|_| StandardNormal.sample(rng)).collect();
            let nv = norm(&v);
            if nv > 1e-12 {
                return v.iter().map(|x| x / nv).collect();
            }
        }
    };
    let persistence: f64 = rng.random();
    let mut b = unit(rng);
    let mut durations: Vec<f64> = (0..SAMPLE_SEGMENTS).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = durations.iter().sum();
    durations.iter_mut().for_each(|d| *d /= total);
    let mut segs = Vec::with_capacity(SAMPLE_SEGMENTS);
    for (i, d) in durations.into_iter().enumerate() {
        if i > 0 {
            let fresh = unit(rng);
            let mix: Vec<f64> = b
                .iter()
                .zip(&fresh)
                .map(|(u, v)| persistence * u + (1.0 - persistence) * v)
                .collect();
            let nm = norm(&mix);
            b = if nm > 1e-12 {
                mix.iter().map(|v| v / nm).collect()
            } else {
                fresh
            };
        }
        segs.push(Segment {
            coeffs: b.clone(),
            duration: d,
        });
    }
    segs
}

/// Per-index RNG stream of a seeded run.
pub fn stream_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Control shapes (radius 1) for `n` sample points; deterministic in `seed`.
pub fn sample_controls(g: usize, metric: Metric, n: usize, seed: u64) -> Vec<ControlPath> {
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            ControlPath {
                segments: random_segments(g, &mut rng),
                metric,
                radius: 1.0,
            }
        })
        .collect()
}

const SAMPLE_RETRIES: u64 = 10;

/// Endpoints of `n` random admissible paths of radius `r` from `x`.
pub fn sample_ball(
    basis: &CommutatorBasis,
    x: &[f64],
    r: f64,
    metric: Metric,
    n: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<BallCloud> {
    check_dim(basis.dim(), x.len())?;
    if !(r >= 0.0 && r.is_finite()) {
        return Err(GeoError::invalid("radius must be finite and nonnegative"));
    }
    let g = metric.generators(basis);
    let mut points = Vec::with_capacity(n);
    let mut discarded = 0;
    for i in 0..n as u64 {
        for attempt in 0..SAMPLE_RETRIES {
            let mut rng = stream_rng(seed, i * SAMPLE_RETRIES + attempt);
            let path = ControlPath {
                segments: random_segments(g, &mut rng),
                metric,
                radius: r,
            };
            match path.endpoint(basis, x, cfg) {
                Ok(point) => {
                    points.push(CloudPoint { point, path });
                    break;
                }
                Err(GeoError::EscapedDomain { .. }) => discarded += 1,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(BallCloud {
        center: x.to_vec(),
        radius: r,
        metric,
        points,
        discarded,
    })
}

#[derive(Clone, Debug)]
pub struct BallBoxOptions {
    pub samples: usize,
    pub seed: u64,
    /// Grid points per axis for the outer test.
    pub grid_per_axis: usize,
    pub bisection_steps: usize,
    pub reach_budget: usize,
}

impl Default for BallBoxOptions {
    fn default() -> Self {
        BallBoxOptions {
            samples: 200,
            seed: 0,
            grid_per_axis: 5,
            bisection_steps: 8,
            reach_budget: 1500,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BallBoxReport {
    pub tuple: String,
    pub center: Vec<f64>,
    pub radius: f64,
    pub epsilon: f64,
    pub samples: usize,
    /// Largest `c` for which every sampled `rho`-ball point at radius
    /// `c eps^s r` lifts into `Q_I(eps)`.
    pub inner_constant: f64,
    pub inner_max_box_norm: f64,
    pub inner_max_residual: f64,
    /// Sample indices that fail to lift at the first rejected `c`.
    pub unliftable: Vec<usize>,
    pub unliftable_at: f64,
    /// Smallest `C` with `rho(x, E(h)) <= C eps^{1/s} r` on the grid.
    pub outer_constant: f64,
    pub outer_grid_points: usize,
    pub outer_unreached: usize,
    pub outer_worst_h: Vec<f64>,
}

struct InnerPass {
    ok: bool,
    max_box: f64,
    max_err: f64,
    failures: Vec<usize>,
}

fn inner_pass(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    eps: f64,
    shapes: &[ControlPath],
    radius: f64,
    all: bool,
    cfg: &IntegratorConfig,
) -> InnerPass {
    let mut pass = InnerPass {
        ok: true,
        max_box: 0.0,
        max_err: 0.0,
        failures: Vec::new(),
    };
    for (k, shape) in shapes.iter().enumerate() {
        let path = shape.with_radius(radius);
        let good = match lift_path(basis, tuple, x, r, &path, cfg) {
            Ok(l) => {
                pass.max_box = pass.max_box.max(l.max_box_norm);
                pass.max_err = pass.max_err.max(l.max_error);
                l.max_box_norm < eps
            }
            Err(_) => false,
        };
        if !good {
            pass.ok = false;
            pass.failures.push(k);
            if !all {
                break;
            }
        }
    }
    pass
}

/// Empirical inner and outer ball-box constants for `E_{I,x,r}` at box radius `eps`.
pub fn ball_box_check(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    eps: f64,
    opts: &BallBoxOptions,
    cfg: &IntegratorConfig,
) -> Result<BallBoxReport> {
    check_dim(basis.dim(), x.len())?;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(GeoError::invalid("eps must lie in (0, 1]"));
    }
    if !(r > 0.0) {
        return Err(GeoError::invalid("r must be positive"));
    }
    let s = basis.step.max(1) as i32;
    let unit = eps.powi(s) * r;
    let shapes = sample_controls(basis.q(), Metric::Rho, opts.samples, opts.seed);

    // inner constant by doubling/halving then geometric bisection
    let test = |c: f64| inner_pass(basis, tuple, x, r, eps, &shapes, c * unit, false, cfg);
    let mut lo: Option<(f64, InnerPass)> = None;
    let mut hi: Option<f64> = None;
    let mut c = 1.0;
    for _ in 0..24 {
        let p = test(c);
        if p.ok {
            lo = Some((c, p));
            if hi.is_some() {
                break;
            }
            c *= 2.0;
        } else {
            hi = Some(c);
            if lo.is_some() {
                break;
            }
            c *= 0.5;
        }
    }
    if let (Some((l, _)), Some(h)) = (&lo, hi) {
        let (mut l, mut h) = (*l, h);
        for _ in 0..opts.bisection_steps {
            let mid = (l * h).sqrt();
            let p = test(mid);
            if p.ok {
                l = mid;
                lo = Some((mid, p));
            } else {
                h = mid;
            }
        }
        hi = Some(h);
    }
    let (inner_c, inner_box, inner_err) = match &lo {
        Some((c, p)) => (*c, p.max_box, p.max_err),
        None => (0.0, f64::NAN, f64::NAN),
    };
    let (unliftable, unliftable_at) = match hi {
        Some(h) => (
            inner_pass(basis, tuple, x, r, eps, &shapes, h * unit, true, cfg).failures,
            h,
        ),
        None => (Vec::new(), f64::NAN),
    };

    // outer constant on a grid of Q_I(eps)
    let lengths = tuple.member_lengths(&basis.lengths);
    let sides: Vec<(f64, f64)> = lengths
        .iter()
        .map(|&l| {
            let a = eps.powi(l as i32) * (1.0 - 1e-9);
            (-a, a)
        })
        .collect();
    let grid = crate::fields::box_grid(&sides, opts.grid_per_axis.max(2));
    let denom = eps.powf(1.0 / s as f64) * r;
    let mut outer: f64 = 0.0;
    let mut worst = vec![0.0; tuple.len()];
    let mut unreached = 0;
    let mut used = 0;
    for (k, h) in grid.iter().enumerate() {
        if h.iter().all(|v| *v == 0.0) {
            continue;
        }
        let y = match map_e(basis, tuple, x, r, h, cfg) {
            Ok(y) => y,
            Err(GeoError::EscapedDomain { .. }) => continue,
            Err(e) => return Err(e),
        };
        used += 1;
        let ro = ReachOptions {
            budget: opts.reach_budget,
            seed: opts.seed.wrapping_mul(1_000_003).wrapping_add(k as u64),
            restarts: 1,
            warm_start: Some(construction_controls(basis, tuple, r, h, Metric::Rho)),
            ..ReachOptions::default()
        };
        match reach_upper(basis, x, &y, Metric::Rho, &ro, cfg)? {
            Reach::Reached { radius, .. } => {
                let ratio = radius / denom;
                if ratio > outer {
                    outer = ratio;
                    worst = h.clone();
                }
            }
            Reach::Unreached { .. } => unreached += 1,
        }
    }
    Ok(BallBoxReport {
        tuple: tuple.to_string(),
        center: x.to_vec(),
        radius: r,
        epsilon: eps,
        samples: shapes.len(),
        inner_constant: inner_c,
        inner_max_box_norm: inner_box,
        inner_max_residual: inner_err,
        unliftable,
        unliftable_at,
        outer_constant: outer,
        outer_grid_points: used,
        outer_unreached: unreached,
        outer_worst_h: worst,
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

    #[test]
    fn path_radius_examples() {
        assert_eq!(path_radius(&[0.0, 0.0], &[1, 1]), 0.0);
        assert!((path_radius(&[3.0, 4.0, 1.0, 0.0], &[1, 1]) - 6.0).abs() < 1e-12);
        // one segment on a length-two generator: |a| = R^2
        let r = path_radius(&[0.0, 0.0, 0.04], &[1, 1, 2]);
        assert!((r - 0.2).abs() < 1e-12);
    }

    #[test]
    fn coefficients_round_trip_through_paths() {
        let b = basis("heisenberg");
        let cfg = IntegratorConfig::default();
        let lengths = Metric::Rho.generator_lengths(&b);
        let a = [0.05, -0.02, 0.001, 0.0, 0.0, 0.03, 0.0, 0.002];
        let path = path_from_coefficients(&a, &lengths, Metric::Rho);
        assert!((path.radius - path_radius(&a, &lengths)).abs() < 1e-12);
        let again = ControlPath::new(path.segments.clone(), Metric::Rho, path.radius).unwrap();
        let sh = Shooter::new(&b, Metric::Rho, &[0.0; 3]);
        let y = again.endpoint(&b, &[0.0; 3], &cfg).unwrap();
        assert!(dist(&y, &sh.endpoint(&a)) < 1e-9);
    }

    #[test]
    fn shooting_jacobian_matches_differences() {
        let b = basis("martinet");
        let sh = Shooter::new(&b, Metric::Rho, &[0.3, 0.2, 0.1]);
        let a: Vec<f64> = (0..16).map(|k| 0.05 * ((k as f64) * 0.7).sin()).collect();
        let (_, j) = sh.endpoint_jac(&a);
        let d = 1e-6;
        for k in [0, 5, 11, 15] {
            let mut ap = a.clone();
            ap[k] += d;
            let mut am = a.clone();
            am[k] -= d;
            let yp = sh.endpoint(&ap);
            let ym = sh.endpoint(&am);
            for i in 0..3 {
                let fd = (yp[i] - ym[i]) / (2.0 * d);
                assert!((fd - j[(i, k)]).abs() < 1e-6, "k={k} i={i}");
            }
        }
    }

    #[test]
    fn planar_distance() {
        let b = basis("euclid2in3");
        let cfg = IntegratorConfig::default();
        let r = reach_upper(
            &b,
            &[0.0; 3],
            &[3.0, 4.0, 0.0],
            Metric::Cc,
            &ReachOptions::default(),
            &cfg,
        )
        .unwrap();
        let d = r.radius().unwrap();
        assert!((d - 5.0).abs() < 0.1, "{d}");
        let z = reach_upper(
            &b,
            &[0.0; 3],
            &[0.0; 3],
            Metric::Cc,
            &ReachOptions::default(),
            &cfg,
        )
        .unwrap();
        assert_eq!(z.radius(), Some(0.0));
    }

    #[test]
    fn other_orbit_is_unreached() {
        let b = basis("euclid2in3");
        let cfg = IntegratorConfig::default();
        let r = reach_upper(
            &b,
            &[0.0; 3],
            &[0.0, 0.0, 1.0],
            Metric::Cc,
            &ReachOptions::default(),
            &cfg,
        )
        .unwrap();
        assert!(matches!(r, Reach::Unreached { .. }));
    }

    #[test]
    fn heisenberg_vertical_reach() {
        // the cc distance to (0, 0, t) is sqrt(4 pi |t|)
        let b = basis("heisenberg");
        let cfg = IntegratorConfig::default();
        let t = 0.01;
        let exact = (4.0 * std::f64::consts::PI * t).sqrt();
        let r = reach_upper(
            &b,
            &[0.0; 3],
            &[0.0, 0.0, t],
            Metric::Cc,
            &ReachOptions::default(),
            &cfg,
        )
        .unwrap();
        let d = r.radius().unwrap();
        assert!(
            d >= exact * (1.0 - 1e-3) && d < 1.5 * exact,
            "{d} vs {exact}"
        );
        let rr = reach_upper(
            &b,
            &[0.0; 3],
            &[0.0, 0.0, t],
            Metric::Rho,
            &ReachOptions::default(),
            &cfg,
        )
        .unwrap();
        assert!(rr.radius().unwrap() <= d * 1.05);
    }

    #[test]
    fn planar_cloud() {
        let b = basis("euclid2in3");
        let cfg = IntegratorConfig::default();
        let c = sample_ball(&b, &[0.0, 0.0, 0.5], 0.2, Metric::Cc, 50, 3, &cfg).unwrap();
        assert_eq!(c.points.len(), 50);
        for p in &c.points {
            assert!((p.point[2] - 0.5).abs() < 1e-12);
            assert!(dist(&p.point, &[0.0, 0.0, 0.5]) <= 0.2 + 1e-9);
        }
        assert!(c.resimulation_error(&b, &cfg).unwrap() < 1e-6);
        let again = sample_ball(&b, &[0.0, 0.0, 0.5], 0.2, Metric::Cc, 50, 3, &cfg).unwrap();
        assert_eq!(c.to_csv().unwrap(), again.to_csv().unwrap());
    }

    #[test]
    fn heisenberg_cloud_is_thin() {
        let b = basis("heisenberg");
        let cfg = IntegratorConfig::default();
        let r = 0.1;
        let c = sample_ball(&b, &[0.0; 3], r, Metric::Cc, 100, 1, &cfg).unwrap();
        for p in &c.points {
            assert!(p.point[2].abs() <= 0.5 * r * r);
        }
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("cc".parse::<Metric>().unwrap(), Metric::Cc);
        assert_eq!("rho".parse::<Metric>().unwrap(), Metric::Rho);
        assert!("l2".parse::<Metric>().is_err());
    }

    #[test]
    fn invalid_paths_are_rejected() {
        let seg = |c: Vec<f64>, d: f64| Segment {
            coeffs: c,
            duration: d,
        };
        assert!(ControlPath::new(vec![seg(vec![2.0, 0.0], 1.0)], Metric::Cc, 1.0).is_err());
        assert!(ControlPath::new(vec![seg(vec![1.0, 0.0], 0.5)], Metric::Cc, 1.0).is_err());
        assert!(ControlPath::new(vec![], Metric::Cc, 1.0).is_err());
        assert!(ControlPath::new(vec![seg(vec![0.6, 0.8], 1.0)], Metric::Cc, 1.0).is_ok());
    }
}
