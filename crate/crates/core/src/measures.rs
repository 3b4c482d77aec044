//! Surface measure of control balls by the area formula over `E`, doubling
//! ratios and empirical Poincaré constants.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{check_dim, GeoError, Result};
use crate::fields::{box_grid, CommutatorBasis, DEFAULT_RANK_TOL};
use crate::flows::{Chart, EMap};
use crate::linalg::{dist, op_norm};
use crate::metrics::{
    construction_controls, construction_length, reach_upper, stream_rng, Metric, Reach,
    ReachOptions,
};
use crate::multilinear::{select_maximal_tuple, wedge_norm, TupleIndex};
use crate::ode::IntegratorConfig;
use crate::poly::Poly;

/// How membership of a sample in the ball was decided.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Oracle {
    /// The construction path of `E(h)` is short enough.
    Construction,
    /// Euclidean distance exceeds the largest admissible speed.
    SpeedBound,
    /// Control search found a short enough path.
    SearchInside,
    /// Control search found no short enough path.
    SearchOutside,
    /// `E(h)` could not be evaluated.
    Failed,
    /// `h` fell outside the box and was not evaluated.
    OutsideBox,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OracleMix {
    pub construction: usize,
    pub speed_bound: usize,
    pub search_inside: usize,
    pub search_outside: usize,
    pub failed: usize,
    pub outside_box: usize,
}

impl OracleMix {
    fn add(&mut self, o: Oracle) {
        match o {
            Oracle::Construction => self.construction += 1,
            Oracle::SpeedBound => self.speed_bound += 1,
            Oracle::SearchInside => self.search_inside += 1,
            Oracle::SearchOutside => self.search_outside += 1,
            Oracle::Failed => self.failed += 1,
            Oracle::OutsideBox => self.outside_box += 1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleRecord {
    pub h: Vec<f64>,
    pub point: Vec<f64>,
    pub member: bool,
    /// `|d_1 E ^ ... ^ d_p E|(h)` for members, zero otherwise.
    pub jacobian: f64,
    /// Importance weight `1 / q(h)`.
    pub weight: f64,
    pub oracle: Oracle,
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub center: Vec<f64>,
    pub radius: f64,
    pub metric: Metric,
    pub tuple: String,
    pub p: usize,
    pub sigma_p: f64,
    pub method: String,
    pub sample_size: usize,
    pub std_error: f64,
    /// Half-widths of the sampled box in `h` coordinates.
    pub box_half_widths: Vec<f64>,
    /// Members within 10% of the box boundary in some coordinate.
    pub near_boundary: usize,
    pub oracle_mix: OracleMix,
    pub unreliable: bool,
    #[serde(skip)]
    pub records: Vec<SampleRecord>,
    pub proposal: Proposal,
}

impl MeasureReport {
    /// CSV with one row per sample.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let p = self.p;
        let n = self.center.len();
        let mut head: Vec<String> = (1..=p).map(|k| format!("h{k}")).collect();
        head.extend((1..=n).map(|i| format!("x{i}")));
        head.extend(["member", "jacobian", "weight", "oracle"].map(String::from));
        w.write_record(&head)
            .map_err(|e| GeoError::Parse(e.to_string()))?;
        for r in &self.records {
            let mut row: Vec<String> = r.h.iter().map(|v| format!("{v:.12e}")).collect();
            if r.point.len() == n {
                row.extend(r.point.iter().map(|v| format!("{v:.12e}")));
            } else {
                row.extend((0..n).map(|_| String::new()));
            }
            row.push(r.member.to_string());
            row.push(format!("{:.12e}", r.jacobian));
            row.push(format!("{:.12e}", r.weight));
            row.push(
                serde_json::to_string(&r.oracle)
                    .unwrap_or_default()
                    .trim_matches('"')
                    .into(),
            );
            w.write_record(&row)
                .map_err(|e| GeoError::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| GeoError::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| GeoError::Parse(e.to_string()))
    }
}

#[derive(Clone, Debug)]
pub struct MeasureOptions {
    pub samples: usize,
    pub seed: u64,
    /// Initial box half-width `b`; grown when members approach the boundary.
    pub box_radius: f64,
    pub adapt_box: bool,
    pub search_budget: usize,
}

impl Default for MeasureOptions {
    fn default() -> Self {
        MeasureOptions {
            samples: 2000,
            seed: 0,
            box_radius: 1.0,
            adapt_box: true,
            search_budget: 400,
        }
    }
}

/// Largest admissible Euclidean speed near `x` for paths of radius `r`.
fn speed_bound(basis: &CommutatorBasis, x: &[f64], r: f64, metric: Metric) -> f64 {
    let g = metric.generators(basis);
    let lengths = metric.generator_lengths(basis);
    let speed_at = |y: &[f64]| -> f64 {
        let n = y.len();
        let mut m = nalgebra::DMatrix::zeros(n, g);
        for j in 0..g {
            let v = basis.members[j].eval(y);
            let s = r.powi(lengths[j] as i32 - 1);
            for i in 0..n {
                m[(i, j)] = v[i] * s;
            }
        }
        op_norm(&m)
    };
    let s0 = speed_at(x).max(1e-12);
    let w = 3.0 * r * s0;
    let sides: Vec<(f64, f64)> = x
        .iter()
        .zip(&basis.domain_box)
        .map(|(c, (lo, hi))| ((c - w).max(*lo), (c + w).min(*hi)))
        .collect();
    let grid = box_grid(&sides, 5);
    grid.iter().map(|y| speed_at(y)).fold(s0, f64::max) * 1.05
}

#[allow(clippy::too_many_arguments)]
fn classify(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    h: &[f64],
    y: &[f64],
    metric: Metric,
    speed: f64,
    budget: usize,
    seed: u64,
    cfg: &IntegratorConfig,
) -> Result<Oracle> {
    if construction_length(basis, tuple, r, h) <= r {
        return Ok(Oracle::Construction);
    }
    if dist(x, y) > r * speed {
        return Ok(Oracle::SpeedBound);
    }
    // the construction path lives in the tuple's own scale `r`
    let opts = ReachOptions {
        budget,
        seed,
        restarts: 0,
        warm_start: Some(construction_controls(basis, tuple, r, h, metric)),
        stop_below: Some(r),
        ..ReachOptions::default()
    };
    Ok(match reach_upper(basis, x, y, metric, &opts, cfg)? {
        Reach::Reached { radius, .. } if radius <= r => Oracle::SearchInside,
        _ => Oracle::SearchOutside,
    })
}

/// Sampling law for `h`: a defensive mixture of the uniform law on a box and a
/// product Gaussian kernel density around pilot members.
#[derive(Clone, Debug, Serialize)]
pub struct Proposal {
    /// Half-widths of the box; samples outside it contribute zero.
    pub half: Vec<f64>,
    #[serde(skip)]
    pub centers: Vec<Vec<f64>>,
    pub bandwidth: Vec<f64>,
    /// Mixture weight of the uniform component.
    pub uniform_weight: f64,
}

/// Mixture weight of the uniform component when kernels are present.
const UNIFORM_WEIGHT: f64 = 0.2;

/// Fewest pilot members worth fitting kernels to.
const MIN_KERNEL_CENTERS: usize = 10;

impl Proposal {
    pub fn uniform(half: Vec<f64>) -> Self {
        let p = half.len();
        Proposal {
            half,
            centers: Vec::new(),
            bandwidth: vec![0.0; p],
            uniform_weight: 1.0,
        }
    }

    /// Kernels at `centers` with per-coordinate normal-reference bandwidths.
    pub fn with_kernels(half: Vec<f64>, centers: Vec<Vec<f64>>) -> Self {
        if centers.len() < MIN_KERNEL_CENTERS {
            return Proposal::uniform(half);
        }
        let p = half.len();
        let m = centers.len() as f64;
        let factor = 1.06 * m.powf(-1.0 / (p as f64 + 4.0));
        let bandwidth = (0..p)
            .map(|k| {
                let mean = centers.iter().map(|c| c[k]).sum::<f64>() / m;
                let var = centers.iter().map(|c| (c[k] - mean).powi(2)).sum::<f64>() / m;
                (factor * var.sqrt()).max(0.02 * half[k])
            })
            .collect();
        Proposal {
            half,
            centers,
            bandwidth,
            uniform_weight: UNIFORM_WEIGHT,
        }
    }

    pub fn volume(&self) -> f64 {
        self.half.iter().map(|a| 2.0 * a).product()
    }

    pub fn contains(&self, h: &[f64]) -> bool {
        h.iter().zip(&self.half).all(|(v, w)| v.abs() <= *w)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let use_uniform = self.centers.is_empty() || rng.random::<f64>() < self.uniform_weight;
        if use_uniform {
            return self
                .half
                .iter()
                .map(|a| a * (2.0 * rng.random::<f64>() - 1.0))
                .collect();
        }
        let c = &self.centers[rng.random_range(0..self.centers.len())];
        c.iter()
            .zip(&self.bandwidth)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Density at `h`.
    pub fn density(&self, h: &[f64]) -> f64 {
        let unif = if self.contains(h) {
            1.0 / self.volume()
        } else {
            0.0
        };
        if self.centers.is_empty() {
            return unif;
        }
        let norm: f64 = self
            .bandwidth
            .iter()
            .map(|s| s * (2.0 * std::f64::consts::PI).sqrt())
            .product();
        let kde = self
            .centers
            .iter()
            .map(|c| {
                let q: f64 = c
                    .iter()
                    .zip(h)
                    .zip(&self.bandwidth)
                    .map(|((m, v), s)| ((v - m) / s).powi(2))
                    .sum();
                (-0.5 * q).exp()
            })
            .sum::<f64>()
            / (self.centers.len() as f64 * norm);
        self.uniform_weight * unif + (1.0 - self.uniform_weight) * kde
    }
}

/// `sigma^p(B(x, r))` by importance sampling of
/// `1_Q(h) 1_B(E(h)) |d_1 E ^ ... ^ d_p E|(h)` with `h` drawn from `proposal`.
#[allow(clippy::too_many_arguments)]
pub fn sigma_ball_with(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    proposal: &Proposal,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<MeasureReport> {
    check_dim(basis.dim(), x.len())?;
    check_dim(tuple.len(), proposal.half.len())?;
    if !(r > 0.0 && proposal.half.iter().all(|w| *w > 0.0)) {
        return Err(GeoError::invalid("radius and box must be positive"));
    }
    if opts.samples == 0 {
        return Err(GeoError::invalid("samples must be positive"));
    }
    let p = tuple.len();
    let half = &proposal.half;
    let e = EMap::new(basis, tuple.clone(), x, r, cfg);
    let speed = speed_bound(basis, x, r, metric);
    let mut mix = OracleMix::default();
    let mut records = Vec::with_capacity(opts.samples);
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut near = 0;
    for i in 0..opts.samples {
        let mut rng = stream_rng(opts.seed, i as u64);
        let h = proposal.sample(&mut rng);
        let weight = 1.0 / proposal.density(&h);
        let (oracle, point) = if !proposal.contains(&h) {
            (Oracle::OutsideBox, Vec::new())
        } else {
            match e.point(&h) {
                Ok(y) => {
                    let o = classify(
                        basis,
                        tuple,
                        x,
                        r,
                        &h,
                        &y,
                        metric,
                        speed,
                        opts.search_budget,
                        opts.seed ^ (i as u64),
                        cfg,
                    )?;
                    (o, y)
                }
                Err(GeoError::EscapedDomain { .. }) => (Oracle::Failed, Vec::new()),
                Err(err) => return Err(err),
            }
        };
        mix.add(oracle);
        let member = matches!(oracle, Oracle::Construction | Oracle::SearchInside);
        let mut jac = 0.0;
        if member {
            jac = wedge_norm(&e.jacobian(&h)?);
            if h.iter().zip(half).any(|(v, w)| v.abs() > 0.9 * w) {
                near += 1;
            }
        }
        let v = jac * weight;
        s1 += v;
        s2 += v * v;
        records.push(SampleRecord {
            h,
            point,
            member,
            jacobian: jac,
            weight,
            oracle,
        });
    }
    let m = opts.samples as f64;
    let mean = s1 / m;
    let var = (s2 / m - mean * mean).max(0.0);
    let evaluated = m - mix.outside_box as f64;
    Ok(MeasureReport {
        center: x.to_vec(),
        radius: r,
        metric,
        tuple: tuple.to_string(),
        p,
        sigma_p: mean,
        method: if proposal.centers.is_empty() {
            "area-formula/uniform".into()
        } else {
            "area-formula/importance".into()
        },
        sample_size: opts.samples,
        std_error: (var / m).sqrt(),
        box_half_widths: half.clone(),
        near_boundary: near,
        unreliable: mix.failed as f64 > 0.05 * evaluated.max(1.0),
        oracle_mix: mix,
        records,
        proposal: proposal.clone(),
    })
}

/// [`sigma_ball_with`] for `h` uniform in the box with the given half-widths.
#[allow(clippy::too_many_arguments)]
pub fn sigma_ball_in_box(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    half: &[f64],
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<MeasureReport> {
    let q = Proposal::uniform(half.to_vec());
    sigma_ball_with(basis, tuple, x, r, metric, &q, opts, cfg)
}

/// Largest box growth attempts when members reach the boundary.
const BOX_GROWTH_STEPS: usize = 4;

/// Half-widths of `Q_I(b)`.
pub fn box_half_widths(basis: &CommutatorBasis, tuple: &TupleIndex, b: f64) -> Vec<f64> {
    tuple
        .member_lengths(&basis.lengths)
        .iter()
        .map(|&l| b.powi(l as i32))
        .collect()
}

/// Proposal for the ball: a uniform pilot run on `Q_I(b)` with a quarter of the
/// samples, the box tightened per coordinate to the members' extent with a 30%
/// margin, and kernels placed on the pilot members.
pub fn pilot_proposal(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<Proposal> {
    let mut half = box_half_widths(basis, tuple, opts.box_radius);
    let pilot = MeasureOptions {
        samples: (opts.samples / 4).max(50),
        seed: opts.seed.wrapping_add(0x5851_f42d),
        ..opts.clone()
    };
    for _ in 0..BOX_GROWTH_STEPS {
        let rep = sigma_ball_in_box(basis, tuple, x, r, metric, &half, &pilot, cfg)?;
        let members: Vec<Vec<f64>> = rep
            .records
            .iter()
            .filter(|s| s.member)
            .map(|s| s.h.clone())
            .collect();
        if members.is_empty() {
            return Ok(Proposal::uniform(half));
        }
        if rep.near_boundary > 0 {
            half.iter_mut().for_each(|w| *w *= 1.5);
            continue;
        }
        let tight: Vec<f64> = half
            .iter()
            .enumerate()
            .map(|(k, w)| {
                let m = members.iter().map(|h| h[k].abs()).fold(0.0, f64::max);
                (1.3 * m).clamp(0.05 * w, *w)
            })
            .collect();
        return Ok(Proposal::with_kernels(tight, members));
    }
    Ok(Proposal::uniform(half))
}

/// [`sigma_ball_with`] on a proposal chosen by a pilot run (or uniform on
/// `Q_I(b)` when adaptation is off), widening coordinates whose members come
/// within 10% of the boundary.
pub fn sigma_ball(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<MeasureReport> {
    let q = if opts.adapt_box {
        pilot_proposal(basis, tuple, x, r, metric, opts, cfg)?
    } else {
        Proposal::uniform(box_half_widths(basis, tuple, opts.box_radius))
    };
    sigma_ball_with_growth(basis, tuple, x, r, metric, q, opts, cfg)
}

#[allow(clippy::too_many_arguments)]
fn sigma_ball_with_growth(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    mut q: Proposal,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<MeasureReport> {
    let mut rep = sigma_ball_with(basis, tuple, x, r, metric, &q, opts, cfg)?;
    for _ in 0..BOX_GROWTH_STEPS {
        if rep.near_boundary == 0 || !opts.adapt_box {
            break;
        }
        for (k, w) in q.half.iter_mut().enumerate() {
            if rep
                .records
                .iter()
                .any(|s| s.member && s.h[k].abs() > 0.9 * *w)
            {
                *w *= 1.5;
            }
        }
        rep = sigma_ball_with(basis, tuple, x, r, metric, &q, opts, cfg)?;
    }
    Ok(rep)
}

/// Maximal tuple at `(x, r)`.
pub fn tuple_at(basis: &CommutatorBasis, x: &[f64], r: f64) -> Result<TupleIndex> {
    Ok(select_maximal_tuple(basis, x, r, DEFAULT_RANK_TOL)?.tuple)
}

/// Measure of the ball at radius `r`, reusing the proposal of `other` (same
/// seed, so the same `h` draws) when the maximal tuples agree.
#[allow(clippy::too_many_arguments)]
fn sigma_ball_paired(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    metric: Metric,
    other: &MeasureReport,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<MeasureReport> {
    if tuple.to_string() == other.tuple {
        sigma_ball_with_growth(
            basis,
            tuple,
            x,
            r,
            metric,
            other.proposal.clone(),
            opts,
            cfg,
        )
    } else {
        sigma_ball(basis, tuple, x, r, metric, opts, cfg)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DoublingReport {
    pub ratio: f64,
    pub std_error: f64,
    pub small: MeasureReport,
    pub large: MeasureReport,
}

/// `sigma^p(B(x, 2r)) / sigma^p(B(x, r))`, both balls sampled with the same
/// seed and proposal so that their Monte Carlo errors are correlated.
pub fn doubling_ratio(
    basis: &CommutatorBasis,
    x: &[f64],
    r: f64,
    metric: Metric,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<DoublingReport> {
    let t2 = tuple_at(basis, x, 2.0 * r)?;
    let t1 = tuple_at(basis, x, r)?;
    let large = sigma_ball(basis, &t2, x, 2.0 * r, metric, opts, cfg)?;
    let small = sigma_ball_paired(basis, &t1, x, r, metric, &large, opts, cfg)?;
    if small.sigma_p <= 0.0 {
        return Err(GeoError::invalid("small ball has zero estimated measure"));
    }
    let ratio = large.sigma_p / small.sigma_p;
    // delta method on the paired per-sample contributions
    let m = small.records.len().min(large.records.len());
    let paired = small.records.len() == large.records.len()
        && small.tuple == large.tuple
        && small.box_half_widths == large.box_half_widths;
    let std_error = if paired && m > 1 {
        let d: Vec<f64> = large
            .records
            .iter()
            .zip(&small.records)
            .map(|(u, v)| u.jacobian * u.weight - ratio * v.jacobian * v.weight)
            .collect();
        let md = d.iter().sum::<f64>() / m as f64;
        let vd = d.iter().map(|v| (v - md).powi(2)).sum::<f64>() / m as f64;
        (vd / m as f64).sqrt() / small.sigma_p
    } else {
        ratio
            * ((large.std_error / large.sigma_p.max(1e-300)).powi(2)
                + (small.std_error / small.sigma_p).powi(2))
            .sqrt()
    };
    Ok(DoublingReport {
        ratio,
        std_error,
        small,
        large,
    })
}

/// A polynomial test function with its name.
#[derive(Clone, Debug)]
pub struct TestFunction {
    pub name: String,
    pub f: Poly,
}

/// Coordinates, quadratic monomials and `random` seeded polynomials of degree at most 2.
pub fn test_suite(n: usize, random: usize, seed: u64) -> Vec<TestFunction> {
    let mut out = Vec::new();
    for i in 0..n {
        out.push(TestFunction {
            name: format!("x{}", i + 1),
            f: Poly::var(n, i),
        });
    }
    for i in 0..n {
        for j in i..n {
            out.push(TestFunction {
                name: format!("x{}*x{}", i + 1, j + 1),
                f: Poly::var(n, i).mul(&Poly::var(n, j)),
            });
        }
    }
    for k in 0..random {
        let mut rng = stream_rng(seed, 1_000_000 + k as u64);
        let mut f = Poly::zero(n);
        for i in 0..n {
            f = f.add(&Poly::var(n, i).scale(2.0 * rng.random::<f64>() - 1.0));
            for j in i..n {
                let c = 2.0 * rng.random::<f64>() - 1.0;
                f = f.add(&Poly::var(n, i).mul(&Poly::var(n, j)).scale(c));
            }
        }
        out.push(TestFunction {
            name: format!("random{}", k + 1),
            f,
        });
    }
    out
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareEntry {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
    /// `rhs` under the noise floor while `lhs` is above it.
    pub flagged: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PoincareReport {
    pub center: Vec<f64>,
    pub radius: f64,
    pub enlarge: f64,
    pub max_ratio: f64,
    pub argmax: String,
    pub entries: Vec<PoincareEntry>,
    pub inner: MeasureReport,
    pub outer: MeasureReport,
}

/// Below this both sides of the inequality count as zero.
const POINCARE_FLOOR: f64 = 1e-13;

/// `int_{B(x,r)} |f - f_B| / sum_j int_{B(x, C r)} |r X_j f|` for each test function.
pub fn poincare_ratio(
    basis: &CommutatorBasis,
    x: &[f64],
    r: f64,
    suite: &[TestFunction],
    enlarge: f64,
    opts: &MeasureOptions,
    cfg: &IntegratorConfig,
) -> Result<PoincareReport> {
    if !(enlarge >= 1.0) {
        return Err(GeoError::invalid("enlargement constant must be at least 1"));
    }
    let n = basis.dim();
    let outer = sigma_ball(
        basis,
        &tuple_at(basis, x, enlarge * r)?,
        x,
        enlarge * r,
        Metric::Cc,
        opts,
        cfg,
    )?;
    let inner = sigma_ball_paired(
        basis,
        &tuple_at(basis, x, r)?,
        x,
        r,
        Metric::Cc,
        &outer,
        opts,
        cfg,
    )?;
    let mi = inner.records.len() as f64;
    let mo = outer.records.len() as f64;
    let mut entries = Vec::with_capacity(suite.len());
    for tf in suite {
        if tf.f.nvars() != n {
            return Err(GeoError::DimensionMismatch {
                expected: n,
                got: tf.f.nvars(),
            });
        }
        let members: Vec<&SampleRecord> = inner.records.iter().filter(|s| s.member).collect();
        let vals: Vec<f64> = members.iter().map(|s| tf.f.eval(&s.point)).collect();
        let (lhs, _) = if let Some(&f0) = vals.first() {
            // mean as an offset from the first value, so constants give exactly zero
            let wsum: f64 = members.iter().map(|s| s.jacobian * s.weight).sum();
            let off: f64 = members
                .iter()
                .zip(&vals)
                .map(|(s, v)| (v - f0) * s.jacobian * s.weight)
                .sum::<f64>()
                / wsum;
            let lhs: f64 = members
                .iter()
                .zip(&vals)
                .map(|(s, v)| ((v - f0) - off).abs() * s.jacobian * s.weight)
                .sum::<f64>()
                / mi;
            (lhs, f0 + off)
        } else {
            (0.0, 0.0)
        };
        let grads: Vec<Poly> = (0..n).map(|i| tf.f.derivative(i)).collect();
        let mut rhs = 0.0;
        for s in outer.records.iter().filter(|s| s.member) {
            let g: Vec<f64> = grads.iter().map(|d| d.eval(&s.point)).collect();
            let mut acc = 0.0;
            for xj in basis.horizontal() {
                let v = xj.eval(&s.point);
                let d: f64 = v.iter().zip(&g).map(|(a, b)| a * b).sum();
                acc += (r * d).abs();
            }
            rhs += acc * s.jacobian * s.weight;
        }
        rhs /= mo;
        let lhs = if lhs.abs() <= POINCARE_FLOOR {
            0.0
        } else {
            lhs
        };
        let flagged = rhs <= POINCARE_FLOOR && lhs > POINCARE_FLOOR;
        let ratio = if lhs == 0.0 {
            0.0
        } else if flagged {
            f64::INFINITY
        } else {
            lhs / rhs
        };
        entries.push(PoincareEntry {
            name: tf.name.clone(),
            lhs,
            rhs,
            ratio,
            flagged,
        });
    }
    let (argmax, max_ratio) = entries.iter().map(|e| (e.name.clone(), e.ratio)).fold(
        (String::new(), 0.0),
        |acc, (nm, v)| if v > acc.1 { (nm, v) } else { acc },
    );
    Ok(PoincareReport {
        center: x.to_vec(),
        radius: r,
        enlarge,
        max_ratio,
        argmax,
        entries,
        inner,
        outer,
    })
}

/// Number of singular values of the centered cloud above `tol` times the largest.
pub fn effective_rank(points: &[Vec<f64>], tol: f64) -> usize {
    if points.len() < 2 {
        return 0;
    }
    let n = points[0].len();
    let m = points.len() as f64;
    let mean: Vec<f64> = (0..n)
        .map(|i| points.iter().map(|p| p[i]).sum::<f64>() / m)
        .collect();
    let a = nalgebra::DMatrix::from_fn(points.len(), n, |k, i| points[k][i] - mean[i]);
    let s = crate::linalg::singular_values(&a);
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return 0;
    }
    s.iter().filter(|v| **v > tol * top).count()
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
    fn planar_disk_area() {
        let b = basis("euclid2in3");
        let cfg = IntegratorConfig::default();
        let x = [0.0; 3];
        let t = tuple_at(&b, &x, 0.2).unwrap();
        let opts = MeasureOptions {
            samples: 4000,
            seed: 5,
            ..MeasureOptions::default()
        };
        let rep = sigma_ball(&b, &t, &x, 0.2, Metric::Cc, &opts, &cfg).unwrap();
        let exact = std::f64::consts::PI * 0.04;
        assert!(
            (rep.sigma_p - exact).abs() < 0.05 * exact,
            "{}",
            rep.sigma_p
        );
        assert!(rep.std_error > 0.0 && !rep.unreliable);
    }

    #[test]
    fn constant_function_has_zero_ratio() {
        let b = basis("euclid2in3");
        let cfg = IntegratorConfig::default();
        let suite = vec![TestFunction {
            name: "const".into(),
            f: Poly::constant(3, 2.5),
        }];
        let opts = MeasureOptions {
            samples: 300,
            ..MeasureOptions::default()
        };
        let rep = poincare_ratio(&b, &[0.0; 3], 0.1, &suite, 3.0, &opts, &cfg).unwrap();
        assert_eq!(rep.max_ratio, 0.0);
        assert_eq!(rep.entries[0].lhs, 0.0);
    }

    #[test]
    fn suite_contents() {
        let s = test_suite(2, 5, 1);
        assert_eq!(s.len(), 2 + 3 + 5);
        assert_eq!(s[2].name, "x1*x1");
        assert_eq!(test_suite(2, 5, 1)[9].f, s[9].f);
    }

    #[test]
    fn cloud_rank() {
        let line: Vec<Vec<f64>> = (0..10).map(|k| vec![k as f64, 0.0, 1.0]).collect();
        assert_eq!(effective_rank(&line, 1e-6), 1);
        let plane: Vec<Vec<f64>> = (0..10)
            .map(|k| vec![k as f64, (k * k) as f64, 1.0])
            .collect();
        assert_eq!(effective_rank(&plane, 1e-6), 2);
    }
}
