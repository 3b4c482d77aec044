//! Flows, approximate exponentials of bracket words, and the maps `E` and `Phi`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GeoError, Result};
use crate::fields::{CommutatorBasis, VectorField};
use crate::multilinear::TupleIndex;
use crate::ode::{integrate, IntegratorConfig};

/// Default central-difference step for Jacobians of maps on the unit `h` scale.
pub const MAP_JAC_STEP: f64 = 1e-5;

/// Fills in the basis domain box when the config has none.
pub fn cfg_for(basis: &CommutatorBasis, cfg: &IntegratorConfig) -> IntegratorConfig {
    let mut c = cfg.clone();
    if c.domain.is_none() {
        c.domain = Some(basis.domain_box.clone());
    }
    c
}

pub fn flow(field: &VectorField, x: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    check_dim(field.dim(), x.len())?;
    if t == 0.0 {
        return Ok(x.to_vec());
    }
    integrate(|_, y, d| field.eval_into(y, d), x, 0.0, t, cfg)
}

/// Time-`T` flow of `sum_j b_j Y_j`.
pub fn flow_combination(
    b: &[f64],
    basis: &CommutatorBasis,
    x: &[f64],
    t_end: f64,
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    check_dim(basis.q(), b.len())?;
    check_dim(basis.dim(), x.len())?;
    if t_end == 0.0 || b.iter().all(|v| *v == 0.0) {
        return Ok(x.to_vec());
    }
    let cfg = cfg_for(basis, cfg);
    let active: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
    let n = basis.dim();
    let mut buf = vec![0.0; n];
    integrate(
        |_, y, d| {
            d.iter_mut().for_each(|v| *v = 0.0);
            for &j in &active {
                basis.members[j].eval_into(y, &mut buf);
                for i in 0..n {
                    d[i] += b[j] * buf[i];
                }
            }
        },
        x,
        0.0,
        t_end,
        &cfg,
    )
}

/// `exp_ap(h X_w) x` for a word over the horizontal letters.
///
/// Length one is the flow. For `w = (a, w')` of length `l` and `t = |h|^{1/l}`,
/// positive `h` applies `e^{tX_a}`, `exp_ap(t^{l-1} X_{w'})`, `e^{-tX_a}`,
/// `exp_ap(-t^{l-1} X_{w'})` in that order; negative `h` applies the exact inverse.
pub fn approx_exponential(
    basis: &CommutatorBasis,
    word: &[usize],
    h: f64,
    x: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    if word.is_empty() {
        return Err(GeoError::invalid("empty word"));
    }
    if let Some(&bad) = word.iter().find(|&&a| a >= basis.m) {
        return Err(GeoError::invalid(format!(
            "letter {} is not horizontal",
            bad + 1
        )));
    }
    let cfg = cfg_for(basis, cfg);
    exp_ap_inner(basis.horizontal(), word, h, x, &cfg)
}

fn exp_ap_inner(
    hor: &[VectorField],
    word: &[usize],
    h: f64,
    x: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    if h == 0.0 {
        return Ok(x.to_vec());
    }
    let a = &hor[word[0]];
    if word.len() == 1 {
        return flow(a, x, h, cfg);
    }
    let l = word.len() as f64;
    let t = h.abs().powf(1.0 / l);
    let s = t.powi(word.len() as i32 - 1);
    let rest = &word[1..];
    if h > 0.0 {
        let y = flow(a, x, t, cfg)?;
        let y = exp_ap_inner(hor, rest, s, &y, cfg)?;
        let y = flow(a, &y, -t, cfg)?;
        exp_ap_inner(hor, rest, -s, &y, cfg)
    } else {
        let y = exp_ap_inner(hor, rest, s, x, cfg)?;
        let y = flow(a, &y, t, cfg)?;
        let y = exp_ap_inner(hor, rest, -s, &y, cfg)?;
        flow(a, &y, -t, cfg)
    }
}

/// The horizontal flows `(letter, time)` that `exp_ap(h X_w)` applies, in order.
pub fn exp_ap_schedule(word: &[usize], h: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    schedule_inner(word, h, &mut out);
    out
}

fn schedule_inner(word: &[usize], h: f64, out: &mut Vec<(usize, f64)>) {
    if h == 0.0 || word.is_empty() {
        return;
    }
    let a = word[0];
    if word.len() == 1 {
        out.push((a, h));
        return;
    }
    let t = h.abs().powf(1.0 / word.len() as f64);
    let s = t.powi(word.len() as i32 - 1);
    let rest = &word[1..];
    if h > 0.0 {
        out.push((a, t));
        schedule_inner(rest, s, out);
        out.push((a, -t));
        schedule_inner(rest, -s, out);
    } else {
        schedule_inner(rest, s, out);
        out.push((a, t));
        schedule_inner(rest, -s, out);
        out.push((a, -t));
    }
}

/// Flow schedule of `E_{I,x,r}(h)`, in application order.
pub fn e_schedule(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    r: f64,
    h: &[f64],
) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    for (k, &j) in tuple.indices().iter().enumerate().rev() {
        let l = basis.lengths[j];
        schedule_inner(basis.members[j].word(), h[k] * r.powi(l as i32), &mut out);
    }
    out
}

/// `max_j |h_j|^{1/l_j}`.
pub fn box_norm(h: &[f64], lengths: &[usize]) -> f64 {
    h.iter()
        .zip(lengths)
        .map(|(v, &l)| v.abs().powf(1.0 / l as f64))
        .fold(0.0, f64::max)
}

/// A point of `Q_I` with its box norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxPoint {
    pub h: Vec<f64>,
    pub tuple: TupleIndex,
    pub box_norm: f64,
}

impl BoxPoint {
    pub fn new(h: Vec<f64>, tuple: TupleIndex, lengths: &[usize]) -> Result<Self> {
        check_dim(tuple.len(), h.len())?;
        let box_norm = box_norm(&h, &tuple.member_lengths(lengths));
        Ok(BoxPoint { h, tuple, box_norm })
    }
}

fn check_chart_args(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    v: &[f64],
) -> Result<()> {
    check_dim(basis.dim(), x.len())?;
    check_dim(tuple.len(), v.len())?;
    if !(r > 0.0) {
        return Err(GeoError::invalid("radius must be positive"));
    }
    Ok(())
}

/// `E_{I,x,r}(h) = exp_ap(h_1 r^{l_1} Y_{i_1}) ... exp_ap(h_p r^{l_p} Y_{i_p}) x`,
/// the rightmost factor applied first.
pub fn map_e(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    h: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    check_chart_args(basis, tuple, x, r, h)?;
    let cfg = cfg_for(basis, cfg);
    let mut y = x.to_vec();
    for (k, &j) in tuple.indices().iter().enumerate().rev() {
        let l = basis.lengths[j];
        let word = basis.members[j].word();
        y = exp_ap_inner(basis.horizontal(), word, h[k] * r.powi(l as i32), &y, &cfg)?;
    }
    Ok(y)
}

/// `Phi_{I,x,r}(u) = exp(sum_j u_j r^{l_j} Y_{i_j}) x`.
pub fn map_phi(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    r: f64,
    u: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>> {
    check_chart_args(basis, tuple, x, r, u)?;
    let mut b = vec![0.0; basis.q()];
    for (k, &j) in tuple.indices().iter().enumerate() {
        b[j] = u[k] * r.powi(basis.lengths[j] as i32);
    }
    flow_combination(&b, basis, x, 1.0, cfg)
}

/// Central-difference Jacobian (`n x p`) of a map on `R^p`.
pub fn jacobian_of_map<F>(map: F, h: &[f64], step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = h.len();
    let mut hp = h.to_vec();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(p);
    for k in 0..p {
        hp[k] = h[k] + step;
        let a = map(&hp)?;
        hp[k] = h[k] - step;
        let b = map(&hp)?;
        hp[k] = h[k];
        cols.push(
            a.iter()
                .zip(&b)
                .map(|(u, v)| (u - v) / (2.0 * step))
                .collect(),
        );
    }
    let n = cols.first().map(|c| c.len()).unwrap_or(0);
    Ok(DMatrix::from_fn(n, p, |i, k| cols[k][i]))
}

/// A parametrization of a neighbourhood of `x` by `R^p`.
pub trait Chart {
    fn p(&self) -> usize;
    fn base(&self) -> &[f64];
    fn point(&self, h: &[f64]) -> Result<Vec<f64>>;
    fn jacobian(&self, h: &[f64]) -> Result<DMatrix<f64>> {
        jacobian_of_map(|v| self.point(v), h, MAP_JAC_STEP)
    }
}

/// `E_{I,x,r}` packaged as a chart.
#[derive(Clone)]
pub struct EMap<'a> {
    pub basis: &'a CommutatorBasis,
    pub tuple: TupleIndex,
    pub x: Vec<f64>,
    pub r: f64,
    pub cfg: IntegratorConfig,
}

/// `Phi_{I,x,r}` packaged as a chart.
#[derive(Clone)]
pub struct PhiMap<'a> {
    pub basis: &'a CommutatorBasis,
    pub tuple: TupleIndex,
    pub x: Vec<f64>,
    pub r: f64,
    pub cfg: IntegratorConfig,
}

impl<'a> EMap<'a> {
    pub fn new(
        basis: &'a CommutatorBasis,
        tuple: TupleIndex,
        x: &[f64],
        r: f64,
        cfg: &IntegratorConfig,
    ) -> Self {
        EMap {
            basis,
            tuple,
            x: x.to_vec(),
            r,
            cfg: cfg_for(basis, cfg),
        }
    }
}

impl<'a> PhiMap<'a> {
    pub fn new(
        basis: &'a CommutatorBasis,
        tuple: TupleIndex,
        x: &[f64],
        r: f64,
        cfg: &IntegratorConfig,
    ) -> Self {
        PhiMap {
            basis,
            tuple,
            x: x.to_vec(),
            r,
            cfg: cfg_for(basis, cfg),
        }
    }
}

impl Chart for EMap<'_> {
    fn p(&self) -> usize {
        self.tuple.len()
    }
    fn base(&self) -> &[f64] {
        &self.x
    }
    fn point(&self, h: &[f64]) -> Result<Vec<f64>> {
        map_e(self.basis, &self.tuple, &self.x, self.r, h, &self.cfg)
    }
}

impl Chart for PhiMap<'_> {
    fn p(&self) -> usize {
        self.tuple.len()
    }
    fn base(&self) -> &[f64] {
        &self.x
    }
    fn point(&self, u: &[f64]) -> Result<Vec<f64>> {
        map_phi(self.basis, &self.tuple, &self.x, self.r, u, &self.cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::builtin;
    use crate::fields::generate_commutators;
    use crate::linalg::dist;

    fn basis(name: &str) -> CommutatorBasis {
        generate_commutators(&builtin(name).unwrap())
    }

    #[test]
    fn flow_examples() {
        let b = basis("grushin");
        let cfg = cfg_for(&b, &IntegratorConfig::default());
        let y = flow(&b.members[1], &[2.0, 0.0], 1.0, &cfg).unwrap();
        assert!(dist(&y, &[2.0, 2.0]) < 1e-12);
        assert_eq!(
            flow(&b.members[0], &[0.3, 0.4], 0.0, &cfg).unwrap(),
            vec![0.3, 0.4]
        );
        let y = flow(&b.members[0], &[0.3, 0.4], 0.5, &cfg).unwrap();
        assert!(dist(&y, &[0.8, 0.4]) < 1e-14);
    }

    #[test]
    fn flow_leaving_box_fails() {
        let b = basis("grushin");
        let cfg = cfg_for(&b, &IntegratorConfig::default());
        let err = flow(&b.members[0], &[0.0, 0.0], 3.0, &cfg).unwrap_err();
        assert!(matches!(err, GeoError::EscapedDomain { .. }));
    }

    #[test]
    fn heisenberg_diagonal_combination() {
        let b = basis("heisenberg");
        let y = flow_combination(
            &[1.0, 1.0, 0.0, 0.0],
            &b,
            &[0.0; 3],
            1.0,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert!(dist(&y, &[1.0, 1.0, 0.0]) < 1e-12);
        let z = flow_combination(
            &[0.0; 4],
            &b,
            &[0.1, 0.2, 0.3],
            1.0,
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert_eq!(z, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn heisenberg_commutator_is_exact() {
        let b = basis("heisenberg");
        let cfg = IntegratorConfig::default();
        for h in [1e-2, -1e-2, 0.3] {
            let y = approx_exponential(&b, &[0, 1], h, &[0.0; 3], &cfg).unwrap();
            assert!(dist(&y, &[0.0, 0.0, h]) < 1e-12, "{h} {y:?}");
        }
    }

    #[test]
    fn negative_parameter_inverts() {
        let b = basis("martinet");
        let cfg = IntegratorConfig::default();
        let x = [0.3, 0.2, 0.1];
        for w in [vec![0, 1], vec![0, 0, 1], vec![1, 0, 1]] {
            let y = approx_exponential(&b, &w, 0.05, &x, &cfg).unwrap();
            let z = approx_exponential(&b, &w, -0.05, &y, &cfg).unwrap();
            assert!(dist(&z, &x) < 1e-9, "{w:?}");
        }
    }

    #[test]
    fn box_norm_examples() {
        assert_eq!(box_norm(&[0.0, 0.0], &[1, 2]), 0.0);
        assert_eq!(box_norm(&[0.3, -0.5], &[1, 1]), 0.5);
        assert!((box_norm(&[0.04, 0.09, 0.01], &[1, 1, 2]) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn euclid_e_map() {
        let b = basis("euclid2in3");
        let t = TupleIndex::new(vec![0, 1], &b.lengths).unwrap();
        let y = map_e(
            &b,
            &t,
            &[0.0, 0.0, 5.0],
            0.1,
            &[0.3, 0.4],
            &IntegratorConfig::default(),
        )
        .unwrap();
        assert!(dist(&y, &[0.03, 0.04, 5.0]) < 1e-14);
        let phi = PhiMap::new(&b, t, &[0.0; 3], 1.0, &IntegratorConfig::default());
        let y = phi.point(&[0.2, -0.7]).unwrap();
        assert!(dist(&y, &[0.2, -0.7, 0.0]) < 1e-14);
        let j = phi.jacobian(&[0.0, 0.0]).unwrap();
        assert!((j - DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0])).norm() < 1e-9);
    }

    #[test]
    fn heisenberg_e_map_closed_form() {
        let b = basis("heisenberg");
        let t = TupleIndex::new(vec![0, 1, 2], &b.lengths).unwrap();
        let r = 0.1;
        let e = EMap::new(&b, t.clone(), &[0.0; 3], r, &IntegratorConfig::default());
        let h = [0.3, -0.2, 0.25];
        let y = e.point(&h).unwrap();
        let expect = [r * h[0], r * h[1], r * r * (h[2] - h[0] * h[1] / 2.0)];
        assert!(dist(&y, &expect) < 1e-12);
        let j = e.jacobian(&[0.0; 3]).unwrap();
        let jx = DMatrix::from_row_slice(3, 3, &[0.1, 0.0, 0.0, 0.0, 0.1, 0.0, 0.0, 0.0, 0.01]);
        assert!((j - jx).norm() < 1e-9);
        let u = [1.0, 1.0, 0.0];
        let y = map_phi(&b, &t, &[0.0; 3], 1.0, &u, &IntegratorConfig::default()).unwrap();
        assert!(dist(&y, &[1.0, 1.0, 0.0]) < 1e-12);
    }

    #[test]
    fn affine_jacobian_is_exact() {
        let j = jacobian_of_map(
            |h| Ok(vec![2.0 * h[0] + h[1], -h[1], 3.0]),
            &[0.3, 0.1],
            1e-5,
        )
        .unwrap();
        let expect = DMatrix::from_row_slice(3, 2, &[2.0, 1.0, 0.0, -1.0, 0.0, 0.0]);
        assert!((j - expect).norm() < 1e-10);
    }

    #[test]
    fn schedule_replays_e() {
        let cfg = IntegratorConfig::default();
        let b = basis("martinet");
        let t = TupleIndex::from_one_based(&[1, 2, 3], &b.lengths).unwrap();
        let x = [0.3, 0.2, 0.1];
        let h = [0.2, -0.3, 0.4];
        let mut y = x.to_vec();
        let sched = e_schedule(&b, &t, 0.1, &h);
        assert_eq!(sched.len(), 1 + 1 + 4);
        for (a, tt) in sched {
            y = flow(&b.horizontal()[a], &y, tt, &cfg).unwrap();
        }
        let e = map_e(&b, &t, &x, 0.1, &h, &cfg).unwrap();
        assert!(dist(&y, &e) < 1e-12);
    }
}
