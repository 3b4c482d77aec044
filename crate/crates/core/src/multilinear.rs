//! Wedge products of commutator tuples, Cramer coordinates and maximal tuples.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GeoError, Result};
use crate::fields::CommutatorBasis;
use crate::linalg::{combinations, det, dist, rank};

/// Strictly increasing multi-index into the commutator family (zero-based),
/// with its total degree.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TupleIndex {
    indices: Vec<usize>,
    degree: usize,
}

impl TupleIndex {
    pub fn new(indices: Vec<usize>, lengths: &[usize]) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(GeoError::invalid(format!(
                "tuple {indices:?} is not strictly increasing"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= lengths.len()) {
            return Err(GeoError::invalid(format!(
                "tuple index {} exceeds family size {}",
                bad + 1,
                lengths.len()
            )));
        }
        let degree = indices.iter().map(|&i| lengths[i]).sum();
        Ok(TupleIndex { indices, degree })
    }

    /// Builds from one-based indices, as written by users.
    pub fn from_one_based(indices: &[usize], lengths: &[usize]) -> Result<Self> {
        if indices.contains(&0) {
            return Err(GeoError::invalid("tuple indices are one-based"));
        }
        Self::new(indices.iter().map(|i| i - 1).collect(), lengths)
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.indices.iter().map(|i| i + 1).collect()
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Lengths `l_{i_1}, ..., l_{i_p}` of the members.
    pub fn member_lengths(&self, lengths: &[usize]) -> Vec<usize> {
        self.indices.iter().map(|&i| lengths[i]).collect()
    }
}

impl fmt::Display for TupleIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: Vec<String> = self.one_based().iter().map(|i| i.to_string()).collect();
        write!(f, "({})", s.join(","))
    }
}

/// Components of `Y_{i_1} ^ ... ^ Y_{i_p}` in the basis `e_K`, `K` in `I(p, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WedgeVector {
    pub p: usize,
    pub components: Vec<(Vec<usize>, f64)>,
    pub norm: f64,
}

impl WedgeVector {
    pub fn component(&self, rows: &[usize]) -> f64 {
        self.components
            .iter()
            .find(|(k, _)| k.as_slice() == rows)
            .map(|(_, v)| *v)
            .unwrap_or(0.0)
    }
}

/// Wedge of the columns of an `n x p` matrix.
pub fn wedge_of_columns(cols: &DMatrix<f64>) -> WedgeVector {
    let (n, p) = cols.shape();
    let components: Vec<(Vec<usize>, f64)> = combinations(n, p)
        .into_iter()
        .map(|k| {
            let v = det(&cols.select_rows(&k));
            (k, v)
        })
        .collect();
    let norm = components.iter().map(|(_, v)| v * v).sum::<f64>().sqrt();
    WedgeVector {
        p,
        components,
        norm,
    }
}

/// `|Y_I|` only; skips building the component list.
pub fn wedge_norm(cols: &DMatrix<f64>) -> f64 {
    let (n, p) = cols.shape();
    if p == n {
        return det(cols).abs();
    }
    if p == 1 {
        return cols.norm();
    }
    combinations(n, p)
        .into_iter()
        .map(|k| det(&cols.select_rows(&k)).powi(2))
        .sum::<f64>()
        .sqrt()
}

pub fn wedge_components(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
) -> Result<WedgeVector> {
    check_dim(basis.dim(), x.len())?;
    if tuple.len() > basis.dim() {
        return Err(GeoError::invalid("tuple longer than the dimension"));
    }
    Ok(wedge_of_columns(&basis.eval_scaled(tuple, x, 1.0)))
}

/// Cramer coordinates of `w` in the columns, and the reconstruction residual.
///
/// `xi^k = <Y_I, i^k(W) Y_I> / |Y_I|^2` where `i^k(W)` replaces column `k` by `W`.
/// A vanishing wedge returns zero coordinates and residual `|W|`.
pub fn cramer_in_columns(cols: &DMatrix<f64>, w: &[f64]) -> (Vec<f64>, f64) {
    let (n, p) = cols.shape();
    let rows = combinations(n, p);
    let minors: Vec<f64> = rows.iter().map(|k| det(&cols.select_rows(k))).collect();
    let vol2: f64 = minors.iter().map(|v| v * v).sum();
    if vol2 == 0.0 {
        return (vec![0.0; p], crate::linalg::norm(w));
    }
    let mut xi = vec![0.0; p];
    let mut replaced = cols.clone();
    for (k, xk) in xi.iter_mut().enumerate() {
        for i in 0..n {
            replaced[(i, k)] = w[i];
        }
        let mut acc = 0.0;
        for (kk, m) in rows.iter().zip(&minors) {
            acc += m * det(&replaced.select_rows(kk));
        }
        *xk = acc / vol2;
        for i in 0..n {
            replaced[(i, k)] = cols[(i, k)];
        }
    }
    let rec = crate::linalg::mat_vec(cols, &xi);
    (xi, dist(&rec, w))
}

/// Cramer coordinates with the span check: fails on a degenerate tuple or a
/// vector outside the span.
pub fn cramer_checked(cols: &DMatrix<f64>, w: &[f64], rank_tol: f64) -> Result<(Vec<f64>, f64)> {
    let vol = wedge_norm(cols);
    let scale: f64 = (0..cols.ncols())
        .map(|c| cols.column(c).norm())
        .product::<f64>();
    if vol <= rank_tol * scale.max(f64::MIN_POSITIVE) || vol == 0.0 {
        return Err(GeoError::DegenerateTuple {
            tuple: Vec::new(),
            volume: vol,
        });
    }
    let (xi, res) = cramer_in_columns(cols, w);
    let wn = crate::linalg::norm(w);
    if res > 1e-7 * wn.max(1e-300) + 1e-14 {
        return Err(GeoError::NotInSpan { residual: res });
    }
    Ok((xi, res))
}

pub fn cramer_coordinates(
    basis: &CommutatorBasis,
    tuple: &TupleIndex,
    x: &[f64],
    w: &[f64],
    rank_tol: f64,
) -> Result<(Vec<f64>, f64)> {
    check_dim(basis.dim(), x.len())?;
    check_dim(basis.dim(), w.len())?;
    let cols = basis.eval_scaled(tuple, x, 1.0);
    cramer_checked(&cols, w, rank_tol).map_err(|e| match e {
        GeoError::DegenerateTuple { volume, .. } => GeoError::DegenerateTuple {
            tuple: tuple.one_based(),
            volume,
        },
        other => other,
    })
}

/// `|Lambda_p(x, r)| = sqrt(sum_I r^{2 l(I)} |Y_I(x)|^2)` over all `p`-tuples.
pub fn lambda_vector(basis: &CommutatorBasis, p: usize, x: &[f64], r: f64) -> Result<f64> {
    check_dim(basis.dim(), x.len())?;
    if p == 0 || p > basis.dim().min(basis.q()) {
        return Err(GeoError::invalid(format!("grade {p} out of range")));
    }
    if r <= 0.0 {
        return Err(GeoError::invalid("radius must be positive"));
    }
    let cols = basis.eval_all(x);
    let mut acc = 0.0;
    for t in combinations(basis.q(), p) {
        let deg: usize = t.iter().map(|&i| basis.lengths[i]).sum();
        let v = wedge_norm(&cols.select_columns(&t));
        acc += r.powi(2 * deg as i32) * v * v;
    }
    Ok(acc.sqrt())
}

pub fn pointwise_rank(basis: &CommutatorBasis, x: &[f64], rank_tol: f64) -> usize {
    rank(&basis.eval_all(x), rank_tol)
}

/// `min_x |Lambda_{p_x}(x, 1)|` over the sample.
pub fn nu_infimum(basis: &CommutatorBasis, sample: &[Vec<f64>], rank_tol: f64) -> Result<f64> {
    if sample.is_empty() {
        return Err(GeoError::invalid("sample must be nonempty"));
    }
    let mut best = f64::INFINITY;
    for x in sample {
        let p = pointwise_rank(basis, x, rank_tol);
        let v = if p == 0 {
            0.0
        } else {
            lambda_vector(basis, p, x, 1.0)?
        };
        best = best.min(v);
    }
    Ok(best)
}

/// Result of a maximal-tuple search.
#[derive(Clone, Debug)]
pub struct MaximalTuple {
    pub tuple: TupleIndex,
    /// `|Y_I(x)| r^{l(I)}`.
    pub value: f64,
    pub runner_up: Option<(TupleIndex, f64)>,
}

const TIE_REL: f64 = 1e-12;

/// Exhaustive search for the tuple maximizing `|Y_I| r^{l(I)}` over columns of `cols`.
/// Ties go to the smaller degree, then to the lexicographically first tuple.
pub fn select_max_volume(
    cols: &DMatrix<f64>,
    lengths: &[usize],
    p: usize,
    r: f64,
) -> (TupleIndex, f64, Option<(TupleIndex, f64)>) {
    let cands: Vec<(Vec<usize>, usize, f64)> = combinations(cols.ncols(), p)
        .into_iter()
        .map(|t| {
            let deg: usize = t.iter().map(|&i| lengths[i]).sum();
            let v = wedge_norm(&cols.select_columns(&t)) * r.powi(deg as i32);
            (t, deg, v)
        })
        .collect();
    let vmax = cands.iter().map(|e| e.2).fold(0.0, f64::max);
    let tol = TIE_REL * vmax;
    let pick = |skip: Option<usize>| -> Option<usize> {
        let mut best: Option<usize> = None;
        for (idx, c) in cands.iter().enumerate() {
            if Some(idx) == skip {
                continue;
            }
            best = match best {
                None => Some(idx),
                Some(b) => {
                    let cb = &cands[b];
                    if c.2 > cb.2 + tol || ((c.2 - cb.2).abs() <= tol && c.1 < cb.1) {
                        Some(idx)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    };
    let b = pick(None).expect("at least one tuple");
    let tuple = TupleIndex::new(cands[b].0.clone(), lengths).expect("valid combination");
    let runner = pick(Some(b)).map(|k| {
        (
            TupleIndex::new(cands[k].0.clone(), lengths).expect("valid"),
            cands[k].2,
        )
    });
    (tuple, cands[b].2, runner)
}

pub fn select_maximal_tuple(
    basis: &CommutatorBasis,
    x: &[f64],
    r: f64,
    rank_tol: f64,
) -> Result<MaximalTuple> {
    check_dim(basis.dim(), x.len())?;
    if r <= 0.0 {
        return Err(GeoError::invalid("radius must be positive"));
    }
    let cols = basis.eval_all(x);
    let p = rank(&cols, rank_tol);
    if p == 0 {
        return Err(GeoError::DegeneratePoint { point: x.to_vec() });
    }
    let (tuple, value, runner_up) = select_max_volume(&cols, &basis.lengths, p, r);
    Ok(MaximalTuple {
        tuple,
        value,
        runner_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::builtin;
    use crate::fields::{generate_commutators, DEFAULT_RANK_TOL};

    fn basis(name: &str) -> CommutatorBasis {
        generate_commutators(&builtin(name).unwrap())
    }

    #[test]
    fn orthonormal_pair() {
        let b = basis("euclid2in3");
        let t = TupleIndex::new(vec![0, 1], &b.lengths).unwrap();
        let w = wedge_components(&b, &t, &[0.5, 0.5, 0.5]).unwrap();
        assert_eq!(w.component(&[0, 1]), 1.0);
        assert_eq!(w.component(&[0, 2]), 0.0);
        assert_eq!(w.norm, 1.0);
    }

    #[test]
    fn grushin_wedges() {
        let b = basis("grushin");
        let t = TupleIndex::new(vec![0, 1], &b.lengths).unwrap();
        assert_eq!(wedge_components(&b, &t, &[0.0, 0.0]).unwrap().norm, 0.0);
        assert_eq!(wedge_components(&b, &t, &[2.0, 0.0]).unwrap().norm, 2.0);
    }

    #[test]
    fn tuple_validation() {
        assert!(TupleIndex::new(vec![1, 0], &[1, 1]).is_err());
        assert!(TupleIndex::new(vec![0, 5], &[1, 1]).is_err());
        assert!(TupleIndex::from_one_based(&[0, 1], &[1, 1]).is_err());
        let t = TupleIndex::from_one_based(&[1, 2, 3], &[1, 1, 2, 2]).unwrap();
        assert_eq!(t.degree(), 4);
        assert_eq!(t.to_string(), "(1,2,3)");
    }

    #[test]
    fn cramer_examples() {
        let b = basis("heisenberg");
        let x = [0.0; 3];
        let t = TupleIndex::new(vec![0, 1], &b.lengths).unwrap();
        let y1 = b.members[0].eval(&x);
        let y2 = b.members[1].eval(&x);
        let w: Vec<f64> = (0..3).map(|i| 2.0 * y1[i] + 3.0 * y2[i]).collect();
        let (xi, res) = cramer_coordinates(&b, &t, &x, &w, DEFAULT_RANK_TOL).unwrap();
        assert!((xi[0] - 2.0).abs() < 1e-14 && (xi[1] - 3.0).abs() < 1e-14);
        assert!(res < 1e-14);
        let (xi, _) = cramer_coordinates(&b, &t, &x, &y2, DEFAULT_RANK_TOL).unwrap();
        assert_eq!(xi, vec![0.0, 1.0]);

        let e = basis("euclid2in3");
        let err = cramer_coordinates(&e, &t, &x, &[0.0, 0.0, 1.0], DEFAULT_RANK_TOL).unwrap_err();
        assert!(matches!(err, GeoError::NotInSpan { .. }));
        let g = basis("grushin");
        let err =
            cramer_coordinates(&g, &t, &[0.0, 0.0], &[1.0, 0.0], DEFAULT_RANK_TOL).unwrap_err();
        assert!(matches!(err, GeoError::DegenerateTuple { .. }));
    }

    #[test]
    fn lambda_examples() {
        let e = basis("euclid2in3");
        assert!((lambda_vector(&e, 2, &[1.0, 2.0, 3.0], 1.0).unwrap() - 1.0).abs() < 1e-15);
        let h = basis("heisenberg");
        let v = lambda_vector(&h, 3, &[0.0; 3], 1.0).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-14);
        let a = lambda_vector(&h, 2, &[0.1, 0.2, 0.3], 0.3).unwrap();
        let b = lambda_vector(&h, 2, &[0.1, 0.2, 0.3], 0.6).unwrap();
        assert!(b >= a);
    }

    #[test]
    fn rank_examples() {
        assert_eq!(
            pointwise_rank(&basis("heisenberg"), &[0.4, 0.0, 1.0], 1e-8),
            3
        );
        let s = basis("shear");
        assert_eq!(pointwise_rank(&s, &[0.0, 0.0, 0.0], 1e-8), 1);
        assert_eq!(pointwise_rank(&s, &[0.0, 0.0, 1.0], 1e-8), 2);
        assert_eq!(pointwise_rank(&basis("grushin"), &[0.0, 0.0], 1e-8), 2);
    }

    #[test]
    fn nu_examples() {
        let e = basis("euclid2in3");
        let v = nu_infimum(&e, &[vec![0.0; 3], vec![1.0, -1.0, 2.0]], 1e-8).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        let g = basis("grushin");
        let v = nu_infimum(&g, &[vec![0.0, 0.0], vec![1.0, 0.0]], 1e-8).unwrap();
        assert!((v - 2f64.sqrt()).abs() < 1e-14);
        let x = vec![0.7, 0.1];
        let single = nu_infimum(&g, std::slice::from_ref(&x), 1e-8).unwrap();
        assert_eq!(single, lambda_vector(&g, 2, &x, 1.0).unwrap());
    }

    #[test]
    fn maximal_tuple_examples() {
        let g = basis("grushin");
        let a = select_maximal_tuple(&g, &[0.5, 0.0], 0.1, 1e-8).unwrap();
        assert_eq!(a.tuple.one_based(), vec![1, 2]);
        assert!((a.value - 0.005).abs() < 1e-15);
        let b = select_maximal_tuple(&g, &[0.001, 0.0], 0.1, 1e-8).unwrap();
        assert_eq!(b.tuple.one_based(), vec![1, 3]);
        let h = basis("heisenberg");
        let c = select_maximal_tuple(&h, &[0.0; 3], 0.37, 1e-8).unwrap();
        assert_eq!(c.tuple.one_based(), vec![1, 2, 3]);
        let (ru, rv) = c.runner_up.unwrap();
        assert_eq!(ru.one_based(), vec![1, 2, 4]);
        assert!((rv - c.value).abs() < 1e-15);
    }
}
