//! Vector fields, commutator families and structure constants.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{check_dim, GeoError, Result};
use crate::linalg::norm;
use crate::multilinear::{cramer_in_columns, select_max_volume, TupleIndex};
use crate::poly::Poly;

pub type FieldFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Optional closed-form structure constants `(i, j, k, x) -> c_ij^k(x)`, zero-based.
pub type ConstantsFn = Arc<dyn Fn(usize, usize, usize, &[f64]) -> f64 + Send + Sync>;

/// Step for Jacobians of bracket nodes and for nested derivative stencils.
pub const NESTED_FD_STEP: f64 = 1e-4;

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Clone)]
enum Kind {
    Poly {
        coeffs: Vec<Poly>,
        jac: Vec<Vec<Poly>>,
    },
    Closure(FieldFn),
    Bracket(Box<VectorField>, Box<VectorField>),
}

/// A vector field `f . grad` on R^n, tagged with the bracket word that produced it.
#[derive(Clone)]
pub struct VectorField {
    dim: usize,
    kind: Kind,
    word: Vec<usize>,
}

impl fmt::Debug for VectorField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            Kind::Poly { coeffs, .. } => {
                let parts: Vec<String> = coeffs.iter().map(|p| p.to_string()).collect();
                format!("poly[{}]", parts.join(", "))
            }
            Kind::Closure(_) => "closure".to_string(),
            Kind::Bracket(..) => "bracket".to_string(),
        };
        write!(
            f,
            "VectorField(dim={}, word={:?}, {})",
            self.dim, self.word, kind
        )
    }
}

fn central_step(xk: f64) -> f64 {
    1e-6f64.max(1e-6 * xk.abs())
}

impl VectorField {
    pub fn from_polys(coeffs: Vec<Poly>, word: Vec<usize>) -> Result<Self> {
        let dim = coeffs.len();
        if dim == 0 {
            return Err(GeoError::invalid(
                "vector field needs at least one coefficient",
            ));
        }
        if word.is_empty() {
            return Err(GeoError::invalid("bracket word must be nonempty"));
        }
        for p in &coeffs {
            check_dim(dim, p.nvars())?;
        }
        let jac = coeffs
            .iter()
            .map(|p| (0..dim).map(|k| p.derivative(k)).collect())
            .collect();
        Ok(VectorField {
            dim,
            kind: Kind::Poly { coeffs, jac },
            word,
        })
    }

    /// Parses coefficient expressions over `x1..xn`.
    pub fn parse(exprs: &[&str], word: Vec<usize>) -> Result<Self> {
        let n = exprs.len();
        let coeffs = exprs
            .iter()
            .map(|e| Poly::parse(e, n))
            .collect::<Result<Vec<_>>>()?;
        Self::from_polys(coeffs, word)
    }

    /// A field given only by its coefficient evaluator; Jacobians by central differences.
    pub fn from_fn(dim: usize, f: FieldFn, word: Vec<usize>) -> Self {
        VectorField {
            dim,
            kind: Kind::Closure(f),
            word,
        }
    }

    /// The bracket `[v, w]` as a numeric node (no symbolic form).
    pub fn numeric_bracket(v: &VectorField, w: &VectorField) -> Result<Self> {
        check_dim(v.dim, w.dim)?;
        let mut word = v.word.clone();
        word.extend_from_slice(&w.word);
        Ok(VectorField {
            dim: v.dim,
            kind: Kind::Bracket(Box::new(v.clone()), Box::new(w.clone())),
            word,
        })
    }

    /// The bracket `[v, w]` computed on polynomials; `None` unless both are polynomial.
    pub fn symbolic_bracket(v: &VectorField, w: &VectorField) -> Option<Self> {
        let (
            Kind::Poly {
                coeffs: fv,
                jac: jv,
            },
            Kind::Poly {
                coeffs: fw,
                jac: jw,
            },
        ) = (&v.kind, &w.kind)
        else {
            return None;
        };
        if v.dim != w.dim {
            return None;
        }
        let n = v.dim;
        let coeffs = (0..n)
            .map(|i| {
                let mut acc = Poly::zero(n);
                for k in 0..n {
                    acc = acc.add(&jw[i][k].mul(&fv[k])).sub(&jv[i][k].mul(&fw[k]));
                }
                acc
            })
            .collect();
        let mut word = v.word.clone();
        word.extend_from_slice(&w.word);
        VectorField::from_polys(coeffs, word).ok()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn word(&self) -> &[usize] {
        &self.word
    }

    pub fn length(&self) -> usize {
        self.word.len()
    }

    pub fn polys(&self) -> Option<&[Poly]> {
        match &self.kind {
            Kind::Poly { coeffs, .. } => Some(coeffs),
            _ => None,
        }
    }

    pub fn is_polynomial(&self) -> bool {
        matches!(self.kind, Kind::Poly { .. })
    }

    /// Same field, evaluated only through coefficient values and finite differences.
    pub fn to_numeric(&self) -> VectorField {
        match &self.kind {
            Kind::Poly { coeffs, .. } => {
                let c = coeffs.clone();
                let f: FieldFn = Arc::new(move |x: &[f64]| c.iter().map(|p| p.eval(x)).collect());
                VectorField::from_fn(self.dim, f, self.word.clone())
            }
            Kind::Closure(_) => self.clone(),
            Kind::Bracket(v, w) => VectorField {
                dim: self.dim,
                kind: Kind::Bracket(Box::new(v.to_numeric()), Box::new(w.to_numeric())),
                word: self.word.clone(),
            },
        }
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Poly { coeffs, .. } => {
                for (o, p) in out.iter_mut().zip(coeffs) {
                    *o = p.eval(x);
                }
            }
            Kind::Closure(f) => out.copy_from_slice(&f(x)),
            Kind::Bracket(v, w) => {
                let b = bracket_unchecked(v, w, x);
                out.copy_from_slice(&b);
            }
        }
    }

    /// `Df(x)` with entry `(i, k) = d f_i / d x_k`.
    pub fn jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        match &self.kind {
            Kind::Poly { jac, .. } => DMatrix::from_fn(n, n, |i, k| jac[i][k].eval(x)),
            Kind::Closure(_) => self.fd_jacobian(x, None),
            Kind::Bracket(..) => self.fd_jacobian(x, Some(NESTED_FD_STEP)),
        }
    }

    /// Central-difference Jacobian; `step = None` uses `max(1e-6, 1e-6|x_k|)`.
    pub fn fd_jacobian(&self, x: &[f64], step: Option<f64>) -> DMatrix<f64> {
        let n = self.dim;
        let mut m = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for k in 0..n {
            let h = step.unwrap_or_else(|| central_step(x[k]));
            xp[k] = x[k] + h;
            let fp = self.eval(&xp);
            xp[k] = x[k] - h;
            let fm = self.eval(&xp);
            xp[k] = x[k];
            for i in 0..n {
                m[(i, k)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        m
    }

    /// Euclidean norm of `D^alpha f(x)`, `alpha` given as a list of variable indices.
    pub fn derivative_norm(&self, alpha: &[usize], x: &[f64]) -> f64 {
        if let Kind::Poly { coeffs, .. } = &self.kind {
            let v: Vec<f64> = coeffs
                .iter()
                .map(|p| {
                    let mut d = p.clone();
                    for &a in alpha {
                        d = d.derivative(a);
                    }
                    d.eval(x)
                })
                .collect();
            return norm(&v);
        }
        norm(&nested_difference(self, alpha, x))
    }
}

fn nested_difference(f: &VectorField, alpha: &[usize], x: &[f64]) -> Vec<f64> {
    match alpha.split_first() {
        None => f.eval(x),
        Some((&v, rest)) => {
            let h = NESTED_FD_STEP;
            let mut xp = x.to_vec();
            xp[v] += h;
            let a = nested_difference(f, rest, &xp);
            xp[v] = x[v] - h;
            let b = nested_difference(f, rest, &xp);
            a.iter().zip(&b).map(|(p, m)| (p - m) / (2.0 * h)).collect()
        }
    }
}

fn bracket_unchecked(v: &VectorField, w: &VectorField, x: &[f64]) -> Vec<f64> {
    let fv = nalgebra::DVector::from_vec(v.eval(x));
    let fw = nalgebra::DVector::from_vec(w.eval(x));
    let r = nested_jacobian(w, x) * fv - nested_jacobian(v, x) * fw;
    r.iter().copied().collect()
}

/// Jacobian as used inside a bracket: the bracket is itself differenced again
/// whenever it is nested, so numeric leaves take the coarser nested step too.
fn nested_jacobian(f: &VectorField, x: &[f64]) -> DMatrix<f64> {
    match &f.kind {
        Kind::Poly { .. } => f.jacobian(x),
        _ => f.fd_jacobian(x, Some(NESTED_FD_STEP)),
    }
}

/// Coefficient vector of `[V, W]` at `x`: `DW(x) V(x) - DV(x) W(x)`.
pub fn bracket(v: &VectorField, w: &VectorField, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(v.dim, w.dim)?;
    check_dim(v.dim, x.len())?;
    Ok(bracket_unchecked(v, w, x))
}

/// A horizontal family together with its step and the box used for sup-norm grids.
#[derive(Clone, Debug)]
pub struct Family {
    pub name: String,
    pub horizontal: Vec<VectorField>,
    pub step: usize,
    pub domain_box: Vec<(f64, f64)>,
}

impl Family {
    pub fn new(
        name: impl Into<String>,
        horizontal: Vec<VectorField>,
        step: usize,
        domain_box: Vec<(f64, f64)>,
    ) -> Result<Self> {
        if horizontal.is_empty() {
            return Err(GeoError::invalid("family needs at least one field"));
        }
        if step == 0 {
            return Err(GeoError::invalid("step must be at least 1"));
        }
        let n = horizontal[0].dim();
        for f in &horizontal {
            check_dim(n, f.dim())?;
            if f.length() != 1 {
                return Err(GeoError::invalid("horizontal fields must have length 1"));
            }
        }
        check_dim(n, domain_box.len())?;
        if domain_box.iter().any(|(lo, hi)| !(lo < hi)) {
            return Err(GeoError::invalid("domain box sides must satisfy lo < hi"));
        }
        Ok(Family {
            name: name.into(),
            horizontal,
            step,
            domain_box,
        })
    }

    pub fn dim(&self) -> usize {
        self.horizontal[0].dim()
    }

    pub fn m(&self) -> usize {
        self.horizontal.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(&self.domain_box)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    /// Regular grid with `per_axis` nodes per side of the domain box.
    pub fn grid(&self, per_axis: usize) -> Vec<Vec<f64>> {
        box_grid(&self.domain_box, per_axis)
    }

    /// Same family with every field evaluated numerically.
    pub fn to_numeric(&self) -> Family {
        Family {
            name: self.name.clone(),
            horizontal: self.horizontal.iter().map(|f| f.to_numeric()).collect(),
            step: self.step,
            domain_box: self.domain_box.clone(),
        }
    }
}

pub fn box_grid(sides: &[(f64, f64)], per_axis: usize) -> Vec<Vec<f64>> {
    let n = sides.len();
    let k = per_axis.max(1);
    let total = k.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            (0..n)
                .map(|d| {
                    let i = idx % k;
                    idx /= k;
                    let (lo, hi) = sides[d];
                    if k == 1 {
                        0.5 * (lo + hi)
                    } else {
                        lo + (hi - lo) * i as f64 / (k - 1) as f64
                    }
                })
                .collect()
        })
        .collect()
}

/// The ordered commutator family `Y_1..Y_q` of a horizontal family.
#[derive(Clone)]
pub struct CommutatorBasis {
    pub members: Vec<VectorField>,
    pub lengths: Vec<usize>,
    pub m: usize,
    pub step: usize,
    pub domain_box: Vec<(f64, f64)>,
    pub analytic_constants: Option<ConstantsFn>,
}

impl fmt::Debug for CommutatorBasis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CommutatorBasis")
            .field("members", &self.members)
            .field("lengths", &self.lengths)
            .field("step", &self.step)
            .finish()
    }
}

impl CommutatorBasis {
    pub fn q(&self) -> usize {
        self.members.len()
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }

    pub fn horizontal(&self) -> &[VectorField] {
        &self.members[..self.m]
    }

    pub fn words(&self) -> Vec<Vec<usize>> {
        self.members.iter().map(|f| f.word().to_vec()).collect()
    }

    /// Index of the member with this word, if any.
    pub fn index_of(&self, word: &[usize]) -> Option<usize> {
        self.members.iter().position(|f| f.word() == word)
    }

    /// `n x q` matrix with columns `Y_j(x)`.
    pub fn eval_all(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, self.q());
        let mut buf = vec![0.0; n];
        for (j, f) in self.members.iter().enumerate() {
            f.eval_into(x, &mut buf);
            for i in 0..n {
                m[(i, j)] = buf[i];
            }
        }
        m
    }

    /// `n x p` matrix with columns `r^{l_j} Y_j(x)` for `j` in the tuple.
    pub fn eval_scaled(&self, tuple: &TupleIndex, x: &[f64], r: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, tuple.len());
        let mut buf = vec![0.0; n];
        for (c, &j) in tuple.indices().iter().enumerate() {
            self.members[j].eval_into(x, &mut buf);
            let s = r.powi(self.lengths[j] as i32);
            for i in 0..n {
                m[(i, c)] = s * buf[i];
            }
        }
        m
    }

    pub fn with_analytic_constants(mut self, c: ConstantsFn) -> Self {
        self.analytic_constants = Some(c);
        self
    }

    /// The same words generated from numerically evaluated horizontal fields.
    pub fn to_numeric(&self) -> CommutatorBasis {
        let hor: Vec<VectorField> = self.horizontal().iter().map(|f| f.to_numeric()).collect();
        let members = self
            .members
            .iter()
            .map(|f| numeric_word(&hor, f.word()))
            .collect();
        CommutatorBasis {
            members,
            lengths: self.lengths.clone(),
            m: self.m,
            step: self.step,
            domain_box: self.domain_box.clone(),
            analytic_constants: None,
        }
    }
}

fn numeric_word(hor: &[VectorField], word: &[usize]) -> VectorField {
    if word.len() == 1 {
        return hor[word[0]].clone();
    }
    let inner = numeric_word(hor, &word[1..]);
    VectorField::numeric_bracket(&hor[word[0]], &inner).expect("dimensions agree")
}

/// Words over `0..m` of length `1..=s` whose right-nested bracket is not trivially zero,
/// ordered by length then lexicographically.
///
/// A right-nested word whose last two letters coincide ends in `[X_a, X_a] = 0`,
/// so it is skipped; all other redundancies (such as `(2,1)` against `(1,2)`) are kept.
pub fn enumerate_words(m: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = Vec::new();
    let mut layer: Vec<Vec<usize>> = (0..m).map(|a| vec![a]).collect();
    for len in 1..=s {
        if len > 1 {
            let mut next = Vec::new();
            for w in &layer {
                for a in 0..m {
                    let mut v = Vec::with_capacity(len);
                    v.push(a);
                    v.extend_from_slice(w);
                    next.push(v);
                }
            }
            next.sort();
            layer = next;
        }
        for w in &layer {
            if w.len() >= 2 && w[w.len() - 1] == w[w.len() - 2] {
                continue;
            }
            out.push(w.clone());
        }
    }
    out
}

pub fn generate_commutators(fam: &Family) -> CommutatorBasis {
    let words = enumerate_words(fam.m(), fam.step);
    let mut members: Vec<VectorField> = Vec::with_capacity(words.len());
    for w in &words {
        let field = if w.len() == 1 {
            fam.horizontal[w[0]].clone()
        } else {
            let inner_idx = members
                .iter()
                .position(|f| f.word() == &w[1..])
                .expect("suffix word precedes its extension");
            let outer = &fam.horizontal[w[0]];
            let inner = &members[inner_idx];
            VectorField::symbolic_bracket(outer, inner)
                .unwrap_or_else(|| VectorField::numeric_bracket(outer, inner).expect("same dim"))
        };
        members.push(field);
    }
    CommutatorBasis {
        lengths: words.iter().map(|w| w.len()).collect(),
        members,
        m: fam.m(),
        step: fam.step,
        domain_box: fam.domain_box.clone(),
        analytic_constants: None,
    }
}

/// Structure constants `c_ij^k` at a point, relative to a chosen independent sub-tuple.
#[derive(Clone, Debug)]
pub struct StructureConstants {
    pub q: usize,
    /// Independent members used to express the brackets (zero-based).
    pub frame: Vec<usize>,
    values: Vec<f64>,
    /// Largest reconstruction residual over all pairs.
    pub residual: f64,
}

impl StructureConstants {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[(i * self.q + j) * self.q + k]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Bracket `[Y_i, Y_j](x)` for members of the basis.
pub fn member_bracket(basis: &CommutatorBasis, i: usize, j: usize, x: &[f64]) -> Vec<f64> {
    bracket_unchecked(&basis.members[i], &basis.members[j], x)
}

/// Independent sub-tuple used by [`structure_constants`]: the largest-volume
/// `p_x`-tuple at unit scale.
pub fn independent_frame(basis: &CommutatorBasis, x: &[f64], rank_tol: f64) -> Vec<usize> {
    let cols = basis.eval_all(x);
    let p = crate::linalg::rank(&cols, rank_tol);
    if p == 0 {
        return Vec::new();
    }
    select_max_volume(&cols, &basis.lengths, p, 1.0)
        .0
        .indices()
        .to_vec()
}

pub fn structure_constants(
    basis: &CommutatorBasis,
    x: &[f64],
    rank_tol: f64,
) -> Result<StructureConstants> {
    check_dim(basis.dim(), x.len())?;
    let frame = independent_frame(basis, x, rank_tol);
    structure_constants_in_frame(basis, x, &frame, rank_tol)
}

/// Structure constants with the independent sub-tuple held fixed.
pub fn structure_constants_in_frame(
    basis: &CommutatorBasis,
    x: &[f64],
    frame: &[usize],
    rank_tol: f64,
) -> Result<StructureConstants> {
    let q = basis.q();
    let n = basis.dim();
    let mut values = vec![0.0; q * q * q];
    let mut residual: f64 = 0.0;
    let cols = DMatrix::from_fn(n, frame.len(), |r, c| basis.members[frame[c]].eval(x)[r]);
    for i in 0..q {
        for j in 0..q {
            if i == j {
                continue;
            }
            if j < i {
                for k in 0..q {
                    values[(i * q + j) * q + k] = -values[(j * q + i) * q + k];
                }
                continue;
            }
            let b = member_bracket(basis, i, j, x);
            let bn = norm(&b);
            if let Some(ac) = &basis.analytic_constants {
                let mut rec = vec![0.0; n];
                for k in 0..q {
                    let c = ac(i, j, k, x);
                    values[(i * q + j) * q + k] = c;
                    crate::linalg::axpy(c, &basis.members[k].eval(x), &mut rec);
                }
                let res = crate::linalg::dist(&rec, &b);
                if res > rank_tol * bn + 1e-12 {
                    return Err(GeoError::NotInvolutive {
                        i,
                        j,
                        point: x.to_vec(),
                        residual: res,
                    });
                }
                residual = residual.max(res);
                continue;
            }
            if bn == 0.0 {
                continue;
            }
            let (xi, res) = if frame.is_empty() {
                (Vec::new(), bn)
            } else {
                cramer_in_columns(&cols, &b)
            };
            if res > rank_tol * bn + 1e-12 {
                return Err(GeoError::NotInvolutive {
                    i,
                    j,
                    point: x.to_vec(),
                    residual: res,
                });
            }
            residual = residual.max(res);
            for (c, &k) in frame.iter().enumerate() {
                values[(i * q + j) * q + k] = xi[c];
            }
        }
    }
    Ok(StructureConstants {
        q,
        frame: frame.to_vec(),
        values,
        residual,
    })
}

/// Linear combination of words, as (word, coefficient) pairs.
type WordSum = Vec<(Vec<usize>, f64)>;

fn add_word(acc: &mut WordSum, w: Vec<usize>, c: f64) {
    if let Some(e) = acc.iter_mut().find(|(v, _)| *v == w) {
        e.1 += c;
    } else {
        acc.push((w, c));
    }
}

/// Expands `[X_u, X_v]` into right-nested words using the Jacobi identity.
pub fn expand_bracket(u: &[usize], v: &[usize]) -> WordSum {
    let mut out: WordSum = Vec::new();
    if u.len() == 1 {
        let mut w = vec![u[0]];
        w.extend_from_slice(v);
        if !(w.len() >= 2 && w[w.len() - 1] == w[w.len() - 2]) {
            out.push((w, 1.0));
        }
        return out;
    }
    let (a, rest) = (u[0], &u[1..]);
    for (w, c) in expand_bracket(rest, v) {
        for (w2, c2) in expand_bracket(&[a], &w) {
            add_word(&mut out, w2, c * c2);
        }
    }
    let mut av = vec![a];
    av.extend_from_slice(v);
    if !(av.len() >= 2 && av[av.len() - 1] == av[av.len() - 2]) {
        for (w, c) in expand_bracket(rest, &av) {
            add_word(&mut out, w, -c);
        }
    }
    out.retain(|(_, c)| *c != 0.0);
    out
}

/// Scaled constants `c^_jk^i` with `[r^{l_j} Y_j, r^{l_k} Y_k] = sum_i c^_jk^i r^{l_i} Y_i`.
///
/// Returned in the same `(j, k, i)` layout as [`StructureConstants::get`].
pub fn scaled_structure_constants(
    basis: &CommutatorBasis,
    c: &StructureConstants,
    r: f64,
) -> Result<StructureConstants> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(GeoError::invalid(format!("radius {r} outside (0, 1]")));
    }
    let q = basis.q();
    let s = basis.step;
    let words = basis.words();
    let mut values = vec![0.0; q * q * q];
    for j in 0..q {
        for k in 0..q {
            let lj = basis.lengths[j];
            let lk = basis.lengths[k];
            if lj + lk <= s {
                for (w, coef) in expand_bracket(&words[j], &words[k]) {
                    if let Some(i) = words.iter().position(|v| *v == w) {
                        values[(j * q + k) * q + i] += coef;
                    }
                }
            } else {
                for i in 0..q {
                    let e = (lj + lk) as i32 - basis.lengths[i] as i32;
                    values[(j * q + k) * q + i] = r.powi(e) * c.get(j, k, i);
                }
            }
        }
    }
    Ok(StructureConstants {
        q,
        frame: c.frame.clone(),
        values,
        residual: c.residual,
    })
}

/// All multi-indices (as sorted variable lists) of order `1..=s` in `n` variables.
fn multi_indices(n: usize, s: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut layer: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..s {
        let mut next = Vec::new();
        for a in &layer {
            let start = a.last().copied().unwrap_or(0);
            for v in start..n {
                let mut b = a.clone();
                b.push(v);
                next.push(b);
            }
        }
        out.extend(next.iter().cloned());
        layer = next;
    }
    out
}

/// Step used for directional differences of structure constants.
const DIRECTIONAL_STEP: f64 = 1e-4;

/// Point reached by one RK4 step of length `t` along `f`.
fn rk4_step(f: &VectorField, x: &[f64], t: f64) -> Vec<f64> {
    let n = x.len();
    let k1 = f.eval(x);
    let mut y = x.to_vec();
    let shift = |y: &mut Vec<f64>, k: &[f64], a: f64| {
        for i in 0..n {
            y[i] = x[i] + a * k[i];
        }
    };
    shift(&mut y, &k1, 0.5 * t);
    let k2 = f.eval(&y);
    shift(&mut y, &k2, 0.5 * t);
    let k3 = f.eval(&y);
    shift(&mut y, &k3, t);
    let k4 = f.eval(&y);
    (0..n)
        .map(|i| x[i] + t / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// The constant `L_1`: sup-norm bounds on the horizontal coefficients and their
/// derivatives up to order `s`, plus sups of `|c_ij^l|` and `|Y_k c_ij^l|`.
pub fn admissible_constant_l1(
    fam: &Family,
    basis: &CommutatorBasis,
    grid: &[Vec<f64>],
) -> Result<f64> {
    if grid.is_empty() {
        return Err(GeoError::invalid("grid must be nonempty"));
    }
    let n = fam.dim();
    let q = basis.q();
    let mut alphas = vec![Vec::new()];
    alphas.extend(multi_indices(n, fam.step));
    let mut total = 0.0;
    for f in &fam.horizontal {
        for alpha in &alphas {
            let sup = grid
                .iter()
                .map(|x| f.derivative_norm(alpha, x))
                .fold(0.0, f64::max);
            total += sup;
        }
    }
    let mut sup_c = vec![0.0f64; q * q * q];
    let mut sup_dc = vec![0.0f64; q * q * q * q];
    for x in grid {
        let c0 = structure_constants(basis, x, DEFAULT_RANK_TOL)?;
        for (a, v) in c0.values().iter().enumerate() {
            sup_c[a] = sup_c[a].max(v.abs());
        }
        for k in 0..q {
            let h = DIRECTIONAL_STEP;
            let xp = rk4_step(&basis.members[k], x, h);
            let xm = rk4_step(&basis.members[k], x, -h);
            let cp = structure_constants_in_frame(basis, &xp, &c0.frame, DEFAULT_RANK_TOL)?;
            let cm = structure_constants_in_frame(basis, &xm, &c0.frame, DEFAULT_RANK_TOL)?;
            for a in 0..q * q * q {
                let d = (cp.values()[a] - cm.values()[a]) / (2.0 * h);
                sup_dc[a * q + k] = sup_dc[a * q + k].max(d.abs());
            }
        }
    }
    // the index sum runs over (i, j, k, l): each sup |c_ij^l| is counted once per k
    total += q as f64 * sup_c.iter().sum::<f64>();
    total += sup_dc.iter().sum::<f64>();
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::builtin;

    #[test]
    fn heisenberg_bracket_is_vertical() {
        let fam = builtin("heisenberg").unwrap();
        for x in [[0.0, 0.0, 0.0], [0.3, -1.2, 0.7]] {
            let b = bracket(&fam.horizontal[0], &fam.horizontal[1], &x).unwrap();
            assert!(crate::linalg::dist(&b, &[0.0, 0.0, 1.0]) < 1e-14);
        }
    }

    #[test]
    fn grushin_bracket_at_point() {
        let fam = builtin("grushin").unwrap();
        let b = bracket(&fam.horizontal[0], &fam.horizontal[1], &[2.0, 5.0]).unwrap();
        assert_eq!(b, vec![0.0, 1.0]);
    }

    #[test]
    fn self_bracket_vanishes() {
        let fam = builtin("martinet").unwrap();
        let b = bracket(&fam.horizontal[1], &fam.horizontal[1], &[0.4, 0.1, -0.3]).unwrap();
        assert!(norm(&b) == 0.0);
    }

    #[test]
    fn bracket_rejects_bad_dimension() {
        let fam = builtin("heisenberg").unwrap();
        let err = bracket(&fam.horizontal[0], &fam.horizontal[1], &[0.0, 0.0]).unwrap_err();
        assert!(matches!(err, GeoError::DimensionMismatch { .. }));
    }

    #[test]
    fn heisenberg_words() {
        let basis = generate_commutators(&builtin("heisenberg").unwrap());
        assert_eq!(
            basis.words(),
            vec![vec![0], vec![1], vec![0, 1], vec![1, 0]]
        );
        assert_eq!(basis.lengths, vec![1, 1, 2, 2]);
    }

    #[test]
    fn step_one_keeps_horizontal_only() {
        let mut fam = builtin("heisenberg").unwrap();
        fam.step = 1;
        let basis = generate_commutators(&fam);
        assert_eq!(basis.q(), 2);
    }

    #[test]
    fn martinet_has_constant_length_three_member() {
        let basis = generate_commutators(&builtin("martinet").unwrap());
        assert_eq!(basis.q(), 8);
        let i = basis.index_of(&[0, 0, 1]).unwrap();
        for x in [[0.0, 0.0, 0.0], [1.0, -0.5, 0.2]] {
            assert_eq!(basis.members[i].eval(&x), vec![0.0, 0.0, 2.0]);
        }
    }

    #[test]
    fn heisenberg_constants() {
        let basis = generate_commutators(&builtin("heisenberg").unwrap());
        let c = structure_constants(&basis, &[0.2, 0.1, -0.3], DEFAULT_RANK_TOL).unwrap();
        assert_eq!(c.frame, vec![0, 1, 2]);
        assert!((c.get(0, 1, 2) - 1.0).abs() < 1e-14);
        assert!((c.get(1, 0, 2) + 1.0).abs() < 1e-14);
        assert!((c.get(0, 3, 2)).abs() < 1e-14);
        assert!(c.residual < 1e-12);
    }

    #[test]
    fn commuting_families_have_zero_constants() {
        for (name, x) in [
            ("euclid2in3", vec![1.0, 2.0, 3.0]),
            ("shear", vec![0.0, 0.0, 1.0]),
        ] {
            let basis = generate_commutators(&builtin(name).unwrap());
            let c = structure_constants(&basis, &x, DEFAULT_RANK_TOL).unwrap();
            assert_eq!(c.max_abs(), 0.0);
            assert_eq!(c.residual, 0.0);
        }
    }

    #[test]
    fn non_involutive_family_is_reported() {
        let x1 = VectorField::parse(&["1", "0", "0"], vec![0]).unwrap();
        let x2 = VectorField::parse(&["0", "1", "x1"], vec![1]).unwrap();
        let fam = Family::new("contact", vec![x1, x2], 1, vec![(-1.0, 1.0); 3]).unwrap();
        let basis = generate_commutators(&fam);
        let err = structure_constants(&basis, &[0.0, 0.0, 0.0], DEFAULT_RANK_TOL).unwrap_err();
        assert!(matches!(err, GeoError::NotInvolutive { i: 0, j: 1, .. }));
    }

    #[test]
    fn jacobi_expansion_of_length_two_pair() {
        // [[X1,X2],X1] = [X1,[X2,X1]]
        let e = expand_bracket(&[0, 1], &[0]);
        assert_eq!(e, vec![(vec![0, 1, 0], 1.0)]);
        let e = expand_bracket(&[0], &[1]);
        assert_eq!(e, vec![(vec![0, 1], 1.0)]);
    }

    #[test]
    fn heisenberg_scaled_constants() {
        let basis = generate_commutators(&builtin("heisenberg").unwrap());
        let c = structure_constants(&basis, &[0.0; 3], DEFAULT_RANK_TOL).unwrap();
        let ch = scaled_structure_constants(&basis, &c, 0.5).unwrap();
        assert_eq!(ch.get(0, 1, 2), 1.0);
        assert_eq!(ch.get(1, 0, 3), 1.0);
        assert!(scaled_structure_constants(&basis, &c, 1.5).is_err());
    }

    #[test]
    fn scaled_identity_holds() {
        for name in ["heisenberg", "grushin", "martinet"] {
            let fam = builtin(name).unwrap();
            let basis = generate_commutators(&fam);
            let x: Vec<f64> = (0..fam.dim()).map(|i| 0.3 - 0.2 * i as f64).collect();
            let c = structure_constants(&basis, &x, DEFAULT_RANK_TOL).unwrap();
            for r in [1.0, 0.5, 0.1] {
                let ch = scaled_structure_constants(&basis, &c, r).unwrap();
                let q = basis.q();
                for j in 0..q {
                    for k in 0..q {
                        let lj = basis.lengths[j] as i32;
                        let lk = basis.lengths[k] as i32;
                        let lhs: Vec<f64> = member_bracket(&basis, j, k, &x)
                            .iter()
                            .map(|v| v * r.powi(lj + lk))
                            .collect();
                        let mut rhs = vec![0.0; fam.dim()];
                        for i in 0..q {
                            let s = ch.get(j, k, i) * r.powi(basis.lengths[i] as i32);
                            crate::linalg::axpy(s, &basis.members[i].eval(&x), &mut rhs);
                        }
                        assert!(crate::linalg::dist(&lhs, &rhs) < 1e-6, "{name} {j} {k} {r}");
                    }
                }
            }
        }
    }

    #[test]
    fn l1_examples() {
        let fam = builtin("euclid2in3").unwrap();
        let basis = generate_commutators(&fam);
        let grid = box_grid(&[(-1.0, 1.0); 3], 3);
        assert!((admissible_constant_l1(&fam, &basis, &grid).unwrap() - 2.0).abs() < 1e-12);

        let fam = builtin("heisenberg").unwrap();
        let basis = generate_commutators(&fam);
        let coarse = box_grid(&[(-1.0, 1.0); 3], 2);
        let fine = box_grid(&[(-1.0, 1.0); 3], 3);
        let a = admissible_constant_l1(&fam, &basis, &coarse).unwrap();
        let b = admissible_constant_l1(&fam, &basis, &fine).unwrap();
        assert!(a.is_finite() && b >= a - 1e-12);
        assert!(admissible_constant_l1(&fam, &basis, &[]).is_err());
    }

    #[test]
    fn grushin_l1_zero_order_term() {
        let fam = builtin("grushin").unwrap();
        let grid = fam.grid(5);
        let sup = grid
            .iter()
            .map(|x| fam.horizontal[1].derivative_norm(&[], x))
            .fold(0.0, f64::max);
        assert_eq!(sup, 2.0);
    }

    #[test]
    fn numeric_route_matches_symbolic() {
        let basis = generate_commutators(&builtin("martinet").unwrap());
        let num = basis.to_numeric();
        let x = [0.3, -0.7, 1.1];
        for j in 0..basis.q() {
            let a = basis.members[j].eval(&x);
            let b = num.members[j].eval(&x);
            assert!(
                crate::linalg::dist(&a, &b) <= 1e-6 * norm(&a).max(1.0),
                "member {j}"
            );
        }
    }
}
