//! Real vectors, hyperintervals, linear predicates and the interval transformers
//! the verifier is built from.
//!
//! Vectors are plain `Vec<f64>` / `&[f64]`. A [`Hyperbox`] is a product of closed
//! intervals, with a distinguished empty element that is the identity of
//! [`Hyperbox::join`]. All box-valued transformers round outward by
//! [`FP_SLACK`] so that the concrete image of any point provably lands inside
//! the computed box despite floating-point rounding.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Outward rounding applied to every computed lower/upper bound.
pub const FP_SLACK: f64 = 1e-9;

/// Three-valued result of evaluating a predicate over a set of states.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tri {
    True,
    False,
    Unknown,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Axis-aligned hyperinterval `[lo, hi]`, or the empty set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BoxRepr", into = "BoxRepr")]
pub struct Hyperbox {
    lo: Vec<f64>,
    hi: Vec<f64>,
    empty: bool,
}

#[derive(Serialize, Deserialize)]
struct BoxRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lo: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    hi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    empty: Option<usize>,
}

impl TryFrom<BoxRepr> for Hyperbox {
    type Error = Error;

    fn try_from(r: BoxRepr) -> Result<Self> {
        match (r.lo, r.hi, r.empty) {
            (None, None, Some(dim)) => Ok(Hyperbox::empty(dim)),
            (Some(lo), Some(hi), None) => Hyperbox::new(lo, hi),
            _ => Err(Error::InvalidBox(
                "expected either {lo, hi} or {empty: dim}".into(),
            )),
        }
    }
}

impl From<Hyperbox> for BoxRepr {
    fn from(b: Hyperbox) -> Self {
        if b.empty {
            BoxRepr {
                lo: None,
                hi: None,
                empty: Some(b.lo.len()),
            }
        } else {
            BoxRepr {
                lo: Some(b.lo),
                hi: Some(b.hi),
                empty: None,
            }
        }
    }
}

impl Hyperbox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        if lo.is_empty() {
            return Err(Error::InvalidBox("dimension must be at least 1".into()));
        }
        if !all_finite(&lo) || !all_finite(&hi) {
            return Err(Error::NonFinite("box bounds"));
        }
        if let Some(k) = (0..lo.len()).find(|&k| lo[k] > hi[k]) {
            return Err(Error::InvalidBox(format!(
                "lo[{k}] = {} exceeds hi[{k}] = {}",
                lo[k], hi[k]
            )));
        }
        Ok(Hyperbox {
            lo,
            hi,
            empty: false,
        })
    }

    pub fn point(x: &[f64]) -> Self {
        Hyperbox {
            lo: x.to_vec(),
            hi: x.to_vec(),
            empty: false,
        }
    }

    pub fn empty(dim: usize) -> Self {
        Hyperbox {
            lo: vec![0.0; dim],
            hi: vec![0.0; dim],
            empty: true,
        }
    }

    /// Builds a box from per-axis `(lo, hi)` pairs. Panics on invalid input;
    /// meant for literals.
    pub fn from_bounds(bounds: &[(f64, f64)]) -> Self {
        let lo = bounds.iter().map(|b| b.0).collect();
        let hi = bounds.iter().map(|b| b.1).collect();
        Hyperbox::new(lo, hi).expect("invalid box literal")
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn width(&self, k: usize) -> f64 {
        if self.empty {
            0.0
        } else {
            self.hi[k] - self.lo[k]
        }
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| 0.5 * (l + h))
            .collect()
    }

    /// Index of the widest axis (lowest index on ties).
    pub fn longest_axis(&self) -> usize {
        (0..self.dim()).fold(0, |best, k| {
            if self.width(k) > self.width(best) {
                k
            } else {
                best
            }
        })
    }

    pub fn contains_point(&self, x: &[f64]) -> bool {
        !self.empty
            && x.len() == self.dim()
            && x.iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn contains_box(&self, other: &Hyperbox) -> bool {
        if other.empty {
            return true;
        }
        !self.empty
            && (0..self.dim()).all(|k| self.lo[k] <= other.lo[k] && other.hi[k] <= self.hi[k])
    }

    pub fn intersects(&self, other: &Hyperbox) -> bool {
        !self.empty
            && !other.empty
            && (0..self.dim()).all(|k| self.lo[k] <= other.hi[k] && other.lo[k] <= self.hi[k])
    }

    /// Least upper bound: the smallest box containing both operands.
    pub fn join(&self, other: &Hyperbox) -> Result<Hyperbox> {
        check_dim(self.dim(), other.dim())?;
        if self.empty {
            return Ok(other.clone());
        }
        if other.empty {
            return Ok(self.clone());
        }
        let lo = self
            .lo
            .iter()
            .zip(&other.lo)
            .map(|(a, b)| a.min(*b))
            .collect();
        let hi = self
            .hi
            .iter()
            .zip(&other.hi)
            .map(|(a, b)| a.max(*b))
            .collect();
        Ok(Hyperbox {
            lo,
            hi,
            empty: false,
        })
    }

    /// Intersection; empty as soon as one axis is empty.
    pub fn meet(&self, other: &Hyperbox) -> Result<Hyperbox> {
        check_dim(self.dim(), other.dim())?;
        if self.empty || other.empty {
            return Ok(Hyperbox::empty(self.dim()));
        }
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for k in 0..self.dim() {
            let l = self.lo[k].max(other.lo[k]);
            let h = self.hi[k].min(other.hi[k]);
            if l > h {
                return Ok(Hyperbox::empty(self.dim()));
            }
            lo.push(l);
            hi.push(h);
        }
        Ok(Hyperbox {
            lo,
            hi,
            empty: false,
        })
    }

    /// Image of the box under per-axis clipping into `bounds`. Unlike `meet`
    /// this never loses points: everything outside is projected onto the border.
    pub fn clamp_into(&self, bounds: &Hyperbox) -> Result<Hyperbox> {
        check_dim(bounds.dim(), self.dim())?;
        if self.empty {
            return Ok(self.clone());
        }
        let clamp = |v: f64, k: usize| v.clamp(bounds.lo[k], bounds.hi[k]);
        Ok(Hyperbox {
            lo: (0..self.dim()).map(|k| clamp(self.lo[k], k)).collect(),
            hi: (0..self.dim()).map(|k| clamp(self.hi[k], k)).collect(),
            empty: false,
        })
    }

    /// Concatenation `[self; other]` of two boxes.
    pub fn product(&self, other: &Hyperbox) -> Hyperbox {
        let dim = self.dim() + other.dim();
        if self.empty || other.empty {
            return Hyperbox::empty(dim);
        }
        Hyperbox {
            lo: self.lo.iter().chain(&other.lo).copied().collect(),
            hi: self.hi.iter().chain(&other.hi).copied().collect(),
            empty: false,
        }
    }

    /// Componentwise sum (Minkowski sum of boxes).
    pub fn add(&self, other: &Hyperbox) -> Result<Hyperbox> {
        check_dim(self.dim(), other.dim())?;
        if self.empty || other.empty {
            return Ok(Hyperbox::empty(self.dim()));
        }
        Ok(Hyperbox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a + b).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a + b).collect(),
            empty: false,
        })
    }

    /// Sum of widths, each normalised by the matching width of `scale`.
    pub fn normalized_size(&self, scale: &Hyperbox) -> f64 {
        if self.empty {
            return 0.0;
        }
        (0..self.dim())
            .map(|k| self.width(k) / scale.width(k).max(f64::MIN_POSITIVE))
            .sum()
    }

    /// Returns copies of the box with axis `k` restricted to `[lo, mid]` and
    /// `[mid, hi]`.
    pub fn bisect(&self, k: usize) -> (Hyperbox, Hyperbox) {
        let mid = 0.5 * (self.lo[k] + self.hi[k]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.hi[k] = mid;
        right.lo[k] = mid;
        (left, right)
    }

    pub(crate) fn with_axis(&self, k: usize, lo: f64, hi: f64) -> Hyperbox {
        let mut b = self.clone();
        b.lo[k] = lo;
        b.hi[k] = hi;
        if lo > hi {
            return Hyperbox::empty(self.dim());
        }
        b
    }

    /// Draws a point uniformly from the box.
    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&l, &h)| if h > l { rng.random_range(l..=h) } else { l })
            .collect()
    }
}

/// Half-space `w·x ≤ b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredRepr")]
pub struct LinPred {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Deserialize)]
struct PredRepr {
    w: Vec<f64>,
    b: f64,
}

impl TryFrom<PredRepr> for LinPred {
    type Error = Error;

    fn try_from(r: PredRepr) -> Result<Self> {
        LinPred::new(r.w, r.b)
    }
}

impl LinPred {
    pub fn new(w: Vec<f64>, b: f64) -> Result<Self> {
        if !all_finite(&w) || !b.is_finite() {
            return Err(Error::NonFinite("linear predicate"));
        }
        if w.is_empty() || w.iter().all(|x| *x == 0.0) {
            return Err(Error::ZeroNormal);
        }
        Ok(LinPred { w, b })
    }

    /// `x[axis] ≤ bound`
    pub fn axis_le(dim: usize, axis: usize, bound: f64) -> Self {
        let mut w = vec![0.0; dim];
        w[axis] = 1.0;
        LinPred { w, b: bound }
    }

    /// `x[axis] ≥ bound`, encoded as `-x[axis] ≤ -bound`.
    pub fn axis_ge(dim: usize, axis: usize, bound: f64) -> Self {
        let mut w = vec![0.0; dim];
        w[axis] = -1.0;
        LinPred { w, b: -bound }
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    pub fn holds(&self, x: &[f64]) -> bool {
        dot(&self.w, x) <= self.b
    }

    /// `Some((k, w_k))` when the normal has exactly one nonzero entry.
    pub fn axis(&self) -> Option<(usize, f64)> {
        let mut nz = self.w.iter().enumerate().filter(|(_, v)| **v != 0.0);
        let first = nz.next()?;
        if nz.next().is_some() {
            None
        } else {
            Some((first.0, *first.1))
        }
    }

    /// Range of `w·x` over a nonempty box, by corner selection.
    pub fn range_over(&self, bx: &Hyperbox) -> Result<(f64, f64)> {
        check_dim(self.dim(), bx.dim())?;
        let (mut lo, mut hi) = (0.0, 0.0);
        for (k, &wk) in self.w.iter().enumerate() {
            let (a, b) = (wk * bx.lo[k], wk * bx.hi[k]);
            lo += a.min(b);
            hi += a.max(b);
        }
        Ok((lo, hi))
    }

    /// Sound evaluation over a box: `True` iff every point satisfies the
    /// predicate, `False` iff none does.
    pub fn eval_box(&self, bx: &Hyperbox) -> Result<Tri> {
        check_dim(self.dim(), bx.dim())?;
        if bx.is_empty() {
            return Ok(Tri::Unknown);
        }
        let (lo, hi) = self.range_over(bx)?;
        if hi + FP_SLACK <= self.b {
            Ok(Tri::True)
        } else if lo - FP_SLACK > self.b {
            Ok(Tri::False)
        } else {
            Ok(Tri::Unknown)
        }
    }
}

/// Conjunction `(⋀ positive) ∧ ⋀_j ¬(⋀ negated[j])`.
///
/// Each negated entry is a conjunction of predicates that must not hold
/// simultaneously. Single-predicate entries are the common case and are what
/// `meet_box` can tighten against; longer ones arise from negating split guards.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Region {
    #[serde(default)]
    pub positive: Vec<LinPred>,
    #[serde(default)]
    pub negated: Vec<Vec<LinPred>>,
}

impl Region {
    /// The whole space.
    pub fn all() -> Self {
        Region::default()
    }

    pub fn from_preds(positive: Vec<LinPred>) -> Self {
        Region {
            positive,
            negated: Vec::new(),
        }
    }

    /// Adds `¬(⋀ conj)`, dropping conjuncts already implied by the positive part.
    pub fn and_not(mut self, conj: &[LinPred]) -> Self {
        let rest: Vec<LinPred> = conj
            .iter()
            .filter(|p| !self.positive.contains(p))
            .cloned()
            .collect();
        self.negated.push(rest);
        self
    }

    pub fn and(mut self, p: LinPred) -> Self {
        self.positive.push(p);
        self
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.positive.iter().all(|p| p.holds(x))
            && self
                .negated
                .iter()
                .all(|conj| !conj.iter().all(|p| p.holds(x)))
    }

    /// Sound three-valued evaluation of membership over a box.
    pub fn eval_box(&self, bx: &Hyperbox) -> Result<Tri> {
        if bx.is_empty() {
            return Ok(Tri::False);
        }
        let mut all_true = true;
        for p in &self.positive {
            match p.eval_box(bx)? {
                Tri::False => return Ok(Tri::False),
                Tri::Unknown => all_true = false,
                Tri::True => {}
            }
        }
        for conj in &self.negated {
            // ¬(⋀ conj) is False iff every conjunct is True on the box.
            let mut conj_all_true = true;
            let mut conj_some_false = false;
            for p in conj {
                match p.eval_box(bx)? {
                    Tri::False => conj_some_false = true,
                    Tri::Unknown => conj_all_true = false,
                    Tri::True => {}
                }
            }
            if conj_all_true && !conj_some_false {
                return Ok(Tri::False);
            }
            if !conj_some_false {
                all_true = false;
            }
        }
        Ok(if all_true { Tri::True } else { Tri::Unknown })
    }

    /// A sub-box of `bx` containing `self ∩ bx`. Axis-aligned constraints are
    /// applied exactly; general ones only prune the box when they are provably
    /// violated on all of it.
    pub fn meet_box(&self, bx: &Hyperbox) -> Result<Hyperbox> {
        if bx.is_empty() {
            return Ok(bx.clone());
        }
        if self.eval_box(bx)? == Tri::False {
            return Ok(Hyperbox::empty(bx.dim()));
        }
        let mut out = bx.clone();
        for p in &self.positive {
            check_dim(p.dim(), bx.dim())?;
            if let Some((k, wk)) = p.axis() {
                let q = axis_quotient(p.b, wk);
                if wk > 0.0 {
                    out.hi[k] = out.hi[k].min(q);
                } else {
                    out.lo[k] = out.lo[k].max(q);
                }
            }
        }
        for conj in &self.negated {
            if let [p] = conj.as_slice() {
                check_dim(p.dim(), bx.dim())?;
                if let Some((k, wk)) = p.axis() {
                    let q = axis_quotient(p.b, wk);
                    // ¬(w_k x_k ≤ b): closure of the strict half-line.
                    if wk > 0.0 {
                        out.lo[k] = out.lo[k].max(q);
                    } else {
                        out.hi[k] = out.hi[k].min(q);
                    }
                }
            }
        }
        if (0..out.dim()).any(|k| out.lo[k] > out.hi[k]) {
            return Ok(Hyperbox::empty(bx.dim()));
        }
        Ok(out)
    }
}

/// `b / w` rounded so the half-line it bounds is never cut short.
fn axis_quotient(b: f64, w: f64) -> f64 {
    let q = b / w;
    if w.abs() == 1.0 {
        q
    } else if w > 0.0 {
        q + FP_SLACK
    } else {
        q - FP_SLACK
    }
}

/// `x ↦ Mx + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineMap {
    #[serde(rename = "K")]
    pub matrix: Vec<Vec<f64>>,
    #[serde(rename = "c")]
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn new(matrix: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let m = AffineMap { matrix, bias };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.matrix.len(), self.bias.len())?;
        let n = self.in_dim();
        for row in &self.matrix {
            check_dim(n, row.len())?;
            if !all_finite(row) {
                return Err(Error::NonFinite("affine map"));
            }
        }
        if !all_finite(&self.bias) {
            return Err(Error::NonFinite("affine map"));
        }
        Ok(())
    }

    /// Constant map ignoring its `in_dim` inputs.
    pub fn constant(in_dim: usize, value: Vec<f64>) -> Self {
        AffineMap {
            matrix: vec![vec![0.0; in_dim]; value.len()],
            bias: value,
        }
    }

    pub fn identity(dim: usize) -> Self {
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        AffineMap {
            matrix,
            bias: vec![0.0; dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.matrix.first().map_or(0, |r| r.len())
    }

    pub fn out_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.bias)
            .map(|(row, c)| dot(row, x) + c)
            .collect()
    }

    /// Parameters flattened as `[K row-major, c]`.
    pub fn params(&self) -> Vec<f64> {
        self.matrix
            .iter()
            .flatten()
            .chain(&self.bias)
            .copied()
            .collect()
    }

    pub fn from_params(out_dim: usize, in_dim: usize, theta: &[f64]) -> Self {
        assert_eq!(theta.len(), out_dim * in_dim + out_dim);
        let matrix = (0..out_dim)
            .map(|i| theta[i * in_dim..(i + 1) * in_dim].to_vec())
            .collect();
        AffineMap {
            matrix,
            bias: theta[out_dim * in_dim..].to_vec(),
        }
    }

    /// Tightest box containing the image of `bx`, rounded outward by `slack`.
    pub fn image_with_slack(&self, bx: &Hyperbox, slack: f64) -> Result<Hyperbox> {
        check_dim(self.in_dim(), bx.dim())?;
        if bx.is_empty() {
            return Ok(Hyperbox::empty(self.out_dim()));
        }
        let mut lo = Vec::with_capacity(self.out_dim());
        let mut hi = Vec::with_capacity(self.out_dim());
        for (row, c) in self.matrix.iter().zip(&self.bias) {
            let (mut l, mut h) = (*c, *c);
            for (k, &m) in row.iter().enumerate() {
                let (a, b) = (m * bx.lo[k], m * bx.hi[k]);
                if a <= b {
                    l += a;
                    h += b;
                } else {
                    l += b;
                    h += a;
                }
            }
            lo.push(l - slack);
            hi.push(h + slack);
        }
        Ok(Hyperbox {
            lo,
            hi,
            empty: false,
        })
    }

    pub fn image(&self, bx: &Hyperbox) -> Result<Hyperbox> {
        self.image_with_slack(bx, FP_SLACK)
    }
}

/// Elementwise interval `[lo, hi]` of `m × n` matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalMatrix {
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
}

impl IntervalMatrix {
    pub fn new(lo: Vec<Vec<f64>>, hi: Vec<Vec<f64>>) -> Result<Self> {
        check_dim(lo.len(), hi.len())?;
        for (rl, rh) in lo.iter().zip(&hi) {
            check_dim(rl.len(), rh.len())?;
            if rl
                .iter()
                .zip(rh)
                .any(|(a, b)| !matches!(a.partial_cmp(b), Some(Ordering::Less | Ordering::Equal)))
            {
                return Err(Error::InvalidBox("interval matrix has lo > hi".into()));
            }
        }
        Ok(IntervalMatrix { lo, hi })
    }

    pub fn degenerate(m: &[Vec<f64>]) -> Self {
        IntervalMatrix {
            lo: m.to_vec(),
            hi: m.to_vec(),
        }
    }

    pub fn contains(&self, m: &[Vec<f64>]) -> bool {
        self.lo.len() == m.len()
            && self.lo.iter().zip(&self.hi).zip(m).all(|((rl, rh), r)| {
                rl.len() == r.len()
                    && r.iter()
                        .zip(rl.iter().zip(rh))
                        .all(|(v, (l, h))| *l <= *v && *v <= *h)
            })
    }

    pub fn rows(&self) -> usize {
        self.lo.len()
    }

    pub fn cols(&self) -> usize {
        self.lo.first().map_or(0, |r| r.len())
    }

    /// Sound box containing `{Kx + c : K ∈ self, c ∈ bias, x ∈ bx}`.
    pub fn image(&self, bias: &Hyperbox, bx: &Hyperbox) -> Result<Hyperbox> {
        check_dim(self.cols(), bx.dim())?;
        check_dim(self.rows(), bias.dim())?;
        if bx.is_empty() || bias.is_empty() {
            return Ok(Hyperbox::empty(self.rows()));
        }
        let mut lo = Vec::with_capacity(self.rows());
        let mut hi = Vec::with_capacity(self.rows());
        for i in 0..self.rows() {
            let (mut l, mut h) = (bias.lo[i], bias.hi[i]);
            for k in 0..self.cols() {
                let (pl, ph) = interval_mul((self.lo[i][k], self.hi[i][k]), (bx.lo[k], bx.hi[k]));
                l += pl;
                h += ph;
            }
            lo.push(l - FP_SLACK);
            hi.push(h + FP_SLACK);
        }
        Ok(Hyperbox {
            lo,
            hi,
            empty: false,
        })
    }
}

fn interval_mul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    let p = [a.0 * b.0, a.0 * b.1, a.1 * b.0, a.1 * b.1];
    let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b1(lo: f64, hi: f64) -> Hyperbox {
        Hyperbox::from_bounds(&[(lo, hi)])
    }

    fn close_box(a: &Hyperbox, lo: &[f64], hi: &[f64], tol: f64) -> bool {
        a.lo()
            .iter()
            .zip(lo)
            .chain(a.hi().iter().zip(hi))
            .all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn join_examples() {
        assert_eq!(b1(0.0, 1.0).join(&b1(2.0, 3.0)).unwrap(), b1(0.0, 3.0));
        assert_eq!(
            b1(0.0, 1.0).join(&Hyperbox::empty(1)).unwrap(),
            b1(0.0, 1.0)
        );
        let a = Hyperbox::from_bounds(&[(0.0, 1.0), (0.0, 1.0)]);
        let b = Hyperbox::from_bounds(&[(-1.0, 0.0), (2.0, 3.0)]);
        assert_eq!(
            a.join(&b).unwrap(),
            Hyperbox::from_bounds(&[(-1.0, 1.0), (0.0, 3.0)])
        );
        assert!(a.join(&b1(0.0, 1.0)).is_err());
    }

    #[test]
    fn meet_examples() {
        assert_eq!(b1(0.0, 2.0).meet(&b1(1.0, 3.0)).unwrap(), b1(1.0, 2.0));
        assert!(b1(0.0, 1.0).meet(&b1(2.0, 3.0)).unwrap().is_empty());
        let b = b1(-0.5, 4.0);
        assert_eq!(b.meet(&b).unwrap(), b);
        assert!(b.meet(&Hyperbox::empty(2)).is_err());
    }

    #[test]
    fn empty_is_distinct() {
        let e = Hyperbox::empty(1);
        assert!(e.is_empty());
        assert_ne!(e, b1(0.0, 0.0));
        assert!(!e.contains_point(&[0.0]));
    }

    #[test]
    fn box_constructor_rejects_bad_input() {
        assert!(Hyperbox::new(vec![1.0], vec![0.0]).is_err());
        assert!(Hyperbox::new(vec![], vec![]).is_err());
        assert!(Hyperbox::new(vec![f64::NAN], vec![0.0]).is_err());
        assert!(Hyperbox::new(vec![0.0, 1.0], vec![1.0]).is_err());
    }

    #[test]
    fn affine_image_examples() {
        let f = AffineMap::new(vec![vec![2.0]], vec![1.0]).unwrap();
        let out = f.image_with_slack(&b1(0.0, 1.0), 0.0).unwrap();
        assert_eq!(out, b1(1.0, 3.0));

        let b = Hyperbox::from_bounds(&[(-1.0, 2.0), (3.0, 4.5)]);
        assert_eq!(AffineMap::identity(2).image_with_slack(&b, 0.0).unwrap(), b);

        let diff = AffineMap::new(vec![vec![1.0, -1.0]], vec![0.0]).unwrap();
        let unit = Hyperbox::from_bounds(&[(0.0, 1.0), (0.0, 1.0)]);
        assert_eq!(diff.image_with_slack(&unit, 0.0).unwrap(), b1(-1.0, 1.0));

        // Default transformer rounds outward.
        let out = f.image(&b1(0.0, 1.0)).unwrap();
        assert!(out.lo()[0] < 1.0 && out.hi()[0] > 3.0);
        assert!(close_box(&out, &[1.0], &[3.0], 2.0 * FP_SLACK));
    }

    #[test]
    fn interval_affine_image_examples() {
        let k = IntervalMatrix::new(vec![vec![1.0]], vec![vec![2.0]]).unwrap();
        let out = k.image(&b1(0.0, 0.0), &b1(1.0, 1.0)).unwrap();
        assert!(close_box(&out, &[1.0], &[2.0], 2.0 * FP_SLACK));

        let k = IntervalMatrix::new(vec![vec![-1.0]], vec![vec![1.0]]).unwrap();
        let out = k.image(&b1(0.0, 0.0), &b1(-1.0, 1.0)).unwrap();
        assert!(close_box(&out, &[-1.0], &[1.0], 2.0 * FP_SLACK));

        let k = IntervalMatrix::new(vec![vec![0.5]], vec![vec![1.5]]).unwrap();
        let out = k.image(&b1(-0.1, 0.1), &b1(2.0, 3.0)).unwrap();
        assert!(close_box(&out, &[0.9], &[4.6], 1e-8));

        assert!(k.image(&b1(0.0, 0.0), &Hyperbox::empty(2)).is_err());
        assert!(IntervalMatrix::new(vec![vec![1.0]], vec![vec![0.0]]).is_err());
    }

    #[test]
    fn interval_affine_image_matches_grid_oracle() {
        // Brute force over a 100^3 grid of (K, c, x).
        let k = IntervalMatrix::new(vec![vec![0.5]], vec![vec![1.5]]).unwrap();
        let out = k.image(&b1(-0.1, 0.1), &b1(2.0, 3.0)).unwrap();
        let lin = |lo: f64, hi: f64, i: usize| lo + (hi - lo) * i as f64 / 99.0;
        let (mut mn, mut mx) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..100 {
            for j in 0..100 {
                for l in 0..100 {
                    let y = lin(0.5, 1.5, i) * lin(2.0, 3.0, l) + lin(-0.1, 0.1, j);
                    assert!(out.contains_point(&[y]));
                    mn = mn.min(y);
                    mx = mx.max(y);
                }
            }
        }
        assert!((mn - 0.9).abs() < 1e-9 && (mx - 4.6).abs() < 1e-9);
        assert!((out.lo()[0] - mn).abs() < 1e-8 && (out.hi()[0] - mx).abs() < 1e-8);
    }

    #[test]
    fn pred_eval_box_examples() {
        let p = LinPred::axis_le(1, 0, 5.0);
        assert_eq!(p.eval_box(&b1(0.0, 1.0)).unwrap(), Tri::True);
        assert_eq!(p.eval_box(&b1(6.0, 7.0)).unwrap(), Tri::False);
        assert_eq!(p.eval_box(&b1(4.0, 6.0)).unwrap(), Tri::Unknown);
        assert!(p.eval_box(&Hyperbox::empty(2)).is_err());
    }

    #[test]
    fn zero_normal_rejected() {
        assert!(matches!(
            LinPred::new(vec![0.0, 0.0], 1.0),
            Err(Error::ZeroNormal)
        ));
        let bad: std::result::Result<LinPred, _> = serde_json::from_str(r#"{"w":[0.0],"b":1.0}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn region_contains_examples() {
        assert!(Region::all().contains(&[3.0]));
        let r = Region::from_preds(vec![LinPred::axis_le(1, 0, 0.0)]);
        assert!(r.contains(&[-1.0]));
        let r = Region::from_preds(vec![LinPred::axis_le(1, 0, 2.0)])
            .and_not(&[LinPred::axis_le(1, 0, 0.0)]);
        assert!(r.contains(&[1.0]));
        assert!(!r.contains(&[0.0]));
    }

    #[test]
    fn region_meet_box_examples() {
        let r = Region::from_preds(vec![LinPred::axis_le(1, 0, 0.5)]);
        assert_eq!(r.meet_box(&b1(0.0, 1.0)).unwrap(), b1(0.0, 0.5));

        let r = Region::from_preds(vec![LinPred::new(vec![1.0, 1.0], 0.0).unwrap()]);
        let unit = Hyperbox::from_bounds(&[(0.0, 1.0), (0.0, 1.0)]);
        assert_eq!(r.meet_box(&unit).unwrap(), unit);

        let r = Region::from_preds(vec![LinPred::axis_le(1, 0, -1.0)]);
        assert!(r.meet_box(&b1(0.0, 1.0)).unwrap().is_empty());

        // Negated axis-aligned guard tightens the lower side.
        let r = Region::all().and_not(&[LinPred::axis_le(1, 0, 0.25)]);
        assert_eq!(r.meet_box(&b1(0.0, 1.0)).unwrap(), b1(0.25, 1.0));
        // x ≥ 2 on a box that cannot reach it.
        let r = Region::from_preds(vec![LinPred::axis_ge(1, 0, 2.0)]);
        assert!(r.meet_box(&b1(0.0, 1.0)).unwrap().is_empty());
    }

    #[test]
    fn and_not_drops_shared_conjuncts() {
        let p = LinPred::axis_le(2, 0, 1.0);
        let q = LinPred::axis_le(2, 1, 1.0);
        let r = Region::from_preds(vec![p.clone()]).and_not(&[p, q.clone()]);
        assert_eq!(r.negated, vec![vec![q]]);
    }

    #[test]
    fn clamp_into_is_sound_for_clipping() {
        let bounds = b1(0.0, 1.0);
        assert_eq!(b1(2.0, 3.0).clamp_into(&bounds).unwrap(), b1(1.0, 1.0));
        assert_eq!(b1(-1.0, 0.5).clamp_into(&bounds).unwrap(), b1(0.0, 0.5));
    }

    #[test]
    fn serde_roundtrip_box() {
        let b = Hyperbox::from_bounds(&[(0.1, 0.3), (-2.0, 7.25)]);
        let s = serde_json::to_string(&b).unwrap();
        assert_eq!(serde_json::from_str::<Hyperbox>(&s).unwrap(), b);
        let e = serde_json::to_string(&Hyperbox::empty(3)).unwrap();
        assert_eq!(e, r#"{"empty":3}"#);
        assert!(serde_json::from_str::<Hyperbox>(r#"{"lo":[1.0],"hi":[0.0]}"#).is_err());
    }
}
