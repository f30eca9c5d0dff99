//! Knot placement and spline basis evaluation (values and first
//! derivatives) for natural cubic splines and reduced cubic B-splines.
//!
//! Both families expose exactly `kappa + 2` columns for `kappa` interior
//! knots, so the coefficient vector has one dimension regardless of family.
//! Evaluation is defined on the whole real line: the natural basis
//! extrapolates linearly beyond the boundary knots (its defining property),
//! the B-spline basis extends the end-span polynomial.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{KnotStrategy, SplineFamily};

#[derive(Debug, Error)]
pub enum SplineError {
    #[error("cannot place knots: all times equal ({0})")]
    DegenerateRange(f64),
    #[error("times must be non-empty")]
    EmptyTimes,
    #[error("invalid knot set: {0}")]
    InvalidKnots(String),
}

/// Interior knots plus the two boundary knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotSet {
    pub interior: Vec<f64>,
    pub boundary: (f64, f64),
}

impl KnotSet {
    pub fn new(interior: Vec<f64>, boundary: (f64, f64)) -> Result<Self, SplineError> {
        let (lo, hi) = boundary;
        if !(lo < hi) {
            return Err(SplineError::InvalidKnots(format!(
                "boundary ({lo}, {hi}) is not an increasing pair"
            )));
        }
        for w in interior.windows(2) {
            if w[1] <= w[0] {
                return Err(SplineError::InvalidKnots(
                    "interior knots must be strictly increasing".into(),
                ));
            }
        }
        if interior.iter().any(|&k| k <= lo || k >= hi) {
            return Err(SplineError::InvalidKnots(
                "interior knots must lie strictly inside the boundary".into(),
            ));
        }
        Ok(KnotSet { interior, boundary })
    }

    pub fn n_interior(&self) -> usize {
        self.interior.len()
    }

    /// Basis dimension: interior knots + 2.
    pub fn n_basis(&self) -> usize {
        self.interior.len() + 2
    }

    /// All knots in increasing order: lower boundary, interior, upper.
    pub fn all_knots(&self) -> Vec<f64> {
        let mut k = Vec::with_capacity(self.interior.len() + 2);
        k.push(self.boundary.0);
        k.extend_from_slice(&self.interior);
        k.push(self.boundary.1);
        k
    }
}

/// Basis values at a set of evaluation points; `kappa + 2` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisMatrix {
    pub values: DMatrix<f64>,
    pub eval_points: Vec<f64>,
}

/// Places `kappa` interior knots between the observed extremes, either
/// equally spaced or at empirical quantiles.
pub fn place_knots(
    times: &[f64],
    kappa: usize,
    strategy: KnotStrategy,
) -> Result<KnotSet, SplineError> {
    if times.is_empty() {
        return Err(SplineError::EmptyTimes);
    }
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo < hi) {
        return Err(SplineError::DegenerateRange(lo));
    }
    let interior = match strategy {
        KnotStrategy::EqualSpacing => (1..=kappa)
            .map(|k| lo + k as f64 * (hi - lo) / (kappa + 1) as f64)
            .collect(),
        KnotStrategy::Quantile => {
            let mut sorted = times.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut qs: Vec<f64> = (1..=kappa)
                .map(|k| {
                    let p = k as f64 / (kappa + 1) as f64;
                    let h = (sorted.len() - 1) as f64 * p;
                    let lo_i = h.floor() as usize;
                    let hi_i = h.ceil() as usize;
                    sorted[lo_i] + (h - lo_i as f64) * (sorted[hi_i] - sorted[lo_i])
                })
                .collect();
            // Heavily tied designs can repeat a quantile; nudge into strict order.
            for i in 1..qs.len() {
                if qs[i] <= qs[i - 1] {
                    qs[i] = qs[i - 1] + (hi - lo) * 1e-9;
                }
            }
            qs.retain(|&q| q > lo && q < hi);
            if qs.len() != kappa {
                return Err(SplineError::InvalidKnots(
                    "quantile strategy could not place distinct interior knots".into(),
                ));
            }
            qs
        }
    };
    KnotSet::new(interior, (lo, hi))
}

/// Evaluates the basis matrix (rows = points, columns = kappa + 2).
pub fn eval_basis(knots: &KnotSet, family: SplineFamily, t: &[f64]) -> BasisMatrix {
    let eval = family_eval(knots, family);
    let m = knots.n_basis();
    let mut values = DMatrix::zeros(t.len(), m);
    let mut row = vec![0.0; m];
    for (j, &x) in t.iter().enumerate() {
        eval.basis_row(x, 0, &mut row);
        for k in 0..m {
            values[(j, k)] = row[k];
        }
    }
    BasisMatrix {
        values,
        eval_points: t.to_vec(),
    }
}

/// First derivative of every basis column at the given points.
pub fn eval_basis_deriv(knots: &KnotSet, family: SplineFamily, t: &[f64]) -> DMatrix<f64> {
    let eval = family_eval(knots, family);
    let m = knots.n_basis();
    let mut values = DMatrix::zeros(t.len(), m);
    let mut row = vec![0.0; m];
    for (j, &x) in t.iter().enumerate() {
        eval.basis_row(x, 1, &mut row);
        for k in 0..m {
            values[(j, k)] = row[k];
        }
    }
    values
}

/// Stateless row evaluator shared by the sampler's warped-basis path, which
/// fills caller-provided buffers to avoid per-row allocation.
pub enum BasisEval {
    Natural(NaturalBasis),
    Reduced(ReducedBspline),
}

impl BasisEval {
    /// Writes basis values (`deriv_order` 0) or first derivatives
    /// (`deriv_order` 1) at `x` into `out` (length `kappa + 2`).
    pub fn basis_row(&self, x: f64, deriv_order: usize, out: &mut [f64]) {
        match self {
            BasisEval::Natural(b) => b.row(x, deriv_order, out),
            BasisEval::Reduced(b) => b.row(x, deriv_order, out),
        }
    }

    pub fn n_basis(&self) -> usize {
        match self {
            BasisEval::Natural(b) => b.knots.len(),
            BasisEval::Reduced(b) => b.n_reduced,
        }
    }
}

pub fn family_eval(knots: &KnotSet, family: SplineFamily) -> BasisEval {
    match family {
        SplineFamily::NaturalCubic => BasisEval::Natural(NaturalBasis::new(knots)),
        SplineFamily::BSpline => BasisEval::Reduced(ReducedBspline::new(knots)),
    }
}

/// Natural cubic spline basis on knots `xi_1 < ... < xi_K` (boundary knots
/// are the extremes): columns `{1, x, d_k(x) - d_{K-1}(x)}` with
/// `d_k(x) = ((x - xi_k)_+^3 - (x - xi_K)_+^3) / (xi_K - xi_k)`.
/// Outside the boundary the basis is evaluated by exact linear extension
/// from the boundary value and slope, which avoids cancellation between the
/// cubic terms far out.
pub struct NaturalBasis {
    knots: Vec<f64>,
}

impl NaturalBasis {
    fn new(ks: &KnotSet) -> Self {
        NaturalBasis {
            knots: ks.all_knots(),
        }
    }

    fn row(&self, x: f64, deriv_order: usize, out: &mut [f64]) {
        let lo = self.knots[0];
        let hi = *self.knots.last().unwrap();
        if x < lo || x > hi {
            let b = if x < lo { lo } else { hi };
            match deriv_order {
                0 => {
                    // value(b) + slope(b) * (x - b)
                    let mut slope = vec![0.0; out.len()];
                    self.row_inside(b, 0, out);
                    self.row_inside(b, 1, &mut slope);
                    for (o, s) in out.iter_mut().zip(slope.iter()) {
                        *o += s * (x - b);
                    }
                }
                _ => self.row_inside(b, 1, out),
            }
            return;
        }
        self.row_inside(x, deriv_order, out);
    }

    fn row_inside(&self, x: f64, deriv_order: usize, out: &mut [f64]) {
        let k_total = self.knots.len();
        let xi_last = self.knots[k_total - 1];
        match deriv_order {
            0 => {
                out[0] = 1.0;
                out[1] = x;
            }
            _ => {
                out[0] = 0.0;
                out[1] = 1.0;
            }
        }
        let d = |k: usize| -> f64 {
            let xk = self.knots[k];
            let a = (x - xk).max(0.0);
            let b = (x - xi_last).max(0.0);
            let denom = xi_last - xk;
            match deriv_order {
                0 => (a.powi(3) - b.powi(3)) / denom,
                _ => (3.0 * a * a - 3.0 * b * b) / denom,
            }
        };
        let d_last = d(k_total - 2);
        for k in 0..k_total.saturating_sub(2) {
            out[k + 2] = d(k) - d_last;
        }
    }

    /// Analytic second derivative, used by tests and the reduction of the
    /// B-spline family.
    pub fn second_derivative_row(&self, x: f64, out: &mut [f64]) {
        let k_total = self.knots.len();
        let xi_last = self.knots[k_total - 1];
        out[0] = 0.0;
        out[1] = 0.0;
        let lo = self.knots[0];
        let hi = xi_last;
        let xc = x.clamp(lo, hi);
        let outside = x < lo || x > hi;
        let d2 = |k: usize| -> f64 {
            let xk = self.knots[k];
            let a = (xc - xk).max(0.0);
            let b = (xc - xi_last).max(0.0);
            (6.0 * a - 6.0 * b) / (xi_last - xk)
        };
        let d2_last = d2(k_total - 2);
        for k in 0..k_total.saturating_sub(2) {
            out[k + 2] = if outside { 0.0 } else { d2(k) - d2_last };
        }
    }
}

/// Cubic B-spline basis on a clamped knot vector, reduced from `kappa + 4`
/// to `kappa + 2` columns by projecting onto the null space of the boundary
/// second-derivative constraints. Beyond the boundary knots each column is
/// the polynomial extension of its end span.
pub struct ReducedBspline {
    /// Clamped knot vector of length kappa + 8.
    t: Vec<f64>,
    /// (kappa + 4) x (kappa + 2) reduction, columns orthonormal.
    reduction: DMatrix<f64>,
    n_full: usize,
    n_reduced: usize,
}

const DEGREE: usize = 3;

impl ReducedBspline {
    fn new(ks: &KnotSet) -> Self {
        let (lo, hi) = ks.boundary;
        let mut t = vec![lo; DEGREE + 1];
        t.extend_from_slice(&ks.interior);
        t.extend(std::iter::repeat_n(hi, DEGREE + 1));
        let n_full = ks.n_interior() + DEGREE + 1;
        let n_reduced = ks.n_interior() + 2;

        // Constraint matrix: second derivative of each full column at the
        // two boundary knots.
        let mut this = ReducedBspline {
            t,
            reduction: DMatrix::identity(n_full, n_full),
            n_full,
            n_reduced,
        };
        let mut constraints = DMatrix::zeros(2, n_full);
        let mut ders = vec![0.0; n_full];
        for (r, &x) in [lo, hi].iter().enumerate() {
            this.full_row(x, 2, &mut ders);
            for c in 0..n_full {
                constraints[(r, c)] = ders[c];
            }
        }
        this.reduction = null_space(&constraints, n_reduced);
        this
    }

    fn row(&self, x: f64, deriv_order: usize, out: &mut [f64]) {
        let mut full = vec![0.0; self.n_full];
        self.full_row(x, deriv_order, &mut full);
        for j in 0..self.n_reduced {
            let mut acc = 0.0;
            for i in 0..self.n_full {
                acc += full[i] * self.reduction[(i, j)];
            }
            out[j] = acc;
        }
    }

    /// Full (unreduced) basis derivatives of the requested order at `x`.
    /// The evaluation span is clamped to the end spans, so points outside
    /// the boundary get the end-span polynomial extension.
    fn full_row(&self, x: f64, deriv_order: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let span = self.find_span(x);
        let ders = ders_basis_funs(&self.t, span, x, DEGREE, deriv_order);
        for (j, &v) in ders[deriv_order].iter().enumerate() {
            out[span - DEGREE + j] = v;
        }
    }

    fn find_span(&self, x: f64) -> usize {
        let first = DEGREE;
        let last = self.t.len() - DEGREE - 2;
        let mut span = first;
        while span < last && x >= self.t[span + 1] {
            span += 1;
        }
        span
    }
}

/// Derivatives of the `degree + 1` B-splines that are nonzero on `span`,
/// orders `0..=max_order`, via the standard triangular recursion. Evaluating
/// with a clamped span yields the polynomial extension outside the knots.
fn ders_basis_funs(t: &[f64], span: usize, x: f64, degree: usize, max_order: usize) -> Vec<Vec<f64>> {
    let p = degree;
    let n = max_order.min(p);
    let mut ndu = vec![vec![0.0; p + 1]; p + 1];
    let mut left = vec![0.0; p + 1];
    let mut right = vec![0.0; p + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = x - t[span + 1 - j];
        right[j] = t[span + j] - x;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = vec![vec![0.0; p + 1]; max_order + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    let mut a = vec![vec![0.0; p + 1]; 2];
    for r in 0..=p {
        let mut s1 = 0;
        let mut s2 = 1;
        a[0][0] = 1.0;
        for k in 1..=n {
            let mut d = 0.0;
            let rk = r as isize - k as isize;
            let pk = (p - k) as isize;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
            let j2 = if (r as isize - 1) <= pk {
                k - 1
            } else {
                p - r
            };
            for j in j1..=j2 {
                a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[(pk + 1) as usize][(rk + j as isize) as usize];
                d += a[s2][j] * ndu[(rk + j as isize) as usize][pk as usize];
            }
            if r as isize <= pk {
                a[s2][k] = -a[s1][k - 1] / ndu[(pk + 1) as usize][r];
                d += a[s2][k] * ndu[r][pk as usize];
            }
            ders[k][r] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = p as f64;
    for k in 1..=n {
        for j in 0..=p {
            ders[k][j] *= factor;
        }
        factor *= (p - k) as f64;
    }
    ders
}

/// Orthonormal basis of the null space of a short, wide constraint matrix,
/// by modified Gram-Schmidt against the constraint rows.
fn null_space(constraints: &DMatrix<f64>, expected_dim: usize) -> DMatrix<f64> {
    let m = constraints.ncols();
    let mut directions: Vec<Vec<f64>> = Vec::new();
    for r in 0..constraints.nrows() {
        let mut v: Vec<f64> = (0..m).map(|c| constraints[(r, c)]).collect();
        for d in &directions {
            let dot: f64 = v.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
            for (vi, di) in v.iter_mut().zip(d.iter()) {
                *vi -= dot * di;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            v.iter_mut().for_each(|a| *a /= norm);
            directions.push(v);
        }
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(expected_dim);
    for e in 0..m {
        let mut v = vec![0.0; m];
        v[e] = 1.0;
        for d in directions.iter().chain(basis.iter()) {
            let dot: f64 = v.iter().zip(d.iter()).map(|(a, b)| a * b).sum();
            for (vi, di) in v.iter_mut().zip(d.iter()) {
                *vi -= dot * di;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            basis.push(v);
            if basis.len() == expected_dim {
                break;
            }
        }
    }
    assert_eq!(basis.len(), expected_dim, "null space has unexpected dimension");
    DMatrix::from_fn(m, expected_dim, |i, j| basis[j][i])
}
