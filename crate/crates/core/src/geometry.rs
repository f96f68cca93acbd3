//! Fisher-Rao geometry of the open probability simplex and of the assignment
//! manifold (the product of `n` simplices).
//!
//! Tangent vectors are kept in ambient coordinates: a tangent vector of the
//! simplex with `c` categories is a length-`c` vector summing to zero. The
//! e-connection exponential map composed with the replicator map has the
//! closed form
//!
//! ```text
//! exp_p(v) = p * e^v / <p, e^v>
//! ```
//!
//! which is evaluated with max-subtraction so that large tangent vectors do
//! not overflow. Every map that produces a simplex point clamps entries to
//! [`POSITIVITY_FLOOR`] and renormalizes, so the inverse map stays finite
//! even when the flow drives a point towards a vertex.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

use crate::error::{Error, Result};
use crate::meta_simplex::Configuration;

/// Smallest entry any produced simplex point may carry.
pub const POSITIVITY_FLOOR: f64 = 1e-14;

/// Tolerance on row sums for simplex points and tangent vectors.
pub const SUM_TOLERANCE: f64 = 1e-12;

/// Number of variables `n` and number of categories `c` per variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims {
    pub n: usize,
    pub c: usize,
}

impl Dims {
    pub fn new(n: usize, c: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Dims("n must be at least 1".into()));
        }
        if c < 2 {
            return Err(Error::Dims(format!("c must be at least 2, got {c}")));
        }
        Ok(Self { n, c })
    }

    /// Length of a flattened `n x c` matrix.
    pub fn flat_len(&self) -> usize {
        self.n * self.c
    }

    /// Dimension of the tangent space, `n (c - 1)`.
    pub fn tangent_dim(&self) -> usize {
        self.n * (self.c - 1)
    }

    /// `N = c^n`, or `None` when it does not fit in a `u128`.
    pub fn num_configurations(&self) -> Option<u128> {
        (self.c as u128).checked_pow(self.n as u32)
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n={} c={}", self.n, self.c)
    }
}

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn sum_tolerance(xs: &[f64]) -> f64 {
    let scale = xs.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    SUM_TOLERANCE * scale * (xs.len() as f64).max(1.0)
}

/// A point of the open simplex: strictly positive entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexPoint(Vec<f64>);

impl SimplexPoint {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        validate_simplex_row(&values)?;
        Ok(Self(values))
    }

    pub fn barycenter(c: usize) -> Self {
        Self(vec![1.0 / c as f64; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A tangent vector of the simplex: entries summing to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        check_finite(&values, "tangent vector")?;
        let s: f64 = values.iter().sum();
        if s.abs() > sum_tolerance(&values) {
            return Err(Error::Domain(format!(
                "tangent vector entries sum to {s:e}, expected 0"
            )));
        }
        Ok(Self(values))
    }

    /// Orthogonal projection of an arbitrary vector onto the tangent space.
    pub fn project(mut values: Vec<f64>) -> Self {
        center_in_place(&mut values);
        Self(values)
    }

    pub fn zeros(c: usize) -> Self {
        Self(vec![0.0; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn validate_simplex_row(values: &[f64]) -> Result<()> {
    check_finite(values, "simplex point")?;
    if values.len() < 2 {
        return Err(Error::Dims("simplex points need at least 2 entries".into()));
    }
    if let Some(x) = values.iter().find(|&&x| x <= 0.0) {
        return Err(Error::Domain(format!(
            "simplex entries must be positive, found {x:e}"
        )));
    }
    let s: f64 = values.iter().sum();
    if (s - 1.0).abs() > SUM_TOLERANCE * values.len() as f64 {
        return Err(Error::Domain(format!("simplex entries sum to {s}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Row kernels. These operate on raw slices and are shared by the typed API
// and the batched code paths in the trainer and integrator.

/// Subtracts the mean of `xs` from every entry.
pub fn center_in_place(xs: &mut [f64]) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter_mut().for_each(|x| *x -= mean);
}

/// Clamps to the positivity floor and renormalizes.
fn floor_and_normalize(xs: &mut [f64]) {
    let mut floored = 0usize;
    let mut rest = 0.0;
    for x in xs.iter_mut() {
        if *x < POSITIVITY_FLOOR {
            *x = POSITIVITY_FLOOR;
            floored += 1;
        } else {
            rest += *x;
        }
    }
    if floored == 0 {
        xs.iter_mut().for_each(|x| *x /= rest);
        return;
    }
    // Floored entries stay exactly at the floor; the others absorb the excess.
    let scale = (1.0 - floored as f64 * POSITIVITY_FLOOR) / rest;
    xs.iter_mut()
        .filter(|x| **x > POSITIVITY_FLOOR)
        .for_each(|x| *x *= scale);
}

/// `out = Diag(p) f - <p, f> p`.
pub fn replicator_row(p: &[f64], f: &[f64], out: &mut [f64]) {
    let mean: f64 = p.iter().zip(f).map(|(a, b)| a * b).sum();
    for ((o, &pj), &fj) in out.iter_mut().zip(p).zip(f) {
        *o = pj * (fj - mean);
    }
}

/// Closed-form `exp_p(v) = p e^v / <p, e^v>` written into `out`.
pub fn exp_e_row(p: &[f64], v: &[f64], out: &mut [f64]) {
    let mut m = f64::NEG_INFINITY;
    for ((o, &pj), &vj) in out.iter_mut().zip(p).zip(v) {
        *o = pj.ln() + vj;
        m = m.max(*o);
    }
    let mut s = 0.0;
    for o in out.iter_mut() {
        *o = (*o - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
    floor_and_normalize(out);
}

/// `exp_e_row` at the barycenter: the softmax of `v`.
pub fn softmax_row(v: &[f64], out: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &vj) in out.iter_mut().zip(v) {
        *o = (vj - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
    floor_and_normalize(out);
}

/// Centered log-ratio `log(q / p) - mean`, the inverse of [`exp_e_row`].
pub fn log_e_row(p: &[f64], q: &[f64], out: &mut [f64]) {
    for ((o, &pj), &qj) in out.iter_mut().zip(p).zip(q) {
        *o = qj.ln() - pj.ln();
    }
    center_in_place(out);
}

/// `sum_j a_j^2 w_j - (sum_j a_j w_j)^2`, the squared Fisher-Rao norm of
/// `R_w[a]` without forming it.
pub fn pushed_norm_sq_row(w: &[f64], a: &[f64]) -> f64 {
    let mut quad = 0.0;
    let mut mean = 0.0;
    for (&wj, &aj) in w.iter().zip(a) {
        quad += wj * aj * aj;
        mean += wj * aj;
    }
    (quad - mean * mean).max(0.0)
}

// ---------------------------------------------------------------------------
// Single-simplex API.

fn check_same_len(a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("length {a} vs {b}")))
    }
}

/// Replicator map `R_p[f] = Diag(p) f - <p, f> p`, the inverse Fisher-Rao
/// metric tensor in ambient coordinates. Constant vectors lie in its kernel.
pub fn replicator(p: &SimplexPoint, f: &[f64]) -> Result<TangentVector> {
    check_same_len(p.len(), f.len())?;
    check_finite(f, "replicator argument")?;
    let mut out = vec![0.0; f.len()];
    replicator_row(p.as_slice(), f, &mut out);
    Ok(TangentVector(out))
}

/// Lifting map `exp_p = Exp_p o R_p` in closed form.
pub fn exp_e(p: &SimplexPoint, v: &TangentVector) -> Result<SimplexPoint> {
    check_same_len(p.len(), v.0.len())?;
    let mut out = vec![0.0; v.0.len()];
    exp_e_row(p.as_slice(), v.as_slice(), &mut out);
    Ok(SimplexPoint(out))
}

/// Inverse of [`exp_e`].
pub fn log_e(p: &SimplexPoint, q: &SimplexPoint) -> Result<TangentVector> {
    check_same_len(p.len(), q.len())?;
    if let Some(x) = q.as_slice().iter().find(|&&x| x < POSITIVITY_FLOOR) {
        return Err(Error::Domain(format!(
            "entry {x:e} is below the positivity floor"
        )));
    }
    let mut out = vec![0.0; p.len()];
    log_e_row(p.as_slice(), q.as_slice(), &mut out);
    Ok(TangentVector(out))
}

/// Exponential map of the e-connection, `Exp_p(v) = p e^{v/p} / <p, e^{v/p}>`.
pub fn exp_map(p: &SimplexPoint, v: &TangentVector) -> Result<SimplexPoint> {
    check_same_len(p.len(), v.0.len())?;
    let scaled: Vec<f64> = v.0.iter().zip(p.as_slice()).map(|(v, p)| v / p).collect();
    check_finite(&scaled, "exponential map argument")?;
    let mut out = vec![0.0; scaled.len()];
    exp_e_row(p.as_slice(), &scaled, &mut out);
    Ok(SimplexPoint(out))
}

// ---------------------------------------------------------------------------
// Assignment manifold.

/// A point `W` of the assignment manifold: an `n x c` matrix whose rows are
/// simplex points.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentState(Array2<f64>);

impl AssignmentState {
    pub fn new(w: Array2<f64>) -> Result<Self> {
        Dims::new(w.nrows(), w.ncols())?;
        for row in w.rows() {
            validate_simplex_row(row.as_slice().unwrap_or(&row.to_vec()))?;
        }
        Ok(Self(w.as_standard_layout().into_owned()))
    }

    /// The barycenter `1_W`: every row uniform.
    pub fn barycenter(dims: Dims) -> Self {
        Self(Array2::from_elem((dims.n, dims.c), 1.0 / dims.c as f64))
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.0.nrows(),
            c: self.0.ncols(),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.0.row(i)
    }

    /// Row-wise argmax with the lowest index winning ties. The second value
    /// counts rows where a tie occurred.
    pub fn argmax_rows(&self) -> (Vec<usize>, usize) {
        let mut ties = 0;
        let labels = self
            .0
            .rows()
            .into_iter()
            .map(|row| {
                let (label, tied) = argmax(row.as_slice().expect("standard layout"));
                ties += tied as usize;
                label
            })
            .collect();
        (labels, ties)
    }
}

/// Index of the largest entry (lowest index on ties) and whether a tie occurred.
pub fn argmax(xs: &[f64]) -> (usize, bool) {
    let mut best = 0;
    let mut tied = false;
    for (j, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = j;
            tied = false;
        } else if x == xs[best] {
            tied = true;
        }
    }
    (best, tied)
}

/// An element of the product tangent space: an `n x c` matrix with zero-sum rows.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentMatrix(Array2<f64>);

impl TangentMatrix {
    pub fn new(u: Array2<f64>) -> Result<Self> {
        Dims::new(u.nrows(), u.ncols())?;
        for row in u.rows() {
            let row = row.to_vec();
            check_finite(&row, "tangent matrix")?;
            let s: f64 = row.iter().sum();
            if s.abs() > sum_tolerance(&row) {
                return Err(Error::Domain(format!(
                    "tangent matrix row sums to {s:e}, expected 0"
                )));
            }
        }
        Ok(Self(u.as_standard_layout().into_owned()))
    }

    /// Projects each row onto the tangent space by subtracting its mean.
    pub fn project(mut a: Array2<f64>) -> Self {
        a = a.as_standard_layout().into_owned();
        for mut row in a.rows_mut() {
            let mean = row.mean().unwrap_or(0.0);
            row.mapv_inplace(|x| x - mean);
        }
        Self(a)
    }

    pub(crate) fn from_raw(u: Array2<f64>) -> Self {
        Self(u)
    }

    pub fn zeros(dims: Dims) -> Self {
        Self(Array2::zeros((dims.n, dims.c)))
    }

    pub fn dims(&self) -> Dims {
        Dims {
            n: self.0.nrows(),
            c: self.0.ncols(),
        }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.0.view()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    /// Euclidean (Frobenius) norm in ambient coordinates.
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

fn check_dims(a: Dims, b: Dims) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("({a}) vs ({b})")))
    }
}

fn map_rows(
    a: ArrayView2<'_, f64>,
    b: ArrayView2<'_, f64>,
    f: impl Fn(&[f64], &[f64], &mut [f64]),
) -> Array2<f64> {
    let mut out = Array2::zeros(a.raw_dim());
    for ((ra, rb), mut ro) in a.rows().into_iter().zip(b.rows()).zip(out.rows_mut()) {
        let ra = ra.to_vec();
        let rb = rb.to_vec();
        f(&ra, &rb, ro.as_slice_mut().expect("fresh array"));
    }
    out
}

/// Row-wise replicator map `R_W[a]`.
pub fn replicator_matrix(w: &AssignmentState, a: ArrayView2<'_, f64>) -> Result<TangentMatrix> {
    if w.0.raw_dim() != a.raw_dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", w.0.dim(), a.dim())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("replicator argument".into()));
    }
    Ok(TangentMatrix(map_rows(w.view(), a, replicator_row)))
}

/// Row-wise [`exp_e`].
pub fn exp_e_matrix(w: &AssignmentState, u: &TangentMatrix) -> Result<AssignmentState> {
    check_dims(w.dims(), u.dims())?;
    Ok(AssignmentState(map_rows(w.view(), u.view(), exp_e_row)))
}

/// Row-wise [`log_e`].
pub fn log_e_matrix(w: &AssignmentState, q: &AssignmentState) -> Result<TangentMatrix> {
    check_dims(w.dims(), q.dims())?;
    if let Some(x) = q.0.iter().find(|&&x| x < POSITIVITY_FLOOR) {
        return Err(Error::Domain(format!(
            "entry {x:e} is below the positivity floor"
        )));
    }
    Ok(TangentMatrix(map_rows(w.view(), q.view(), log_e_row)))
}

/// Lifts a tangent matrix from the barycenter: a row-wise softmax.
pub fn lift_from_barycenter(u: &TangentMatrix) -> AssignmentState {
    AssignmentState(softmax_rows(u.view()))
}

/// Row-wise softmax of any matrix.
pub fn softmax_rows(u: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::zeros(u.raw_dim());
    for (r, mut o) in u.rows().into_iter().zip(out.rows_mut()) {
        softmax_row(&r.to_vec(), o.as_slice_mut().expect("fresh array"));
    }
    out
}

/// Tangent coordinates of `q` at the barycenter (centered log).
pub fn log_from_barycenter(q: &AssignmentState) -> Result<TangentMatrix> {
    log_e_matrix(&AssignmentState::barycenter(q.dims()), q)
}

/// Point at time `t` on the e-geodesic from `exp(u0)` to `exp(u_target)`,
/// both lifted from the barycenter: `exp_1(u0 + t (u_target - u0))`.
pub fn geodesic_point(u0: &TangentMatrix, u_target: &TangentMatrix, t: f64) -> Result<AssignmentState> {
    check_dims(u0.dims(), u_target.dims())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("geodesic time {t} outside [0, 1]")));
    }
    let u = if t == 0.0 {
        u0.0.clone()
    } else if t == 1.0 {
        u_target.0.clone()
    } else {
        &u0.0 + &((&u_target.0 - &u0.0) * t)
    };
    Ok(AssignmentState(softmax_rows(u.view())))
}

/// Velocity of the e-geodesic through `w_t`: `R_{W_t}[u_target - u0]`.
pub fn geodesic_velocity(
    w_t: &AssignmentState,
    u0: &TangentMatrix,
    u_target: &TangentMatrix,
) -> Result<TangentMatrix> {
    check_dims(u0.dims(), u_target.dims())?;
    check_dims(w_t.dims(), u0.dims())?;
    let diff = &u_target.0 - &u0.0;
    replicator_matrix(w_t, diff.view())
}

/// Squared Fisher-Rao norm `sum_i <u_i, u_i / W_i>`.
pub fn fisher_norm_sq(w: &AssignmentState, u: &TangentMatrix) -> Result<f64> {
    check_dims(w.dims(), u.dims())?;
    Ok(w.0.iter().zip(u.0.iter()).map(|(w, u)| u * u / w).sum())
}

/// `||R_W[a]||_W^2` evaluated as `sum_i <a_i, Diag(W_i) a_i> - <W_i, a_i>^2`.
pub fn pushed_norm_sq(w: &AssignmentState, a: ArrayView2<'_, f64>) -> Result<f64> {
    if w.0.raw_dim() != a.raw_dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", w.0.dim(), a.dim())));
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("pushed norm argument".into()));
    }
    Ok(w
        .0
        .rows()
        .into_iter()
        .zip(a.rows())
        .map(|(wr, ar)| pushed_norm_sq_row(&wr.to_vec(), &ar.to_vec()))
        .sum())
}

/// Smoothed vertex `eps 1_W + (1 - eps) M e_beta`.
pub fn smoothed_corner(beta: &Configuration, c: usize, eps: f64) -> Result<AssignmentState> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("smoothing eps {eps} outside (0, 1)")));
    }
    let dims = Dims::new(beta.len(), c)?;
    beta.check(dims)?;
    let mut q = Array2::from_elem((dims.n, c), eps / c as f64);
    for (mut row, &label) in q.rows_mut().into_iter().zip(beta.labels()) {
        fill_corner_row(row.view_mut(), label, eps);
    }
    Ok(AssignmentState(q))
}

fn fill_corner_row(mut row: ArrayViewMut1<'_, f64>, label: usize, eps: f64) {
    let c = row.len() as f64;
    row.fill(eps / c);
    row[label] += 1.0 - eps;
}

/// Centered-log coordinates of one smoothed vertex row. Only the position of
/// the label matters, so this is shared by all rows with the same `c`.
pub fn corner_tangent_row(c: usize, label: usize, eps: f64) -> Vec<f64> {
    let hi = eps / c as f64 + (1.0 - eps);
    let lo = eps / c as f64;
    let gap = hi.ln() - lo.ln();
    let mut row = vec![-gap / c as f64; c];
    row[label] += gap;
    row
}

/// Sums along rows of an `n x c` matrix.
pub fn row_sums(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.sum_axis(Axis(1)).to_vec()
}
