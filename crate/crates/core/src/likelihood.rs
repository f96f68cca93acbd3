//! Importance-sampling lower bounds on configuration log-likelihoods.
//!
//! The model density lives on the flat tangent space. For a configuration
//! `alpha` the region of tangent vectors whose lift rounds to `alpha` contains
//! a product of balls around the vertex coordinates `q~_alpha`, one per
//! variable. Sampling a ball-truncated isotropic Gaussian `rho` there and
//! averaging `log nu~_1(v) - log rho(v)` bounds `log p_alpha` from below.
//!
//! Densities are taken with respect to Lebesgue measure in the coordinates of
//! an orthonormal basis `Q` of each factor's tangent space (dimension
//! `n (c - 1)` in total). The model density `nu~_1` comes from the
//! instantaneous change of variables, integrated backward from `t = 1`:
//!
//! ```text
//! log nu~_1(v) = log N(u(0)) - int_0^1 div f(u(s)) ds,   u(1) = v
//! ```

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::flow_matching::{corner_tangent, DEFAULT_EPS};
use crate::geometry::{Dims, TangentMatrix};
use crate::integrate::{integrate_system, lift_batch, IntegratorConfig, TangentField};
use crate::meta_simplex::Configuration;

/// Default probability mass of the truncated proposal.
pub const DEFAULT_MASS: f64 = 0.8;

/// Default number of importance samples per configuration.
pub const DEFAULT_SAMPLES: usize = 200;

/// Maximum proposal draws per factor before giving up.
pub const REJECTION_CAP: usize = 1000;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

// ---------------------------------------------------------------------------
// Special functions.

/// `ln Gamma(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection.
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefactor = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        // Series sum_k x^k / (a (a+1) ... (a+k)).
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..1000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefactor).exp().min(1.0)
    } else {
        // Continued fraction for Q(a, x), modified Lentz.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-17 {
                break;
            }
        }
        (1.0 - (log_prefactor.exp() * h)).max(0.0)
    }
}

/// CDF of the chi-square distribution with `k` degrees of freedom.
pub fn chi2_cdf(x: f64, k: usize) -> f64 {
    assert!(k >= 1, "chi-square needs at least one degree of freedom");
    if x <= 0.0 {
        return 0.0;
    }
    gamma_p(0.5 * k as f64, 0.5 * x)
}

// ---------------------------------------------------------------------------
// Region geometry.

/// Orthonormal basis `Q` (`c x (c-1)`) of the zero-sum subspace, built from
/// Helmert contrasts: column `k` is `(1, ..., 1, -k, 0, ...) / sqrt(k (k+1))`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    q: Array2<f64>,
}

impl OrthonormalBasis {
    pub fn new(c: usize) -> Result<Self> {
        if c < 2 {
            return Err(Error::Dims(format!("basis needs c >= 2, got {c}")));
        }
        let mut q = Array2::zeros((c, c - 1));
        for k in 1..c {
            let norm = ((k * (k + 1)) as f64).sqrt();
            for j in 0..k {
                q[[j, k - 1]] = 1.0 / norm;
            }
            q[[k, k - 1]] = -(k as f64) / norm;
        }
        Ok(Self { q })
    }

    pub fn c(&self) -> usize {
        self.q.nrows()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }

    /// `Q^T u` for one factor.
    pub fn to_coords(&self, u: &[f64]) -> Vec<f64> {
        self.q.t().dot(&ndarray::ArrayView1::from(u)).to_vec()
    }

    /// `Q z` for one factor.
    pub fn from_coords(&self, z: &[f64]) -> Vec<f64> {
        self.q.dot(&ndarray::ArrayView1::from(z)).to_vec()
    }

    /// Column `k` of `Q`.
    pub fn column(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.q.column(k)
    }
}

/// Largest radius around the vertex coordinates `q~` of one factor for which
/// every point of the ball still rounds to the same label.
pub fn region_radius(center_row: &[f64], c: usize) -> Result<f64> {
    let norm = center_row.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(Error::Domain("region center row is zero".into()));
    }
    Ok(norm * (c as f64 / (2.0 * (c - 1) as f64)).sqrt())
}

/// Variance `sigma^2` for which a centered `N(0, sigma^2 I_{c-1})` puts
/// probability `mass` on the ball of radius `r`.
pub fn sigma_from_mass(r: f64, c: usize, mass: f64) -> Result<f64> {
    if !(mass > 0.0 && mass < 1.0) {
        return Err(Error::Domain(format!("truncation mass {mass} outside (0, 1)")));
    }
    if !(r > 0.0) || !r.is_finite() || c < 2 {
        return Err(Error::Domain(format!("invalid radius {r} or c {c}")));
    }
    let k = c - 1;
    // Solve chi2_cdf(s, k) = mass for s = r^2 / sigma^2.
    let mut lo = 0.0;
    let mut hi = k as f64 + 1.0;
    let mut expansions = 0;
    while chi2_cdf(hi, k) < mass {
        lo = hi;
        hi *= 2.0;
        expansions += 1;
        if expansions > 200 {
            return Err(Error::Domain("chi-square quantile did not bracket".into()));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, k) < mass {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    let s = 0.5 * (lo + hi);
    Ok(r * r / s)
}

/// Proposal geometry for one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSpec {
    pub alpha: Configuration,
    /// Vertex coordinates `q~_alpha`.
    pub center: TangentMatrix,
    pub radii: Vec<f64>,
    pub sigma2: Vec<f64>,
    /// Realized Gaussian mass of each ball, `chi2_cdf(r^2 / sigma^2, c-1)`.
    pub mass: Vec<f64>,
    basis: OrthonormalBasis,
}

impl RegionSpec {
    pub fn new(alpha: &Configuration, dims: Dims, eps: f64, mass: f64) -> Result<Self> {
        let center = corner_tangent(alpha, dims, eps)?;
        let basis = OrthonormalBasis::new(dims.c)?;
        let mut radii = Vec::with_capacity(dims.n);
        let mut sigma2 = Vec::with_capacity(dims.n);
        let mut masses = Vec::with_capacity(dims.n);
        for row in center.view().rows() {
            let r = region_radius(&row.to_vec(), dims.c)?;
            let s2 = sigma_from_mass(r, dims.c, mass)?;
            masses.push(chi2_cdf(r * r / s2, dims.c - 1));
            radii.push(r);
            sigma2.push(s2);
        }
        Ok(Self {
            alpha: alpha.clone(),
            center,
            radii,
            sigma2,
            mass: masses,
            basis,
        })
    }

    pub fn dims(&self) -> Dims {
        self.center.dims()
    }

    pub fn basis(&self) -> &OrthonormalBasis {
        &self.basis
    }

    /// Log-density of the truncated proposal at `v` (in basis coordinates),
    /// or `-inf` outside the region.
    pub fn log_density(&self, v: &TangentMatrix) -> f64 {
        let c = self.dims().c;
        let k = (c - 1) as f64;
        let mut total = 0.0;
        for i in 0..self.dims().n {
            let span = i * c..(i + 1) * c;
            let diff: Vec<f64> = v.as_slice()[span.clone()]
                .iter()
                .zip(&self.center.as_slice()[span])
                .map(|(a, b)| a - b)
                .collect();
            let z = self.basis.to_coords(&diff);
            let d2: f64 = z.iter().map(|x| x * x).sum();
            if d2 > self.radii[i] * self.radii[i] {
                return f64::NEG_INFINITY;
            }
            total += -0.5 * d2 / self.sigma2[i] - 0.5 * k * (LN_2PI + self.sigma2[i].ln()) - self.mass[i].ln();
        }
        total
    }

    /// Whether `v` lies in the product of balls.
    pub fn contains(&self, v: &TangentMatrix) -> bool {
        self.log_density(v) > f64::NEG_INFINITY
    }
}

/// Draws from the truncated proposal. Returns the sample, its log-density,
/// and the total number of Gaussian draws used.
pub fn sample_proposal<R: Rng + ?Sized>(
    region: &RegionSpec,
    rng: &mut R,
) -> Result<(TangentMatrix, f64, usize)> {
    let dims = region.dims();
    let k = dims.c - 1;
    let mut out = Array2::zeros((dims.n, dims.c));
    let mut log_density = 0.0;
    let mut draws = 0;
    let mut z = vec![0.0; k];
    for i in 0..dims.n {
        let sigma = region.sigma2[i].sqrt();
        let r2 = region.radii[i] * region.radii[i];
        let mut accepted = false;
        let mut d2 = 0.0;
        for _ in 0..REJECTION_CAP {
            draws += 1;
            d2 = 0.0;
            for zj in z.iter_mut() {
                *zj = sigma * rng.sample::<f64, _>(StandardNormal);
                d2 += *zj * *zj;
            }
            if d2 <= r2 {
                accepted = true;
                break;
            }
        }
        if !accepted {
            return Err(Error::RejectionCap {
                factor: i,
                cap: REJECTION_CAP,
            });
        }
        let offset = region.basis.from_coords(&z);
        for ((o, &m), d) in out.row_mut(i).iter_mut().zip(region.center.view().row(i)).zip(offset) {
            *o = m + d;
        }
        log_density += -0.5 * d2 / region.sigma2[i]
            - 0.5 * k as f64 * (LN_2PI + region.sigma2[i].ln())
            - region.mass[i].ln();
    }
    Ok((TangentMatrix::project(out), log_density, draws))
}

// ---------------------------------------------------------------------------
// Continuous normalizing flow density.

/// A tangent field whose divergence in basis coordinates is available.
pub trait DensityField: TangentField {
    /// `tr(d f / d z)` for every row, where `z` are the per-factor basis
    /// coordinates of the tangent state.
    fn divergence(&self, u: ArrayView2<'_, f64>, basis: &OrthonormalBasis) -> Result<Array1<f64>>;
}

impl DensityField for FieldParams {
    fn divergence(&self, u: ArrayView2<'_, f64>, basis: &OrthonormalBasis) -> Result<Array1<f64>> {
        let dims = FieldParams::dims(self);
        let (n, c) = (dims.n, dims.c);
        let dirs = dims.tangent_dim();
        let b = u.nrows();
        let w = lift_batch(u, dims);
        // One reverse pass per basis direction: row (sample, i, k) carries the
        // upstream Q e_k in block i.
        let mut x = Array2::zeros((b * dirs, dims.flat_len()));
        let mut upstream = Array2::zeros((b * dirs, dims.flat_len()));
        for s in 0..b {
            for i in 0..n {
                for k in 0..c - 1 {
                    let r = s * dirs + i * (c - 1) + k;
                    x.row_mut(r).assign(&w.row(s));
                    for j in 0..c {
                        upstream[[r, i * c + j]] = basis.q[[j, k]];
                    }
                }
            }
        }
        let (_, cache) = self.forward(x.view())?;
        let g = self.input_gradient(&cache, upstream.view())?;
        let mut div = Array1::zeros(b);
        for s in 0..b {
            let ws = w.row(s);
            for i in 0..n {
                let wi = ws.slice(ndarray::s![i * c..(i + 1) * c]);
                for k in 0..c - 1 {
                    let r = s * dirs + i * (c - 1) + k;
                    let gi = g.slice(ndarray::s![r, i * c..(i + 1) * c]);
                    // <Q e_k, R_{W_i} g_i>, R symmetric.
                    let mean: f64 = wi.iter().zip(gi.iter()).map(|(a, b)| a * b).sum();
                    let term: f64 = (0..c).map(|j| basis.q[[j, k]] * wi[j] * (gi[j] - mean)).sum();
                    div[s] += term;
                }
            }
        }
        Ok(div)
    }
}

/// Divergence by central differences of the velocity along each basis
/// direction. Independent of the reverse-mode path; used as a cross-check.
pub fn divergence_finite_difference(
    field: &impl TangentField,
    u: &TangentMatrix,
    basis: &OrthonormalBasis,
    h: f64,
) -> Result<f64> {
    let dims = field.dims();
    let (n, c) = (dims.n, dims.c);
    let mut total = 0.0;
    for i in 0..n {
        for k in 0..c - 1 {
            let dir = basis.column(k);
            let mut plus = u.as_slice().to_vec();
            let mut minus = plus.clone();
            for j in 0..c {
                plus[i * c + j] += h * dir[j];
                minus[i * c + j] -= h * dir[j];
            }
            let vp = field.velocity(ArrayView2::from_shape((1, n * c), &plus).expect("flat"))?;
            let vm = field.velocity(ArrayView2::from_shape((1, n * c), &minus).expect("flat"))?;
            let diff: f64 = (0..c).map(|j| dir[j] * (vp[[0, i * c + j]] - vm[[0, i * c + j]])).sum();
            total += diff / (2.0 * h);
        }
    }
    Ok(total)
}

/// Standard normal log-density in basis coordinates of dimension `n (c-1)`.
/// For tangent vectors `||Q^T u|| = ||u||`, so no change of basis is needed.
pub fn base_log_density(u: &[f64], dims: Dims) -> f64 {
    let sq: f64 = u.iter().map(|x| x * x).sum();
    -0.5 * sq - 0.5 * dims.tangent_dim() as f64 * LN_2PI
}

/// Result of the backward density integration for one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CnfDensity {
    pub log_density: f64,
    /// `-int_0^t div f ds`.
    pub log_det: f64,
}

/// Rows per chunk for density evaluation.
const DENSITY_CHUNK: usize = 256;

/// Model log-density at time `t_end` for every row of `v`.
pub fn cnf_log_density_batch(
    field: &impl DensityField,
    v: ArrayView2<'_, f64>,
    t_end: f64,
    config: &IntegratorConfig,
) -> Result<Vec<CnfDensity>> {
    let dims = field.dims();
    let nc = dims.flat_len();
    if v.ncols() != nc {
        return Err(Error::Shape(format!("batch has {} columns, expected {nc}", v.ncols())));
    }
    if !(t_end > 0.0) {
        return Err(Error::Domain(format!("density time {t_end} must be positive")));
    }
    let basis = OrthonormalBasis::new(dims.c)?;
    let chunks: Vec<Vec<CnfDensity>> = v
        .axis_chunks_iter(Axis(0), DENSITY_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| {
            let b = chunk.nrows();
            let mut y0 = Array2::zeros((b, nc + 1));
            y0.slice_mut(ndarray::s![.., ..nc]).assign(&chunk);
            let end = integrate_system(
                y0,
                t_end,
                0.0,
                config,
                |y| {
                    let state = y.slice(ndarray::s![.., ..nc]);
                    let vel = field.velocity(state)?;
                    let div = field.divergence(state, &basis)?;
                    let mut out = Array2::zeros(y.raw_dim());
                    out.slice_mut(ndarray::s![.., ..nc]).assign(&vel);
                    out.column_mut(nc).assign(&div);
                    Ok(out)
                },
                |_, _| {},
            )?;
            Ok(end
                .rows()
                .into_iter()
                .map(|row| {
                    let s = row.as_slice().expect("row-major");
                    let log_det = s[nc];
                    CnfDensity {
                        log_density: base_log_density(&s[..nc], dims) + log_det,
                        log_det,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Model log-density `log nu~_t(v)` for a single tangent state.
pub fn cnf_log_density(
    field: &impl DensityField,
    v: &TangentMatrix,
    t_end: f64,
    config: &IntegratorConfig,
) -> Result<CnfDensity> {
    let dims = field.dims();
    if v.dims() != dims {
        return Err(Error::Shape(format!("tangent ({}) vs field ({dims})", v.dims())));
    }
    let x = ArrayView2::from_shape((1, dims.flat_len()), v.as_slice()).expect("flat");
    Ok(cnf_log_density_batch(field, x, t_end, config)?[0])
}

// ---------------------------------------------------------------------------
// Bound estimator.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodSettings {
    pub eps: f64,
    pub mass: f64,
    pub t_end: f64,
    pub integrator: IntegratorConfig,
}

impl Default for LikelihoodSettings {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            mass: DEFAULT_MASS,
            t_end: 1.0,
            integrator: IntegratorConfig::default(),
        }
    }
}

/// Importance-sampling estimate of the lower bound on `log p_alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct IsEstimate {
    /// Lower bound on `log p_alpha` in nats.
    pub bound: f64,
    /// `-bound / (n ln 2)`: an upper bound on the negative log-likelihood in
    /// bits per variable.
    pub bits_per_dim: f64,
    /// Per-sample terms `log nu~(v_k) - log rho(v_k)`.
    pub terms: Vec<f64>,
    pub n_samples: usize,
    /// Standard error of `bound`; `None` for a single sample.
    pub std_error: Option<f64>,
}

impl IsEstimate {
    fn from_terms(terms: Vec<f64>, n: usize) -> Self {
        let k = terms.len();
        let mean = terms.iter().sum::<f64>() / k as f64;
        let std_error = (k > 1).then(|| {
            let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
            (var / k as f64).sqrt()
        });
        Self {
            bound: mean,
            bits_per_dim: -mean / (n as f64 * std::f64::consts::LN_2),
            n_samples: k,
            terms,
            std_error,
        }
    }
}

/// Averages `log nu~_t(v) - log rho(v)` over `n_samples` proposal draws.
pub fn loglik_lower_bound<R: Rng + ?Sized>(
    field: &impl DensityField,
    alpha: &Configuration,
    n_samples: usize,
    rng: &mut R,
    settings: &LikelihoodSettings,
) -> Result<IsEstimate> {
    if n_samples == 0 {
        return Err(Error::Domain("need at least one importance sample".into()));
    }
    let dims = field.dims();
    let region = RegionSpec::new(alpha, dims, settings.eps, settings.mass)?;
    let mut v = Array2::zeros((n_samples, dims.flat_len()));
    let mut log_rho = Vec::with_capacity(n_samples);
    for mut row in v.rows_mut() {
        let (sample, lp, _) = sample_proposal(&region, rng)?;
        row.assign(&ndarray::ArrayView1::from(sample.as_slice()));
        log_rho.push(lp);
    }
    let dens = cnf_log_density_batch(field, v.view(), settings.t_end, &settings.integrator)?;
    let terms = dens.iter().zip(&log_rho).map(|(d, r)| d.log_density - r).collect();
    Ok(IsEstimate::from_terms(terms, dims.n))
}
