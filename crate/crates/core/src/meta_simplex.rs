//! Dense joint distributions over all `N = c^n` configurations, and the maps
//! between them and the assignment manifold.
//!
//! Configurations are flattened in row-major order with the first variable
//! most significant, so for `n = c = 2` the order is `00, 01, 10, 11`.
//! Dense operations are only meant for small problems and refuse to allocate
//! more than [`DENSE_BUDGET`] entries.

use ndarray::Array2;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{AssignmentState, Dims};

/// Largest `N` any dense joint operation will allocate.
pub const DENSE_BUDGET: usize = 1 << 24;

const NORMALIZATION_TOLERANCE: f64 = 1e-10;

/// A full label assignment, one category per variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Configuration(Vec<usize>);

impl Configuration {
    pub fn new(labels: Vec<usize>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        if self.0.len() != dims.n {
            return Err(Error::Shape(format!(
                "configuration has {} labels, expected {}",
                self.0.len(),
                dims.n
            )));
        }
        if let Some(&l) = self.0.iter().find(|&&l| l >= dims.c) {
            return Err(Error::Domain(format!(
                "label {l} out of range for c={}",
                dims.c
            )));
        }
        Ok(())
    }

    /// Row-major flat index, first variable most significant.
    pub fn to_index(&self, c: usize) -> usize {
        self.0.iter().fold(0, |acc, &l| acc * c + l)
    }

    pub fn from_index(mut index: usize, dims: Dims) -> Self {
        let mut labels = vec![0; dims.n];
        for slot in labels.iter_mut().rev() {
            *slot = index % dims.c;
            index /= dims.c;
        }
        Self(labels)
    }
}

impl std::fmt::Display for Configuration {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

/// Checks `c^n` against the dense budget and returns it.
pub fn dense_size(dims: Dims) -> Result<usize> {
    match dims.num_configurations() {
        Some(size) if size <= DENSE_BUDGET as u128 => Ok(size as usize),
        other => Err(Error::DenseBudget {
            what: "joint distribution",
            size: other.unwrap_or(u128::MAX),
            limit: DENSE_BUDGET,
        }),
    }
}

/// A probability vector over all configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    dims: Dims,
    probs: Vec<f64>,
}

impl JointDistribution {
    pub fn new(dims: Dims, probs: Vec<f64>) -> Result<Self> {
        let size = dense_size(dims)?;
        if probs.len() != size {
            return Err(Error::Shape(format!(
                "joint has {} entries, expected {size}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Domain("joint entries must be finite and >= 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(Error::Domain(format!("joint entries sum to {s}")));
        }
        Ok(Self { dims, probs })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(dims: Dims, mut weights: Vec<f64>) -> Result<Self> {
        let s: f64 = weights.iter().sum();
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::Domain("weights must have positive finite sum".into()));
        }
        weights.iter_mut().for_each(|w| *w /= s);
        Self::new(dims, weights)
    }

    pub fn uniform(dims: Dims) -> Result<Self> {
        let size = dense_size(dims)?;
        Ok(Self {
            dims,
            probs: vec![1.0 / size as f64; size],
        })
    }

    /// The point mass `e_beta`.
    pub fn dirac(dims: Dims, beta: &Configuration) -> Result<Self> {
        beta.check(dims)?;
        let mut probs = vec![0.0; dense_size(dims)?];
        probs[beta.to_index(dims.c)] = 1.0;
        Ok(Self { dims, probs })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, alpha: &Configuration) -> f64 {
        self.probs[alpha.to_index(self.dims.c)]
    }

    /// Draws `count` i.i.d. configurations by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<Configuration> {
        let mut cdf = Vec::with_capacity(self.probs.len());
        let mut acc = 0.0;
        for p in &self.probs {
            acc += p;
            cdf.push(acc);
        }
        let total = acc;
        (0..count)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let idx = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                Configuration::from_index(idx, self.dims)
            })
            .collect()
    }

    /// Indices of the `k` most probable configurations, most probable first.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.probs.len()).collect();
        idx.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }
}

/// Product measure `T(W)_alpha = prod_i W_{i, alpha_i}`.
pub fn embed(w: &AssignmentState) -> Result<JointDistribution> {
    let dims = w.dims();
    let size = dense_size(dims)?;
    let wv = w.view();
    // Built one variable at a time: after step i the vector holds the joint of
    // the first i+1 variables in row-major order.
    let mut probs = Vec::with_capacity(size);
    probs.push(1.0);
    for i in 0..dims.n {
        let mut next = Vec::with_capacity(probs.len() * dims.c);
        for &p in &probs {
            for j in 0..dims.c {
                next.push(p * wv[[i, j]]);
            }
        }
        probs = next;
    }
    Ok(JointDistribution { dims, probs })
}

/// Marginalization `(Mp)_{i,j} = sum_{alpha: alpha_i = j} p_alpha`.
pub fn marginalize(p: &JointDistribution) -> Array2<f64> {
    let dims = p.dims;
    let mut m = Array2::zeros((dims.n, dims.c));
    for (idx, &prob) in p.probs.iter().enumerate() {
        let mut rest = idx;
        for i in (0..dims.n).rev() {
            m[[i, rest % dims.c]] += prob;
            rest /= dims.c;
        }
    }
    m
}

/// Shannon entropy in nats with `0 log 0 = 0`.
pub fn entropy(p: &JointDistribution) -> f64 {
    entropy_of(&p.probs)
}

pub fn entropy_of(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Normalized histogram of samples.
pub fn empirical_joint(samples: &[Configuration], dims: Dims) -> Result<JointDistribution> {
    if samples.is_empty() {
        return Err(Error::Domain("empirical joint of an empty sample".into()));
    }
    let size = dense_size(dims)?;
    let mut counts = vec![0u64; size];
    for s in samples {
        s.check(dims)?;
        counts[s.to_index(dims.c)] += 1;
    }
    let total = samples.len() as f64;
    Ok(JointDistribution {
        dims,
        probs: counts.into_iter().map(|k| k as f64 / total).collect(),
    })
}

/// Total-variation distance `1/2 sum |p - q|`.
pub fn tv_distance(p: &JointDistribution, q: &JointDistribution) -> Result<f64> {
    if p.dims != q.dims {
        return Err(Error::Shape(format!("joint dims ({}) vs ({})", p.dims, q.dims)));
    }
    Ok(tv_of(&p.probs, &q.probs))
}

pub fn tv_of(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Per-variable marginal total-variation distances.
pub fn marginal_tv(p: &JointDistribution, q: &JointDistribution) -> Result<Vec<f64>> {
    if p.dims != q.dims {
        return Err(Error::Shape(format!("joint dims ({}) vs ({})", p.dims, q.dims)));
    }
    let (mp, mq) = (marginalize(p), marginalize(q));
    Ok(mp
        .rows()
        .into_iter()
        .zip(mq.rows())
        .map(|(a, b)| tv_of(&a.to_vec(), &b.to_vec()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::softmax_rows;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn d(n: usize, c: usize) -> Dims {
        Dims::new(n, c).unwrap()
    }

    fn random_state(dims: Dims, rng: &mut ChaCha8Rng) -> AssignmentState {
        let logits = Array2::from_shape_fn((dims.n, dims.c), |_| rng.random_range(-2.0..2.0));
        AssignmentState::new(softmax_rows(logits.view())).unwrap()
    }

    #[test]
    fn index_codec_is_row_major() {
        let dims = d(3, 4);
        assert_eq!(Configuration::new(vec![0, 0, 1]).to_index(4), 1);
        assert_eq!(Configuration::new(vec![1, 0, 0]).to_index(4), 16);
        for idx in 0..64 {
            assert_eq!(Configuration::from_index(idx, dims).to_index(4), idx);
        }
    }

    #[test]
    fn embed_examples() {
        let (w1, w2) = (0.3, 0.8);
        let w = AssignmentState::new(array![[w1, 1.0 - w1], [w2, 1.0 - w2]]).unwrap();
        let p = embed(&w).unwrap();
        let expect = [w1 * w2, w1 * (1.0 - w2), (1.0 - w1) * w2, (1.0 - w1) * (1.0 - w2)];
        for (a, b) in p.probs().iter().zip(expect) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let w = AssignmentState::new(array![[0.9, 0.1], [0.9, 0.1]]).unwrap();
        let p = embed(&w).unwrap();
        for (a, b) in p.probs().iter().zip([0.81, 0.09, 0.09, 0.01]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        let p = embed(&AssignmentState::barycenter(d(3, 3))).unwrap();
        assert!(p.probs().iter().all(|&x| (x - 1.0 / 27.0).abs() < 1e-15));
    }

    #[test]
    fn embed_respects_budget() {
        let w = AssignmentState::barycenter(d(25, 2));
        assert!(matches!(embed(&w), Err(Error::DenseBudget { .. })));
    }

    #[test]
    fn marginalize_examples() {
        let dims = d(2, 2);
        let p = JointDistribution::new(dims, vec![0.45, 0.05, 0.05, 0.45]).unwrap();
        let m = marginalize(&p);
        assert!(m.iter().all(|&x| (x - 0.5).abs() < 1e-15));
        let beta = Configuration::new(vec![1, 0]);
        let m = marginalize(&JointDistribution::dirac(dims, &beta).unwrap());
        assert_eq!(m, array![[0.0, 1.0], [1.0, 0.0]]);
    }

    #[test]
    fn marginalize_inverts_embed() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, c) in &[(1, 2), (2, 3), (3, 4), (5, 2)] {
            let w = random_state(d(n, c), &mut rng);
            let p = embed(&w).unwrap();
            assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
            let m = marginalize(&p);
            for (a, b) in m.iter().zip(w.as_slice()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn entropy_examples() {
        let dims = d(2, 2);
        assert_abs_diff_eq!(entropy(&JointDistribution::uniform(dims).unwrap()), 4f64.ln(), epsilon = 1e-15);
        let e = JointDistribution::dirac(dims, &Configuration::new(vec![1, 1])).unwrap();
        assert_eq!(entropy(&e), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = random_state(d(3, 3), &mut rng);
        let rows: f64 = w.view().rows().into_iter().map(|r| entropy_of(&r.to_vec())).sum();
        assert_abs_diff_eq!(entropy(&embed(&w).unwrap()), rows, epsilon = 1e-10);
    }

    #[test]
    fn empirical_examples() {
        let dims = d(2, 3);
        let a = Configuration::new(vec![2, 1]);
        let b = Configuration::new(vec![0, 0]);
        let p = empirical_joint(std::slice::from_ref(&a), dims).unwrap();
        assert_eq!(p, JointDistribution::dirac(dims, &a).unwrap());
        let p = empirical_joint(&[a.clone(), b.clone()], dims).unwrap();
        assert_eq!(p.prob(&a), 0.5);
        assert_eq!(p.prob(&b), 0.5);
        assert!(empirical_joint(&[], dims).is_err());
        assert!(empirical_joint(&[Configuration::new(vec![3, 0])], dims).is_err());
    }

    #[test]
    fn empirical_concentrates() {
        let dims = d(2, 2);
        let target = JointDistribution::new(dims, vec![0.45, 0.05, 0.05, 0.45]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = target.sample(1_000_000, &mut rng);
        let emp = empirical_joint(&draws, dims).unwrap();
        let bound = 3.0 * (4.0f64 / 1e6).sqrt();
        assert!(tv_distance(&emp, &target).unwrap() < bound);
    }

    #[test]
    fn tv_examples() {
        let dims = d(2, 2);
        let u = JointDistribution::uniform(dims).unwrap();
        let p = JointDistribution::new(dims, vec![0.45, 0.05, 0.05, 0.45]).unwrap();
        assert_eq!(tv_distance(&p, &p).unwrap(), 0.0);
        assert_abs_diff_eq!(tv_distance(&u, &p).unwrap(), 0.4, epsilon = 1e-15);
        let ea = JointDistribution::dirac(dims, &Configuration::new(vec![0, 1])).unwrap();
        let eb = JointDistribution::dirac(dims, &Configuration::new(vec![1, 1])).unwrap();
        assert_eq!(tv_distance(&ea, &eb).unwrap(), 1.0);
        let other = JointDistribution::uniform(d(1, 4)).unwrap();
        assert!(tv_distance(&u, &other).is_err());
        let m = marginal_tv(&u, &p).unwrap();
        assert!(m.iter().all(|&x| x.abs() < 1e-15));
    }

    #[test]
    fn joint_validation() {
        let dims = d(2, 2);
        assert!(JointDistribution::new(dims, vec![0.5, 0.5, 0.0]).is_err());
        assert!(JointDistribution::new(dims, vec![0.5, 0.6, 0.0, -0.1]).is_err());
        assert!(JointDistribution::new(dims, vec![0.5, 0.5, 0.1, 0.0]).is_err());
    }
}
