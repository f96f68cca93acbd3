//! Cross-module checks against independent oracles: closed forms from
//! `statrs`, brute-force searches, finite differences and quadrature.

use egflow::field::FieldKind;
use egflow::flow_matching::{rcfm_loss, sample_reference, training_tuple_at, TrainConfig, TrainingTuple};
use egflow::geometry::{exp_e_matrix, fisher_norm_sq, lift_from_barycenter, smoothed_corner};
use egflow::integrate::{IntegratorConfig, TangentField};
use egflow::likelihood::{
    chi2_cdf, cnf_log_density, cnf_log_density_batch, divergence_finite_difference, sample_proposal,
    sigma_from_mass, base_log_density, loglik_lower_bound, DensityField, LikelihoodSettings, OrthonormalBasis, RegionSpec,
};
use egflow::meta_simplex::{embed, entropy, entropy_of, marginalize, tv_distance};
use egflow::{AssignmentState, Configuration, Dims, FieldParams, FieldSpec, JointDistribution, TangentMatrix};
use ndarray::{Array1, Array2, ArrayView2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;

fn d(n: usize, c: usize) -> Dims {
    Dims::new(n, c).unwrap()
}

fn random_state(rng: &mut impl Rng, dims: Dims) -> AssignmentState {
    let u = TangentMatrix::project(Array2::from_shape_fn((dims.n, dims.c), |_| {
        2.0 * rng.sample::<f64, _>(StandardNormal)
    }));
    lift_from_barycenter(&u)
}

// ---------------------------------------------------------------------------
// Special functions.

#[test]
fn chi2_cdf_matches_closed_forms() {
    let mut worst: f64 = 0.0;
    for k in 0..=5000 {
        let x = k as f64 * 0.01;
        let one = erf((x / 2.0).sqrt());
        let two = 1.0 - (-x / 2.0).exp();
        worst = worst.max((chi2_cdf(x, 1) - one).abs());
        worst = worst.max((chi2_cdf(x, 2) - two).abs());
    }
    assert!(worst < 1e-9, "worst deviation {worst:e}");
}

#[test]
fn sigma_for_binary_factor_inverts_normal_quantile() {
    let phi = Normal::new(0.0, 1.0).unwrap();
    for &r in &[0.5, 1.0, 3.7424, 10.0] {
        let sigma = sigma_from_mass(r, 2, 0.8).unwrap().sqrt();
        let expected = r / phi.inverse_cdf(0.9);
        assert!((sigma - expected).abs() < 1e-9 * expected, "r={r}: {sigma} vs {expected}");
    }
}

// ---------------------------------------------------------------------------
// Embedding.

#[test]
fn entropy_is_maximal_at_the_product_for_fixed_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = d(2, 2);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..200 {
        let w = random_state(&mut rng, dims);
        let (a, b) = (w.view()[[0, 0]], w.view()[[1, 0]]);
        let h_product = entropy(&embed(&w).unwrap());
        // Joints with marginals (a, 1-a), (b, 1-b): p00 = s, p01 = a - s,
        // p10 = b - s, p11 = 1 - a - b + s.
        let lo = (a + b - 1.0).max(0.0);
        let hi = a.min(b);
        let grid = 20_000;
        for k in 0..=grid {
            let s = lo + (hi - lo) * k as f64 / grid as f64;
            let p = [s, a - s, b - s, 1.0 - a - b + s].map(|x| x.max(0.0));
            worst = worst.max(entropy_of(&p) - h_product);
        }
    }
    assert!(worst <= 1e-9, "a joint beat the product entropy by {worst:e}");
}

#[test]
fn vertices_embed_to_vertices() {
    for dims in [d(2, 2), d(3, 2), d(2, 3)] {
        let total = dims.num_configurations().unwrap() as usize;
        for idx in 0..total {
            let beta = Configuration::from_index(idx, dims);
            let corner = smoothed_corner(&beta, dims.c, 1e-13).unwrap();
            let p = embed(&corner).unwrap();
            let dirac = JointDistribution::dirac(dims, &beta).unwrap();
            assert!(tv_distance(&p, &dirac).unwrap() < 1e-11);
            let m = marginalize(&dirac);
            for (i, &label) in beta.labels().iter().enumerate() {
                for j in 0..dims.c {
                    assert_eq!(m[[i, j]], (j == label) as u8 as f64);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn marginalize_embed_identity_and_entropy_additivity(seed in any::<u64>(), n in 1usize..5, c in 2usize..5) {
        let dims = d(n, c);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_state(&mut rng, dims);
        let p = embed(&w).unwrap();
        prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        let m = marginalize(&p);
        for (a, b) in m.iter().zip(w.view().iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        let sum_rows: f64 = w.view().rows().into_iter().map(|r| entropy_of(r.as_slice().unwrap())).sum();
        prop_assert!((entropy(&p) - sum_rows).abs() < 1e-10);
    }
}

// ---------------------------------------------------------------------------
// Loss gradients.

fn random_batch(rng: &mut impl Rng, dims: Dims, size: usize) -> Vec<TrainingTuple> {
    (0..size)
        .map(|_| {
            let beta = Configuration::new((0..dims.n).map(|_| rng.random_range(0..dims.c)).collect());
            let t = rng.random::<f64>();
            let u0 = sample_reference(rng, dims);
            training_tuple_at(&beta, dims, 0.01, t, u0).unwrap()
        })
        .collect()
}

fn random_params(rng: &mut impl Rng, spec: FieldSpec) -> FieldParams {
    let zeros = FieldParams::zeros(spec.clone()).unwrap();
    let values = (0..zeros.num_params())
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    FieldParams::from_values(spec, values).unwrap()
}

/// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-4)` over all
/// parameters, with central differences at `h = 1e-5`.
fn gradient_error(params: &FieldParams, batch: &[TrainingTuple]) -> f64 {
    let (_, grad) = rcfm_loss(params, batch).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for k in 0..params.num_params() {
        let mut p = params.clone();
        p.values_mut()[k] += h;
        let plus = rcfm_loss(&p, batch).unwrap().0;
        p.values_mut()[k] -= 2.0 * h;
        let minus = rcfm_loss(&p, batch).unwrap().0;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grad.values[k];
        let scale = analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}

#[test]
fn loss_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let shapes = [d(1, 2), d(2, 2), d(1, 3), d(2, 3), d(2, 4), d(4, 2), d(1, 8)];
    let mut worst: f64 = 0.0;
    for &dims in &shapes {
        let specs = [
            FieldSpec::linear(dims),
            FieldSpec {
                dims,
                kind: FieldKind::Linear { bias: true },
            },
            FieldSpec::mlp(dims, vec![rng.random_range(2..=16)]),
            FieldSpec::mlp(dims, vec![rng.random_range(2..=16), rng.random_range(2..=16)]),
        ];
        for spec in specs {
            let params = random_params(&mut rng, spec);
            let batch = random_batch(&mut rng, dims, 8);
            worst = worst.max(gradient_error(&params, &batch));
        }
    }
    assert!(worst < 1e-5, "max relative gradient error {worst:e}");
}

// ---------------------------------------------------------------------------
// Reference measure.

/// Energy distance between two samples of flattened states.
fn energy_statistic(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
    let mean_between = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        let mut s = 0.0;
        for p in a {
            for q in b {
                s += dist(p, q);
            }
        }
        s / (a.len() * b.len()) as f64
    };
    2.0 * mean_between(x, y) - mean_between(x, x) - mean_between(y, y)
}

#[test]
fn start_of_the_path_does_not_depend_on_the_target() {
    let dims = d(2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let batch = |rng: &mut ChaCha8Rng, beta: &Configuration| -> Vec<Vec<f64>> {
        (0..150)
            .map(|_| {
                let u0 = sample_reference(rng, dims);
                training_tuple_at(beta, dims, 0.01, 0.0, u0).unwrap().w_t.as_slice().to_vec()
            })
            .collect()
    };
    let a = batch(&mut rng, &Configuration::new(vec![0, 0]));
    let b = batch(&mut rng, &Configuration::new(vec![2, 1]));
    let observed = energy_statistic(&a, &b);
    // Permutation test.
    let mut pooled: Vec<Vec<f64>> = a.iter().chain(&b).cloned().collect();
    let perms = 200;
    let mut exceed = 0;
    for _ in 0..perms {
        for i in (1..pooled.len()).rev() {
            let j = rng.random_range(0..=i);
            pooled.swap(i, j);
        }
        let (x, y) = pooled.split_at(150);
        if energy_statistic(x, y) >= observed {
            exceed += 1;
        }
    }
    let p_value = (exceed + 1) as f64 / (perms + 1) as f64;
    assert!(p_value > 0.01, "p = {p_value}");

    // Sanity: by t = 1 the two targets are separated.
    let late = |rng: &mut ChaCha8Rng, beta: &Configuration| -> Vec<Vec<f64>> {
        (0..50)
            .map(|_| {
                let u0 = sample_reference(rng, dims);
                training_tuple_at(beta, dims, 0.01, 0.9, u0).unwrap().w_t.as_slice().to_vec()
            })
            .collect()
    };
    let a = late(&mut rng, &Configuration::new(vec![0, 0]));
    let b = late(&mut rng, &Configuration::new(vec![2, 1]));
    assert!(energy_statistic(&a, &b) > 10.0 * observed.abs());
}

#[test]
fn reference_is_standard_normal_in_basis_coordinates() {
    let dims = d(1, 4);
    let basis = OrthonormalBasis::new(4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 100_000;
    let mut cov = [[0.0; 3]; 3];
    for _ in 0..m {
        let u = sample_reference(&mut rng, dims);
        let z = basis.to_coords(u.as_slice());
        for a in 0..3 {
            for b in 0..3 {
                cov[a][b] += z[a] * z[b] / m as f64;
            }
        }
    }
    for (a, row) in cov.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            let expected = (a == b) as u8 as f64;
            assert!((v - expected).abs() < 0.02, "cov[{a}][{b}] = {v}");
        }
    }
}

// ---------------------------------------------------------------------------
// Likelihood geometry.

/// Uniform direction on the unit sphere in `k` dimensions.
fn unit_direction(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    loop {
        let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
        let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return z.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn rounds_to(center: &[f64], offset: &[f64], label: usize) -> bool {
    let v: Vec<f64> = center.iter().zip(offset).map(|(a, b)| a + b).collect();
    let (best, _) = egflow::geometry::argmax(&v);
    let unique = v.iter().filter(|&&x| x == v[best]).count() == 1;
    best == label && unique
}

#[test]
fn region_balls_round_to_their_vertex() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for c in 2..=4 {
        let dims = d(1, c);
        let basis = OrthonormalBasis::new(c).unwrap();
        for label in 0..c {
            let alpha = Configuration::new(vec![label]);
            let region = RegionSpec::new(&alpha, dims, 0.01, 0.8).unwrap();
            let center = region.center.as_slice().to_vec();
            let r = region.radii[0];
            // The closed ball touches the decision boundary, so boundary
            // points are taken a relative 1e-9 inside.
            for _ in 0..100_000 {
                let z: Vec<f64> = unit_direction(&mut rng, c - 1).iter().map(|x| x * r * (1.0 - 1e-9)).collect();
                assert!(rounds_to(&center, &basis.from_coords(&z), label), "c={c} label={label}");
            }
            // The radius is the largest one: slightly outside, towards the
            // nearest competing vertex, the rounding changes.
            let other = (label + 1) % c;
            let mut dir = vec![0.0; c];
            dir[other] = 1.0;
            dir[label] = -1.0;
            let z = basis.to_coords(&dir);
            let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z: Vec<f64> = z.iter().map(|x| x / norm * r * 1.001).collect();
            assert!(!rounds_to(&center, &basis.from_coords(&z), label), "c={c}: radius not tight");
        }
    }
}

#[test]
fn proposal_samples_round_to_their_configuration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (n, c) in [(2, 2), (3, 3), (2, 4)] {
        let dims = d(n, c);
        for _ in 0..5 {
            let alpha = Configuration::new((0..n).map(|_| rng.random_range(0..c)).collect());
            let region = RegionSpec::new(&alpha, dims, 0.01, 0.8).unwrap();
            for _ in 0..2000 {
                let (v, _, _) = sample_proposal(&region, &mut rng).unwrap();
                let w = lift_from_barycenter(&v);
                assert_eq!(w.argmax_rows().0, alpha.labels());
            }
        }
    }
}

#[test]
fn proposal_acceptance_rate_matches_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for c in 2..=4 {
        let region = RegionSpec::new(&Configuration::new(vec![c - 1]), d(1, c), 0.01, 0.8).unwrap();
        let trials = 100_000;
        let mut draws = 0;
        for _ in 0..trials {
            draws += sample_proposal(&region, &mut rng).unwrap().2;
        }
        let rate = trials as f64 / draws as f64;
        assert!((rate - 0.8).abs() < 0.01, "c={c}: rate {rate}");
    }
}

#[test]
fn proposal_density_is_normalized_on_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for c in [2, 3] {
        let dims = d(1, c);
        let basis = OrthonormalBasis::new(c).unwrap();
        let region = RegionSpec::new(&Configuration::new(vec![0]), dims, 0.01, 0.8).unwrap();
        let r = region.radii[0];
        let center = region.center.as_slice().to_vec();
        let k = c - 1;
        let box_volume = (2.0 * r).powi(k as i32);
        let m = 400_000;
        let mut sum = 0.0;
        for _ in 0..m {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-r..r)).collect();
            let off = basis.from_coords(&z);
            let v: Vec<f64> = center.iter().zip(&off).map(|(a, b)| a + b).collect();
            let lp = region.log_density(&TangentMatrix::project(Array2::from_shape_vec((1, c), v).unwrap()));
            sum += lp.exp();
        }
        let integral = sum / m as f64 * box_volume;
        assert!((integral - 1.0).abs() < 0.01, "c={c}: {integral}");
    }
}

// ---------------------------------------------------------------------------
// Continuous normalizing flow.

/// `z' = A z` in the basis coordinates of a single factor.
struct LinearCoordField {
    dims: Dims,
    basis: OrthonormalBasis,
    a: Array2<f64>,
}

impl TangentField for LinearCoordField {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn velocity(&self, u: ArrayView2<'_, f64>) -> egflow::Result<Array2<f64>> {
        let q = self.basis.matrix();
        let m = q.dot(&self.a).dot(&q.t());
        Ok(u.dot(&m.t()))
    }
}

impl DensityField for LinearCoordField {
    fn divergence(&self, u: ArrayView2<'_, f64>, basis: &OrthonormalBasis) -> egflow::Result<Array1<f64>> {
        let values = u
            .rows()
            .into_iter()
            .map(|row| {
                let t = TangentMatrix::new(row.to_owned().into_shape_with_order((1, self.dims.c)).unwrap()).unwrap();
                divergence_finite_difference(self, &t, basis, 1e-6).unwrap()
            })
            .collect::<Vec<_>>();
        Ok(Array1::from(values))
    }
}

#[test]
fn linear_field_log_det_is_minus_trace() {
    let c = 3;
    let a = ndarray::array![[0.3, -0.7], [0.4, 0.5]];
    let trace = a[[0, 0]] + a[[1, 1]];
    let field = LinearCoordField {
        dims: d(1, c),
        basis: OrthonormalBasis::new(c).unwrap(),
        a,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for &t in &[0.5, 1.0] {
        for _ in 0..5 {
            let v = sample_reference(&mut rng, d(1, c));
            let dens = cnf_log_density(&field, &v, t, &IntegratorConfig::default()).unwrap();
            assert!((dens.log_det + trace * t).abs() < 1e-8, "{} vs {}", dens.log_det, -trace * t);
        }
    }
}

#[test]
fn zero_field_keeps_the_base_density() {
    let dims = d(3, 3);
    let field = FieldParams::zeros(FieldSpec::linear(dims)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut v = Array2::from_shape_fn((32, dims.flat_len()), |_| rng.sample::<f64, _>(StandardNormal));
    egflow::integrate::project_batch(&mut v, dims);
    let dens = cnf_log_density_batch(&field, v.view(), 1.0, &IntegratorConfig::default()).unwrap();
    for (row, x) in v.rows().into_iter().zip(&dens) {
        assert_eq!(x.log_det, 0.0);
        assert_eq!(x.log_density, base_log_density(row.as_slice().unwrap(), dims));
    }
}

#[test]
fn bound_variance_shrinks_like_one_over_sample_count() {
    let dims = d(2, 3);
    let field = FieldParams::zeros(FieldSpec::linear(dims)).unwrap();
    let alpha = Configuration::new(vec![1, 2]);
    let settings = LikelihoodSettings::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut variance = |k: usize| {
        let reps = 300;
        let b: Vec<f64> = (0..reps)
            .map(|_| loglik_lower_bound(&field, &alpha, k, &mut rng, &settings).unwrap().bound)
            .collect();
        let mean = b.iter().sum::<f64>() / reps as f64;
        b.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64
    };
    let ratio = variance(10) / variance(40);
    assert!((2.8..5.6).contains(&ratio), "variance ratio {ratio}");
}

#[test]
fn model_density_integrates_to_one() {
    // A briefly trained MLP on two binaries; n (c - 1) = 2.
    let dims = d(2, 2);
    let target = egflow::targets::coupled_binaries().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data = target.sample(2000, &mut rng);
    let mut cfg = TrainConfig::new(FieldSpec::mlp(dims, vec![8]));
    cfg.steps = 200;
    cfg.batch_size = 64;
    cfg.lr = 5e-3;
    let params = egflow::flow_matching::train(&data, &cfg).unwrap().params;
    let basis = OrthonormalBasis::new(2).unwrap();
    let (g, l) = (160usize, 10.0);
    let h = 2.0 * l / g as f64;
    let mut v = Array2::zeros((g * g, 4));
    for a in 0..g {
        for b in 0..g {
            let za = basis.from_coords(&[-l + (a as f64 + 0.5) * h]);
            let zb = basis.from_coords(&[-l + (b as f64 + 0.5) * h]);
            let mut row = v.row_mut(a * g + b);
            row[0] = za[0];
            row[1] = za[1];
            row[2] = zb[0];
            row[3] = zb[1];
        }
    }
    let config = IntegratorConfig { steps: 40, ..Default::default() };
    let dens = cnf_log_density_batch(&params, v.view(), 1.0, &config).unwrap();
    let total: f64 = dens.iter().map(|x| x.log_density.exp() * h * h).sum();
    assert!((total - 1.0).abs() < 0.02, "total mass {total}");
}

#[test]
fn fisher_norm_of_start_velocity_is_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let dims = d(3, 4);
    let w = random_state(&mut rng, dims);
    let u = sample_reference(&mut rng, dims);
    let moved = exp_e_matrix(&w, &u).unwrap();
    assert!(fisher_norm_sq(&moved, &u).unwrap() > 0.0);
}
