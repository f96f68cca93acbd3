//! Riemannian conditional flow matching along e-geodesics.
//!
//! Every data configuration `beta` is represented by the smoothed vertex
//! `q_beta`. A training tuple draws a reference tangent `u0 ~ N_0`, a time
//! `t ~ U[0, 1]`, and the point `W_t = exp_1(u0 + t (u_beta - u0))` on the
//! e-geodesic to `q_beta`. The field is regressed onto the geodesic velocity
//! `R_{W_t}[u_beta - u0]` in the Fisher-Rao norm, which reduces to
//!
//! ```text
//! || R_{W_t}[F(W_t) - (u_beta - u0)] ||^2_{W_t}
//! ```
//!
//! and is evaluated with [`pushed_norm_sq_row`] so the replicator image is
//! never formed.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::field::{Adam, FieldParams, FieldSpec, Gradient, LrSchedule};
use crate::geometry::{
    corner_tangent_row, geodesic_point, pushed_norm_sq_row, AssignmentState, Dims, TangentMatrix,
};
use crate::meta_simplex::Configuration;

/// Smoothing constant for the vertex representation.
pub const DEFAULT_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub field: FieldSpec,
}

impl TrainConfig {
    /// Defaults: eps 0.01, batch 512, 2000 steps, Adam at 5e-4, constant rate.
    pub fn new(field: FieldSpec) -> Self {
        Self {
            eps: DEFAULT_EPS,
            batch_size: 512,
            steps: 2000,
            lr: 5e-4,
            schedule: LrSchedule::Constant,
            seed: 0,
            field,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::Domain(format!("eps {} outside (0, 1)", self.eps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Domain("batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Domain(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// One sample of the conditional objective.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTuple {
    pub t: f64,
    pub u0: TangentMatrix,
    pub u_beta: TangentMatrix,
    pub w_t: AssignmentState,
}

/// Draws `u0 ~ N_0`: a standard normal per row, projected onto the tangent space.
pub fn sample_reference<R: Rng + ?Sized>(rng: &mut R, dims: Dims) -> TangentMatrix {
    let raw = Array2::from_shape_simple_fn((dims.n, dims.c), || rng.sample::<f64, _>(StandardNormal));
    TangentMatrix::project(raw)
}

/// Tangent coordinates `u_beta = log_1(q_beta)` of the smoothed vertex.
pub fn corner_tangent(beta: &Configuration, dims: Dims, eps: f64) -> Result<TangentMatrix> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::Domain(format!("smoothing eps {eps} outside (0, 1)")));
    }
    beta.check(dims)?;
    let mut u = Array2::zeros((dims.n, dims.c));
    for (mut row, &label) in u.rows_mut().into_iter().zip(beta.labels()) {
        row.assign(&ndarray::Array1::from(corner_tangent_row(dims.c, label, eps)));
    }
    Ok(TangentMatrix::from_raw(u))
}

/// Builds a tuple at a given time from a given reference tangent.
pub fn training_tuple_at(
    beta: &Configuration,
    dims: Dims,
    eps: f64,
    t: f64,
    u0: TangentMatrix,
) -> Result<TrainingTuple> {
    let u_beta = corner_tangent(beta, dims, eps)?;
    let w_t = geodesic_point(&u0, &u_beta, t)?;
    Ok(TrainingTuple { t, u0, u_beta, w_t })
}

/// Draws `t ~ U[0,1]` and `u0 ~ N_0` and builds the tuple for `beta`.
pub fn make_training_tuple<R: Rng + ?Sized>(
    beta: &Configuration,
    dims: Dims,
    rng: &mut R,
    eps: f64,
) -> Result<TrainingTuple> {
    let t: f64 = rng.random();
    let u0 = sample_reference(rng, dims);
    training_tuple_at(beta, dims, eps, t, u0)
}

/// Mean conditional loss over `batch` and its parameter gradient.
pub fn rcfm_loss(params: &FieldParams, batch: &[TrainingTuple]) -> Result<(f64, Gradient)> {
    if batch.is_empty() {
        return Err(Error::Domain("empty training batch".into()));
    }
    let dims = params.dims();
    let nc = dims.flat_len();
    let b = batch.len();
    let mut x = Array2::zeros((b, nc));
    let mut target = Array2::zeros((b, nc));
    for (k, tuple) in batch.iter().enumerate() {
        if tuple.w_t.dims() != dims {
            return Err(Error::Shape(format!(
                "tuple {k} has dims ({}), field has ({dims})",
                tuple.w_t.dims()
            )));
        }
        let mut xr = x.row_mut(k);
        xr.assign(&ndarray::ArrayView1::from(tuple.w_t.as_slice()));
        let mut tr = target.row_mut(k);
        for ((t, a), b) in tr.iter_mut().zip(tuple.u_beta.as_slice()).zip(tuple.u0.as_slice()) {
            *t = a - b;
        }
    }
    let (loss, upstream, cache) = loss_and_upstream(params, &x, &target)?;
    let (grad, _) = params.backward(&cache, upstream.view())?;
    Ok((loss, grad))
}

/// Residual loss for a batch whose inputs and target directions are already
/// assembled as `B x nc` matrices. Returns the mean loss, `dLoss/dF`, and the
/// forward cache.
fn loss_and_upstream(
    params: &FieldParams,
    x: &Array2<f64>,
    target: &Array2<f64>,
) -> Result<(f64, Array2<f64>, crate::field::ForwardCache)> {
    let dims = params.dims();
    let (out, cache) = params.forward(x.view())?;
    let b = x.nrows();
    let scale = 1.0 / b as f64;
    let mut upstream = Array2::zeros((b, dims.flat_len()));
    let mut total = 0.0;
    let mut resid = vec![0.0; dims.c];
    for k in 0..b {
        let xs = x.row(k);
        let xs = xs.as_slice().expect("row-major");
        let fs = out.row(k);
        let fs = fs.as_slice().expect("row-major");
        let ts = target.row(k);
        let ts = ts.as_slice().expect("row-major");
        let mut ur = upstream.row_mut(k);
        let us = ur.as_slice_mut().expect("row-major");
        let mut tuple_loss = 0.0;
        for i in 0..dims.n {
            let span = i * dims.c..(i + 1) * dims.c;
            let w = &xs[span.clone()];
            for (r, (f, t)) in resid.iter_mut().zip(fs[span.clone()].iter().zip(&ts[span.clone()])) {
                *r = f - t;
            }
            tuple_loss += pushed_norm_sq_row(w, &resid);
            // d/dD of <D, Diag(w) D> - <w, D>^2 is 2 R_w[D].
            let mean: f64 = w.iter().zip(&resid).map(|(a, b)| a * b).sum();
            for ((u, &wj), &dj) in us[span].iter_mut().zip(w).zip(&resid) {
                *u = 2.0 * scale * wj * (dj - mean);
            }
        }
        if !tuple_loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: 0, tuple: k });
        }
        total += tuple_loss;
    }
    Ok((total * scale, upstream, cache))
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: FieldParams,
    /// Mean batch loss before each optimizer step.
    pub losses: Vec<f64>,
}

/// Trains a field on configurations resampled uniformly with replacement from
/// `dataset`. Deterministic given the config (including its seed) and the
/// dataset order.
pub fn train(dataset: &[Configuration], config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(dataset, config, |_, _| {})
}

/// [`train`] with a callback receiving `(step, loss)` after every step.
pub fn train_with(
    dataset: &[Configuration],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    config.validate()?;
    let dims = config.field.dims;
    if dataset.is_empty() {
        return Err(Error::Domain("empty training dataset".into()));
    }
    for beta in dataset {
        beta.check(dims)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = FieldParams::init(config.field.clone(), &mut rng)?;
    let mut adam = Adam::new(params.num_params(), config.lr);
    let mut losses = Vec::with_capacity(config.steps);

    // Tangent coordinates of each vertex row depend only on the label.
    let corner_rows: Vec<Vec<f64>> = (0..dims.c)
        .map(|label| corner_tangent_row(dims.c, label, config.eps))
        .collect();
    let nc = dims.flat_len();
    let b = config.batch_size;
    let mut x = Array2::zeros((b, nc));
    let mut target = Array2::zeros((b, nc));
    let mut u0 = vec![0.0; nc];

    for step in 0..config.steps {
        for k in 0..b {
            let beta = &dataset[rng.random_range(0..dataset.len())];
            let t: f64 = rng.random();
            for v in u0.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let mut xr = x.row_mut(k);
            let xs = xr.as_slice_mut().expect("row-major");
            let mut tr = target.row_mut(k);
            let ts = tr.as_slice_mut().expect("row-major");
            for (i, &label) in beta.labels().iter().enumerate() {
                let span = i * dims.c..(i + 1) * dims.c;
                crate::geometry::center_in_place(&mut u0[span.clone()]);
                let ub = &corner_rows[label];
                let mut ut = vec![0.0; dims.c];
                for j in 0..dims.c {
                    let a = u0[i * dims.c + j];
                    ts[i * dims.c + j] = ub[j] - a;
                    ut[j] = a + t * (ub[j] - a);
                }
                crate::geometry::softmax_row(&ut, &mut xs[span]);
            }
        }
        let (loss, upstream, cache) = loss_and_upstream(&params, &x, &target).map_err(|e| match e {
            Error::NonFiniteLoss { tuple, .. } => Error::NonFiniteLoss { step, tuple },
            other => other,
        })?;
        let (grad, _) = params.backward(&cache, upstream.view())?;
        adam.lr = config.schedule.rate(config.lr, step, config.steps);
        adam.step(&mut params, &grad)?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome { params, losses })
}
