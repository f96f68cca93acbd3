//! Geometric integration of assignment flows in tangent coordinates.
//!
//! Writing `W(t) = exp_1(u(t))` with `u(t)` in the flat tangent space, the
//! differential of the barycenter lift is the replicator map, so
//! `W' = R_W[F(W)]` holds exactly when
//!
//! ```text
//! u' = P0 F(exp_1(u))
//! ```
//!
//! with `P0` the row-wise mean subtraction. Integrating `u` keeps every
//! iterate on the manifold without projection or renormalization, and gives
//! the likelihood code a flat space for the change of variables.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::flow_matching::sample_reference;
use crate::geometry::{argmax, center_in_place, softmax_row, Dims, TangentMatrix};
use crate::meta_simplex::Configuration;

/// A vector field on the product tangent space, evaluated on batches whose
/// rows are flattened `n x c` tangent matrices.
pub trait TangentField: Sync {
    fn dims(&self) -> Dims;

    /// Velocities for every row of `u`; each output row lies in the tangent space.
    fn velocity(&self, u: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Row-wise softmax of a batch of flattened tangent matrices.
pub fn lift_batch(u: ArrayView2<'_, f64>, dims: Dims) -> Array2<f64> {
    let mut w = Array2::zeros(u.raw_dim());
    for (ur, mut wr) in u.rows().into_iter().zip(w.rows_mut()) {
        let us = ur.to_vec();
        let ws = wr.as_slice_mut().expect("fresh array");
        for i in 0..dims.n {
            let span = i * dims.c..(i + 1) * dims.c;
            softmax_row(&us[span.clone()], &mut ws[span]);
        }
    }
    w
}

/// Row-wise mean subtraction within each variable block.
pub fn project_batch(a: &mut Array2<f64>, dims: Dims) {
    for mut row in a.rows_mut() {
        let s = row.as_slice_mut().expect("row-major");
        for block in s.chunks_mut(dims.c) {
            center_in_place(block);
        }
    }
}

impl TangentField for FieldParams {
    fn dims(&self) -> Dims {
        FieldParams::dims(self)
    }

    fn velocity(&self, u: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let dims = FieldParams::dims(self);
        let w = lift_batch(u, dims);
        let mut f = self.evaluate(w.view())?;
        project_batch(&mut f, dims);
        Ok(f)
    }
}

/// `P0 F(exp_1(u))` for a single tangent matrix.
pub fn lifted_rhs(field: &impl TangentField, u: &TangentMatrix) -> Result<TangentMatrix> {
    let dims = field.dims();
    if u.dims() != dims {
        return Err(Error::Shape(format!("tangent ({}) vs field ({dims})", u.dims())));
    }
    let x = ArrayView2::from_shape((1, dims.flat_len()), u.as_slice()).expect("flat");
    let v = field.velocity(x)?;
    Ok(TangentMatrix::from_raw(
        v.into_shape_with_order((dims.n, dims.c)).expect("flat"),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Rk4,
    Euler,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Scheme::Rk4),
            "euler" => Ok(Scheme::Euler),
            other => Err(Error::Domain(format!("unknown integration scheme '{other}'"))),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Rk4 => "rk4",
            Scheme::Euler => "euler",
        })
    }
}

/// Fixed-step integrator settings. The direction follows from the sign of
/// `t1 - t0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub scheme: Scheme,
    pub steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            steps: 100,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            Err(Error::Domain("integrator needs at least one step".into()))
        } else {
            Ok(())
        }
    }
}

/// Stored states of an integration, including both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<TangentMatrix>,
}

fn check_finite(y: &Array2<f64>, step: usize) -> Result<()> {
    if y.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration { step })
    }
}

/// Integrates the autonomous system `y' = f(y)` on a batch with fixed steps
/// of size `(t1 - t0) / steps`, calling `observe(step, y)` after each step.
pub fn integrate_system(
    y0: Array2<f64>,
    t0: f64,
    t1: f64,
    config: &IntegratorConfig,
    mut f: impl FnMut(ArrayView2<'_, f64>) -> Result<Array2<f64>>,
    mut observe: impl FnMut(usize, &Array2<f64>),
) -> Result<Array2<f64>> {
    config.validate()?;
    if t0 == t1 || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::Domain(format!("invalid integration interval [{t0}, {t1}]")));
    }
    let h = (t1 - t0) / config.steps as f64;
    let mut y = y0;
    check_finite(&y, 0)?;
    for step in 1..=config.steps {
        y = match config.scheme {
            Scheme::Euler => {
                let k1 = f(y.view())?;
                y + &(k1 * h)
            }
            Scheme::Rk4 => {
                let k1 = f(y.view())?;
                let k2 = f((&y + &(&k1 * (0.5 * h))).view())?;
                let k3 = f((&y + &(&k2 * (0.5 * h))).view())?;
                let k4 = f((&y + &(&k3 * h)).view())?;
                let incr = (k1 + &(k2 * 2.0) + &(k3 * 2.0) + &k4) * (h / 6.0);
                y + &incr
            }
        };
        check_finite(&y, step)?;
        observe(step, &y);
    }
    Ok(y)
}

/// Integrates a batch of tangent states from `t0` to `t1`.
pub fn integrate_batch(
    field: &impl TangentField,
    u_start: Array2<f64>,
    t0: f64,
    t1: f64,
    config: &IntegratorConfig,
) -> Result<Array2<f64>> {
    let nc = field.dims().flat_len();
    if u_start.ncols() != nc {
        return Err(Error::Shape(format!("batch has {} columns, expected {nc}", u_start.ncols())));
    }
    integrate_system(u_start, t0, t1, config, |y| field.velocity(y), |_, _| {})
}

/// Integrates a single tangent state from `t0` to `t1` (either direction).
pub fn integrate(
    field: &impl TangentField,
    u_start: &TangentMatrix,
    t0: f64,
    t1: f64,
    config: &IntegratorConfig,
) -> Result<TangentMatrix> {
    Ok(integrate_traced(field, u_start, t0, t1, config, false)?.0)
}

/// Like [`integrate`], optionally recording every step.
pub fn integrate_traced(
    field: &impl TangentField,
    u_start: &TangentMatrix,
    t0: f64,
    t1: f64,
    config: &IntegratorConfig,
    record: bool,
) -> Result<(TangentMatrix, Option<Trajectory>)> {
    let dims = field.dims();
    if u_start.dims() != dims {
        return Err(Error::Shape(format!("tangent ({}) vs field ({dims})", u_start.dims())));
    }
    let y0 = Array2::from_shape_vec((1, dims.flat_len()), u_start.as_slice().to_vec()).expect("flat");
    let h = (t1 - t0) / config.steps.max(1) as f64;
    let mut traj = record.then(|| Trajectory {
        times: vec![t0],
        states: vec![u_start.clone()],
    });
    let to_matrix = |y: &Array2<f64>| {
        TangentMatrix::from_raw(y.clone().into_shape_with_order((dims.n, dims.c)).expect("flat"))
    };
    let y = integrate_system(
        y0,
        t0,
        t1,
        config,
        |y| field.velocity(y),
        |step, y| {
            if let Some(tr) = traj.as_mut() {
                let t = if step == config.steps { t1 } else { t0 + step as f64 * h };
                tr.times.push(t);
                tr.states.push(to_matrix(y));
            }
        },
    )?;
    Ok((to_matrix(&y), traj))
}

/// Rows per integration chunk when sampling.
const SAMPLE_CHUNK: usize = 1024;

/// Generated configurations and the number of rows where rounding hit a tie.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub configurations: Vec<Configuration>,
    pub ties: usize,
}

/// Draws `u0 ~ N_0`, integrates to `t = 1` and rounds `exp_1(u1)` row-wise by
/// argmax. All reference draws come from `rng` in order before integration,
/// so the result does not depend on the thread count.
pub fn sample_configurations<R: Rng + ?Sized>(
    field: &impl TangentField,
    count: usize,
    rng: &mut R,
    config: &IntegratorConfig,
) -> Result<SampleOutcome> {
    config.validate()?;
    let dims = field.dims();
    let nc = dims.flat_len();
    let mut starts = Array2::zeros((count, nc));
    for mut row in starts.rows_mut() {
        let u = sample_reference(rng, dims);
        row.assign(&ndarray::ArrayView1::from(u.as_slice()));
    }
    let finals: Vec<Array2<f64>> = starts
        .axis_chunks_iter(Axis(0), SAMPLE_CHUNK)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|chunk| integrate_batch(field, chunk.to_owned(), 0.0, 1.0, config))
        .collect::<Result<_>>()?;
    let mut ties = 0;
    let mut configurations = Vec::with_capacity(count);
    for chunk in &finals {
        for row in chunk.rows() {
            let s = row.as_slice().expect("row-major");
            // Softmax preserves the order within a row, so the argmax of the
            // tangent coordinates is the argmax of the lifted state.
            let labels = s
                .chunks(dims.c)
                .map(|block| {
                    let (label, tied) = argmax(block);
                    ties += tied as usize;
                    label
                })
                .collect();
            configurations.push(Configuration::new(labels));
        }
    }
    Ok(SampleOutcome {
        configurations,
        ties,
    })
}
