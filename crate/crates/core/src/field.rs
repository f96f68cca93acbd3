//! Parametrized fitness functions `F_theta: W -> R^{n x c}`.
//!
//! Two variants are provided: a single linear map of the flattened state
//! (optionally with bias) and a ReLU multilayer perceptron. Both are stored as
//! a chain of dense layers whose parameters live in one flat `Vec<f64>`, which
//! keeps the optimizer, checkpointing and gradient checks shape-agnostic.
//!
//! All evaluation is batched: inputs are `B x nc` matrices whose rows are
//! flattened assignment states.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{AssignmentState, Dims};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FieldKind {
    Linear { bias: bool },
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub dims: Dims,
    pub kind: FieldKind,
}

impl FieldSpec {
    /// Bias-free linear field.
    pub fn linear(dims: Dims) -> Self {
        Self {
            dims,
            kind: FieldKind::Linear { bias: false },
        }
    }

    pub fn mlp(dims: Dims, hidden: Vec<usize>) -> Self {
        Self {
            dims,
            kind: FieldKind::Mlp { hidden },
        }
    }

    /// Layer widths from input to output, `[nc, h1, ..., nc]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let nc = self.dims.flat_len();
        match &self.kind {
            FieldKind::Linear { .. } => vec![nc, nc],
            FieldKind::Mlp { hidden } => {
                let mut sizes = Vec::with_capacity(hidden.len() + 2);
                sizes.push(nc);
                sizes.extend(hidden);
                sizes.push(nc);
                sizes
            }
        }
    }

    fn has_bias(&self) -> bool {
        match self.kind {
            FieldKind::Linear { bias } => bias,
            FieldKind::Mlp { .. } => true,
        }
    }

    fn validate(&self) -> Result<()> {
        if let FieldKind::Mlp { hidden } = &self.kind {
            if hidden.is_empty() || hidden.contains(&0) {
                return Err(Error::Dims(format!("invalid hidden layer sizes {hidden:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    input: usize,
    output: usize,
    weight: usize,
    bias: Option<usize>,
    relu: bool,
}

fn layout(spec: &FieldSpec) -> (Vec<Layer>, usize) {
    let sizes = spec.layer_sizes();
    let bias = spec.has_bias();
    let mut offset = 0;
    let mut layers = Vec::with_capacity(sizes.len() - 1);
    for (l, pair) in sizes.windows(2).enumerate() {
        let (input, output) = (pair[0], pair[1]);
        let weight = offset;
        offset += input * output;
        let b = bias.then(|| {
            let at = offset;
            offset += output;
            at
        });
        layers.push(Layer {
            input,
            output,
            weight,
            bias: b,
            relu: l + 2 < sizes.len(),
        });
    }
    (layers, offset)
}

/// Parameters `theta` together with their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    spec: FieldSpec,
    layers: Vec<Layer>,
    values: Vec<f64>,
}

/// Gradient with the same layout as the [`FieldParams`] it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn add_assign(&mut self, other: &Gradient) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.values.iter_mut().for_each(|g| *g *= k);
    }
}

/// Intermediate values kept by [`FieldParams::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of every layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every ReLU layer (`None` for linear output layers).
    pre: Vec<Option<Array2<f64>>>,
}

impl FieldParams {
    /// Zero-initialized parameters.
    pub fn zeros(spec: FieldSpec) -> Result<Self> {
        spec.validate()?;
        let (layers, len) = layout(&spec);
        Ok(Self {
            spec,
            layers,
            values: vec![0.0; len],
        })
    }

    /// Zeros for the linear variant, He-uniform weights and zero biases for
    /// the MLP.
    pub fn init<R: Rng + ?Sized>(spec: FieldSpec, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if matches!(params.spec.kind, FieldKind::Mlp { .. }) {
            for l in 0..params.layers.len() {
                let layer = params.layers[l].clone();
                let bound = (6.0 / layer.input as f64).sqrt();
                for w in &mut params.values[layer.weight..layer.weight + layer.input * layer.output] {
                    *w = rng.random_range(-bound..bound);
                }
            }
        }
        Ok(params)
    }

    pub fn from_values(spec: FieldSpec, values: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(spec)?;
        if values.len() != params.values.len() {
            return Err(Error::Shape(format!(
                "{} parameter values, layout needs {}",
                values.len(),
                params.values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("field parameters".into()));
        }
        params.values = values;
        Ok(params)
    }

    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn dims(&self) -> Dims {
        self.spec.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Weight matrix of layer `l`, shaped `output x input`.
    pub fn weight(&self, l: usize) -> ArrayView2<'_, f64> {
        let layer = &self.layers[l];
        ArrayView2::from_shape(
            (layer.output, layer.input),
            &self.values[layer.weight..layer.weight + layer.input * layer.output],
        )
        .expect("layout")
    }

    pub fn weight_mut(&mut self, l: usize) -> ndarray::ArrayViewMut2<'_, f64> {
        let layer = self.layers[l].clone();
        ndarray::ArrayViewMut2::from_shape(
            (layer.output, layer.input),
            &mut self.values[layer.weight..layer.weight + layer.input * layer.output],
        )
        .expect("layout")
    }

    pub fn bias(&self, l: usize) -> Option<ArrayView1<'_, f64>> {
        let layer = &self.layers[l];
        layer
            .bias
            .map(|at| ArrayView1::from(&self.values[at..at + layer.output]))
    }

    pub fn bias_mut(&mut self, l: usize) -> Option<ndarray::ArrayViewMut1<'_, f64>> {
        let layer = self.layers[l].clone();
        layer
            .bias
            .map(move |at| ndarray::ArrayViewMut1::from(&mut self.values[at..at + layer.output]))
    }

    fn check_input(&self, x: &ArrayView2<'_, f64>) -> Result<()> {
        let nc = self.spec.dims.flat_len();
        if x.ncols() != nc {
            return Err(Error::Shape(format!(
                "field input has {} columns, expected {nc}",
                x.ncols()
            )));
        }
        Ok(())
    }

    fn affine(&self, l: usize, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight(l).t());
        if let Some(b) = self.bias(l) {
            z += &b;
        }
        z
    }

    /// Evaluates the field on a batch without keeping intermediates.
    pub fn evaluate(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut h = self.affine(0, x);
        for l in 1..self.layers.len() {
            if self.layers[l - 1].relu {
                h.mapv_inplace(|v| v.max(0.0));
            }
            h = self.affine(l, h.view());
        }
        Ok(h)
    }

    /// Evaluates the field on a batch and records what backward needs.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = self.affine(l, h.view());
            inputs.push(h);
            if layer.relu {
                h = z.mapv(|v| v.max(0.0));
                pre.push(Some(z));
            } else {
                h = z;
                pre.push(None);
            }
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// `F_theta(W)` for a single state, shaped `n x c`.
    pub fn forward_state(&self, w: &AssignmentState) -> Result<Array2<f64>> {
        let dims = self.spec.dims;
        if w.dims() != dims {
            return Err(Error::Shape(format!("state ({}) vs field ({dims})", w.dims())));
        }
        let x = ArrayView2::from_shape((1, dims.flat_len()), w.as_slice()).expect("flat");
        let out = self.evaluate(x)?;
        Ok(out.into_shape_with_order((dims.n, dims.c)).expect("flat"))
    }

    /// Reverse-mode pass: given `upstream = dL/dF` for the batch, returns the
    /// parameter gradient (summed over the batch) and `dL/dx`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<(Gradient, Array2<f64>)> {
        let mut grad = Gradient::zeros(self.values.len());
        let input_grad = self.backward_into(cache, upstream, Some(&mut grad))?;
        Ok((grad, input_grad))
    }

    /// Like [`backward`](Self::backward) but only propagates to the input.
    pub fn input_gradient(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.backward_into(cache, upstream, None)
    }

    fn backward_into(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<'_, f64>,
        mut grad: Option<&mut Gradient>,
    ) -> Result<Array2<f64>> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("forward cache does not match the field".into()));
        }
        let batch = cache.inputs[0].nrows();
        let out_dim = self.layers.last().expect("at least one layer").output;
        if upstream.dim() != (batch, out_dim) {
            return Err(Error::Shape(format!(
                "upstream {:?}, expected {:?}",
                upstream.dim(),
                (batch, out_dim)
            )));
        }
        let mut g = upstream.to_owned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(z) = &cache.pre[l] {
                ndarray::Zip::from(&mut g)
                    .and(z)
                    .for_each(|g, &z| if z <= 0.0 { *g = 0.0 });
            }
            if let Some(grad) = grad.as_deref_mut() {
                let dw = g.t().dot(&cache.inputs[l]);
                let slot = &mut grad.values[layer.weight..layer.weight + layer.input * layer.output];
                for (s, d) in slot.iter_mut().zip(dw.iter()) {
                    *s += d;
                }
                if let Some(at) = layer.bias {
                    let db = g.sum_axis(Axis(0));
                    for (s, d) in grad.values[at..at + layer.output].iter_mut().zip(db.iter()) {
                        *s += d;
                    }
                }
            }
            g = g.dot(&self.weight(l));
        }
        Ok(g)
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Cosine annealing from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

/// Adam optimizer with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update with the current `lr`. A non-finite gradient aborts
    /// the step before any state changes.
    pub fn step(&mut self, params: &mut FieldParams, grad: &Gradient) -> Result<()> {
        if grad.values.len() != params.values.len() || self.m.len() != params.values.len() {
            return Err(Error::Shape(format!(
                "gradient {} / optimizer {} / params {}",
                grad.values.len(),
                self.m.len(),
                params.values.len()
            )));
        }
        if let Some(i) = grad.values.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient entry {i}")));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .values
            .iter_mut()
            .zip(&grad.values)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
