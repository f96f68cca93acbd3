//! C ABI over the `egflow` library.
//!
//! Every fallible function returns an `int32_t` status: `EGFLOW_OK` on
//! success, otherwise one of the `EGFLOW_ERR_*` codes (they match the exit
//! codes of the command-line tool). The message of the most recent failure on
//! the calling thread is available from [`egflow_last_error`].
//!
//! Models are opaque handles created by [`egflow_train`] or
//! [`egflow_model_load`] and released with [`egflow_model_free`].
//! Configurations cross the boundary as row-major `uint32_t` label arrays,
//! `n` labels per configuration.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use egflow::commands::exit_code;
use egflow::field::LrSchedule;
use egflow::flow_matching::{train, TrainConfig};
use egflow::integrate::{sample_configurations, IntegratorConfig, Scheme};
use egflow::io::{read_checkpoint, write_checkpoint, Checkpoint};
use egflow::likelihood::{loglik_lower_bound, LikelihoodSettings};
use egflow::{Configuration, Dims, Error, FieldSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const EGFLOW_OK: i32 = 0;
pub const EGFLOW_ERR_OTHER: i32 = 1;
/// A required pointer was null or an argument was out of range.
pub const EGFLOW_ERR_ARGUMENT: i32 = 2;
pub const EGFLOW_ERR_IO: i32 = 3;
pub const EGFLOW_ERR_PARSE: i32 = 4;
pub const EGFLOW_ERR_DIMS: i32 = 5;
pub const EGFLOW_ERR_NONFINITE_LOSS: i32 = 6;
pub const EGFLOW_ERR_CHECKPOINT: i32 = 7;
pub const EGFLOW_ERR_NUMERICAL: i32 = 8;
pub const EGFLOW_ERR_DENSE_BUDGET: i32 = 9;
pub const EGFLOW_ERR_DOMAIN: i32 = 10;
/// An internal panic was caught at the boundary.
pub const EGFLOW_ERR_PANIC: i32 = 11;

pub const EGFLOW_FIELD_LINEAR: u32 = 0;
pub const EGFLOW_FIELD_MLP: u32 = 1;

pub const EGFLOW_SCHEME_RK4: u32 = 0;
pub const EGFLOW_SCHEME_EULER: u32 = 1;

/// A trained field with its smoothing constant and default integrator.
pub struct EgflowModel {
    checkpoint: Checkpoint,
}

/// Training settings. Obtain defaults from [`egflow_train_options_default`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct EgflowTrainOptions {
    /// `EGFLOW_FIELD_LINEAR` or `EGFLOW_FIELD_MLP`.
    pub field: u32,
    /// Hidden widths of the MLP field; ignored for the linear field.
    pub hidden: *const usize,
    pub hidden_len: usize,
    /// Nonzero adds a bias to the linear field.
    pub bias: u8,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    /// Nonzero selects cosine annealing instead of a constant rate.
    pub cosine: u8,
    pub seed: u64,
    /// Integrator stored with the model: `EGFLOW_SCHEME_RK4` or `EGFLOW_SCHEME_EULER`.
    pub scheme: u32,
    pub integrator_steps: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(exit_code(&e), e.to_string())
    }
}

fn argument(msg: impl Into<String>) -> Failure {
    Failure(EGFLOW_ERR_ARGUMENT, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EGFLOW_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            EGFLOW_ERR_PANIC
        }
    }
}

fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(argument("path is null"));
    }
    // SAFETY: non-null and, per the contract, a nul-terminated string.
    let s = unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| argument("path is not valid UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn model_ref<'a>(m: *const EgflowModel) -> Result<&'a EgflowModel, Failure> {
    // SAFETY: a non-null handle was produced by this library and not yet freed.
    unsafe { m.as_ref() }.ok_or_else(|| argument("model handle is null"))
}

fn labels_arg<'a>(labels: *const u32, len: usize) -> Result<&'a [u32], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if labels.is_null() {
        return Err(argument("labels pointer is null"));
    }
    // SAFETY: the caller guarantees `len` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(labels, len) })
}

fn to_configurations(flat: &[u32], n: usize) -> Vec<Configuration> {
    flat.chunks(n)
        .map(|row| Configuration::new(row.iter().map(|&l| l as usize).collect()))
        .collect()
}

fn scheme_arg(s: u32) -> Result<Scheme, Failure> {
    match s {
        EGFLOW_SCHEME_RK4 => Ok(Scheme::Rk4),
        EGFLOW_SCHEME_EULER => Ok(Scheme::Euler),
        other => Err(argument(format!("unknown integration scheme {other}"))),
    }
}

fn put<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(argument("output pointer is null"));
    }
    // SAFETY: non-null and writable per the contract.
    unsafe { out.write(value) };
    Ok(())
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn egflow_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Defaults: bias-free linear field, eps 0.01, batch 512, 2000 steps, Adam at
/// 5e-4 with a constant rate, seed 0, RK4 with 100 steps.
#[no_mangle]
pub extern "C" fn egflow_train_options_default() -> EgflowTrainOptions {
    EgflowTrainOptions {
        field: EGFLOW_FIELD_LINEAR,
        hidden: std::ptr::null(),
        hidden_len: 0,
        bias: 0,
        eps: 0.01,
        batch_size: 512,
        steps: 2000,
        lr: 5e-4,
        cosine: 0,
        seed: 0,
        scheme: EGFLOW_SCHEME_RK4,
        integrator_steps: 100,
    }
}

/// Trains a model on `count` configurations of `n` labels in `{0..c-1}`.
///
/// # Safety
/// `labels` must point to `count * n` values, `options` to a valid struct
/// whose `hidden` holds `hidden_len` values, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egflow_train(
    labels: *const u32,
    count: usize,
    n: usize,
    c: usize,
    options: *const EgflowTrainOptions,
    out: *mut *mut EgflowModel,
) -> i32 {
    guard(|| {
        let dims = Dims::new(n, c)?;
        let opts = unsafe { options.as_ref() }.ok_or_else(|| argument("options pointer is null"))?;
        let len = count
            .checked_mul(n)
            .ok_or_else(|| argument("count * n overflows"))?;
        let data = to_configurations(labels_arg(labels, len)?, n);
        let spec = match opts.field {
            EGFLOW_FIELD_LINEAR => FieldSpec {
                dims,
                kind: egflow::FieldKind::Linear { bias: opts.bias != 0 },
            },
            EGFLOW_FIELD_MLP => {
                let hidden: Vec<usize> = if opts.hidden_len == 0 {
                    Vec::new()
                } else if opts.hidden.is_null() {
                    return Err(argument("hidden pointer is null"));
                } else {
                    unsafe { std::slice::from_raw_parts(opts.hidden, opts.hidden_len) }.to_vec()
                };
                FieldSpec::mlp(dims, hidden)
            }
            other => return Err(argument(format!("unknown field variant {other}"))),
        };
        let integrator = IntegratorConfig {
            scheme: scheme_arg(opts.scheme)?,
            steps: opts.integrator_steps,
        };
        integrator.validate()?;
        let config = TrainConfig {
            eps: opts.eps,
            batch_size: opts.batch_size,
            steps: opts.steps,
            lr: opts.lr,
            schedule: if opts.cosine != 0 {
                LrSchedule::Cosine
            } else {
                LrSchedule::Constant
            },
            seed: opts.seed,
            field: spec,
        };
        let outcome = train(&data, &config)?;
        let model = EgflowModel {
            checkpoint: Checkpoint {
                params: outcome.params,
                eps: opts.eps,
                integrator,
            },
        };
        put(out, Box::into_raw(Box::new(model)))
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn egflow_model_load(path: *const c_char, out: *mut *mut EgflowModel) -> i32 {
    guard(|| {
        let checkpoint = read_checkpoint(&path_arg(path)?)?;
        put(out, Box::into_raw(Box::new(EgflowModel { checkpoint })))
    })
}

/// Writes a checkpoint file atomically.
///
/// # Safety
/// `model` must be a live handle and `path` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn egflow_model_save(model: *const EgflowModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        write_checkpoint(&path_arg(path)?, &m.checkpoint)?;
        Ok(())
    })
}

/// Variable and category counts of the model.
///
/// # Safety
/// `model` must be a live handle; `n` and `c` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egflow_model_dims(model: *const EgflowModel, n: *mut usize, c: *mut usize) -> i32 {
    guard(|| {
        let dims = model_ref(model)?.checkpoint.params.dims();
        put(n, dims.n)?;
        put(c, dims.c)
    })
}

/// Number of scalar parameters of the field.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn egflow_model_num_params(model: *const EgflowModel, out: *mut usize) -> i32 {
    guard(|| put(out, model_ref(model)?.checkpoint.params.num_params()))
}

/// Draws `count` configurations into `out_labels` (`count * n` values) with
/// the model's integrator. `out_ties` may be null; otherwise it receives the
/// number of rows rounded at a tie.
///
/// # Safety
/// `model` must be a live handle and `out_labels` writable for `count * n` values.
#[no_mangle]
pub unsafe extern "C" fn egflow_sample(
    model: *const EgflowModel,
    count: usize,
    seed: u64,
    out_labels: *mut u32,
    out_ties: *mut usize,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let dims = m.checkpoint.params.dims();
        let len = count
            .checked_mul(dims.n)
            .ok_or_else(|| argument("count * n overflows"))?;
        if count == 0 {
            if !out_ties.is_null() {
                put(out_ties, 0)?;
            }
            return Ok(());
        }
        if out_labels.is_null() {
            return Err(argument("output labels pointer is null"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sample_configurations(&m.checkpoint.params, count, &mut rng, &m.checkpoint.integrator)?;
        // SAFETY: the caller guarantees `len` writable elements.
        let dst = unsafe { std::slice::from_raw_parts_mut(out_labels, len) };
        for (row, beta) in dst.chunks_mut(dims.n).zip(&s.configurations) {
            for (d, &l) in row.iter_mut().zip(beta.labels()) {
                *d = l as u32;
            }
        }
        if !out_ties.is_null() {
            put(out_ties, s.ties)?;
        }
        Ok(())
    })
}

/// Importance-sampling lower bound on `log p(alpha)` in nats for one
/// configuration of `n` labels. `out_std_error` receives NaN when
/// `n_samples == 1`; `out_bits_per_dim` and `out_std_error` may be null.
///
/// # Safety
/// `model` must be a live handle, `alpha` must hold `n` labels and
/// `out_bound` must be writable.
#[no_mangle]
pub unsafe extern "C" fn egflow_loglik(
    model: *const EgflowModel,
    alpha: *const u32,
    n_samples: usize,
    mass: f64,
    seed: u64,
    out_bound: *mut f64,
    out_bits_per_dim: *mut f64,
    out_std_error: *mut f64,
) -> i32 {
    guard(|| {
        let m = model_ref(model)?;
        let dims = m.checkpoint.params.dims();
        let alpha = to_configurations(labels_arg(alpha, dims.n)?, dims.n)
            .pop()
            .ok_or_else(|| argument("empty configuration"))?;
        let settings = LikelihoodSettings {
            eps: m.checkpoint.eps,
            mass,
            t_end: 1.0,
            integrator: m.checkpoint.integrator,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = loglik_lower_bound(&m.checkpoint.params, &alpha, n_samples, &mut rng, &settings)?;
        put(out_bound, est.bound)?;
        if !out_bits_per_dim.is_null() {
            put(out_bits_per_dim, est.bits_per_dim)?;
        }
        if !out_std_error.is_null() {
            put(out_std_error, est.std_error.unwrap_or(f64::NAN))?;
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn egflow_model_free(model: *mut EgflowModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}
