//! The command-line verbs as library functions.
//!
//! Exit codes used by the binary:
//!
//! | code | cause |
//! |------|-------|
//! | 0 | success |
//! | 1 | other failure |
//! | 2 | invalid command line |
//! | 3 | file could not be read or written |
//! | 4 | malformed input file |
//! | 5 | dimension or shape mismatch |
//! | 6 | non-finite training loss |
//! | 7 | unreadable or incompatible checkpoint |
//! | 8 | numerical failure during integration or sampling |
//! | 9 | dense joint over budget |
//! | 10 | invalid setting value |

use std::fmt;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{FieldKind, FieldParams, FieldSpec, LrSchedule};
use crate::flow_matching::{train_with, TrainConfig, DEFAULT_EPS};
use crate::geometry::Dims;
use crate::integrate::{sample_configurations, IntegratorConfig, Scheme};
use crate::io::{self, Checkpoint, KeyValue};
use crate::likelihood::{loglik_lower_bound, LikelihoodSettings, DEFAULT_MASS, DEFAULT_SAMPLES};
use crate::meta_simplex::{
    dense_size, empirical_joint, entropy, marginal_tv, tv_distance, Configuration, JointDistribution,
};
use crate::targets::Target;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. } => 3,
        Error::Parse { .. } => 4,
        Error::Dims(_) | Error::Shape(_) => 5,
        Error::NonFiniteLoss { .. } => 6,
        Error::Checkpoint(_) | Error::CheckpointVersion { .. } => 7,
        Error::Integration { .. } | Error::NonFinite(_) | Error::RejectionCap { .. } => 8,
        Error::DenseBudget { .. } => 9,
        Error::Domain(_) => 10,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldVariant {
    Linear,
    Mlp,
}

/// Every setting a command may need. Keys of the run-config file are the
/// field names below.
///
/// | key | default |
/// |-----|---------|
/// | `n`, `c` | taken from the dataset |
/// | `field` | `linear` (`linear` or `mlp`) |
/// | `hidden` | `256,256` |
/// | `bias` | `false` |
/// | `eps` | `0.01` |
/// | `batch_size` | `512` |
/// | `steps` | `2000` |
/// | `lr` | `0.0005` |
/// | `schedule` | `constant` (`constant` or `cosine`) |
/// | `seed` | `0` |
/// | `scheme` | `rk4` (`rk4` or `euler`) |
/// | `integrator_steps` | `100` |
/// | `mass` | `0.8` |
/// | `n_samples` | `200` |
/// | `count` | `10000` |
/// | `dataset`, `checkpoint`, `loss_trace`, `samples`, `histogram`, `configurations`, `report` | unset |
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n: Option<usize>,
    pub c: Option<usize>,
    pub field: FieldVariant,
    pub hidden: Vec<usize>,
    pub bias: bool,
    pub eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub scheme: Scheme,
    pub integrator_steps: usize,
    pub mass: f64,
    pub n_samples: usize,
    pub count: usize,
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub loss_trace: Option<PathBuf>,
    pub samples: Option<PathBuf>,
    pub histogram: Option<PathBuf>,
    pub configurations: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            n: None,
            c: None,
            field: FieldVariant::Linear,
            hidden: vec![256, 256],
            bias: false,
            eps: DEFAULT_EPS,
            batch_size: 512,
            steps: 2000,
            lr: 5e-4,
            schedule: LrSchedule::Constant,
            seed: 0,
            scheme: Scheme::Rk4,
            integrator_steps: 100,
            mass: DEFAULT_MASS,
            n_samples: DEFAULT_SAMPLES,
            count: 10_000,
            dataset: None,
            checkpoint: None,
            loss_trace: None,
            samples: None,
            histogram: None,
            configurations: None,
            report: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value '{value}' for '{key}'"))
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "n" => self.n = Some(num(key, value)?),
            "c" => self.c = Some(num(key, value)?),
            "field" => {
                self.field = match value {
                    "linear" => FieldVariant::Linear,
                    "mlp" => FieldVariant::Mlp,
                    _ => return Err(format!("field must be 'linear' or 'mlp', got '{value}'")),
                }
            }
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<std::result::Result<_, _>>()?;
            }
            "bias" => self.bias = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "schedule" => {
                self.schedule = match value {
                    "constant" => LrSchedule::Constant,
                    "cosine" => LrSchedule::Cosine,
                    _ => return Err(format!("schedule must be 'constant' or 'cosine', got '{value}'")),
                }
            }
            "seed" => self.seed = num(key, value)?,
            "scheme" => self.scheme = value.parse().map_err(|e: Error| e.to_string())?,
            "integrator_steps" => self.integrator_steps = num(key, value)?,
            "mass" => self.mass = num(key, value)?,
            "n_samples" => self.n_samples = num(key, value)?,
            "count" => self.count = num(key, value)?,
            "dataset" => self.dataset = Some(value.into()),
            "checkpoint" => self.checkpoint = Some(value.into()),
            "loss_trace" => self.loss_trace = Some(value.into()),
            "samples" => self.samples = Some(value.into()),
            "histogram" => self.histogram = Some(value.into()),
            "configurations" => self.configurations = Some(value.into()),
            "report" => self.report = Some(value.into()),
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    pub fn apply(&mut self, path: &Path, entries: &[KeyValue]) -> Result<()> {
        for kv in entries {
            self.set(&kv.key, &kv.value).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: kv.line,
                msg,
            })?;
        }
        Ok(())
    }

    /// Defaults overridden by the entries of a run-config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply(path, &io::read_key_values(path)?)?;
        Ok(cfg)
    }

    pub fn field_spec(&self, dims: Dims) -> FieldSpec {
        let kind = match self.field {
            FieldVariant::Linear => FieldKind::Linear { bias: self.bias },
            FieldVariant::Mlp => FieldKind::Mlp {
                hidden: self.hidden.clone(),
            },
        };
        FieldSpec { dims, kind }
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            scheme: self.scheme,
            steps: self.integrator_steps,
        }
    }

    pub fn train_config(&self, dims: Dims) -> TrainConfig {
        TrainConfig {
            eps: self.eps,
            batch_size: self.batch_size,
            steps: self.steps,
            lr: self.lr,
            schedule: self.schedule,
            seed: self.seed,
            field: self.field_spec(dims),
        }
    }

    /// Rejects declared dimensions that disagree with `dims`.
    pub fn check_dims(&self, dims: Dims) -> Result<()> {
        let bad = |declared: Option<usize>, actual: usize| declared.is_some_and(|d| d != actual);
        if bad(self.n, dims.n) || bad(self.c, dims.c) {
            return Err(Error::Dims(format!(
                "run config declares n={:?} c={:?}, data has {dims}",
                self.n, self.c
            )));
        }
        Ok(())
    }
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Domain(format!("missing required setting '{key}'")))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub dims: Dims,
    pub num_params: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: PathBuf,
    pub loss_trace: PathBuf,
}

/// Trains on `dataset` and writes `checkpoint` plus the loss trace (by
/// default `<checkpoint>.loss.csv`).
pub fn cmd_train(cfg: &RunConfig, progress: impl FnMut(usize, f64)) -> Result<TrainSummary> {
    let checkpoint = required(&cfg.checkpoint, "checkpoint")?.to_path_buf();
    let data = io::read_dataset(required(&cfg.dataset, "dataset")?)?;
    cfg.check_dims(data.dims)?;
    if data.configurations.is_empty() {
        return Err(Error::Domain("dataset contains no configurations".into()));
    }
    let integrator = cfg.integrator();
    integrator.validate()?;
    let outcome = train_with(&data.configurations, &cfg.train_config(data.dims), progress)?;
    let loss_trace = cfg
        .loss_trace
        .clone()
        .unwrap_or_else(|| with_suffix(&checkpoint, ".loss.csv"));
    let ck = Checkpoint {
        params: outcome.params,
        eps: cfg.eps,
        integrator,
    };
    io::write_checkpoint(&checkpoint, &ck)?;
    io::write_loss_trace(&loss_trace, &outcome.losses)?;
    Ok(TrainSummary {
        dims: data.dims,
        num_params: ck.params.num_params(),
        final_loss: outcome.losses.last().copied(),
        checkpoint,
        loss_trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub count: usize,
    /// Rows whose rounding hit a tie between labels.
    pub ties: usize,
    pub samples: PathBuf,
    pub histogram: Option<PathBuf>,
}

/// Generates `count` configurations from `checkpoint` into `samples`. A
/// histogram CSV (by default `<samples>.hist.csv`) is written when the dense
/// joint fits the budget. The integrator stored in the checkpoint is used
/// unless `integrator` is given.
pub fn cmd_sample(cfg: &RunConfig, integrator: Option<IntegratorConfig>) -> Result<SampleSummary> {
    let ck = io::read_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let out = required(&cfg.samples, "samples")?.to_path_buf();
    let dims = ck.params.dims();
    cfg.check_dims(dims)?;
    let integrator = integrator.unwrap_or(ck.integrator);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outcome = if cfg.count == 0 {
        crate::integrate::SampleOutcome {
            configurations: Vec::new(),
            ties: 0,
        }
    } else {
        sample_configurations(&ck.params, cfg.count, &mut rng, &integrator)?
    };
    io::write_dataset(&out, dims, &outcome.configurations)?;
    let histogram = match (&cfg.histogram, dense_size(dims)) {
        (Some(p), _) => Some(p.clone()),
        (None, Ok(_)) => Some(with_suffix(&out, ".hist.csv")),
        (None, Err(_)) => None,
    };
    if let Some(p) = &histogram {
        io::write_histogram(p, dims, &outcome.configurations)?;
    }
    Ok(SampleSummary {
        count: outcome.configurations.len(),
        ties: outcome.ties,
        samples: out,
        histogram,
    })
}

/// Lower bounds on `log p_alpha` for every configuration of the
/// `configurations` file, written to `report`. Configurations are processed
/// in file order from a single generator seeded with `seed`.
pub fn cmd_loglik(cfg: &RunConfig) -> Result<Vec<(Configuration, crate::likelihood::IsEstimate)>> {
    let ck = io::read_checkpoint(required(&cfg.checkpoint, "checkpoint")?)?;
    let dims = ck.params.dims();
    cfg.check_dims(dims)?;
    let queries = io::read_configurations(required(&cfg.configurations, "configurations")?, dims)?;
    let report = required(&cfg.report, "report")?;
    let settings = LikelihoodSettings {
        eps: ck.eps,
        mass: cfg.mass,
        t_end: 1.0,
        integrator: ck.integrator,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let rows = queries
        .into_iter()
        .map(|alpha| {
            let est = loglik_lower_bound(&ck.params, &alpha, cfg.n_samples, &mut rng, &settings)?;
            Ok((alpha, est))
        })
        .collect::<Result<Vec<_>>>()?;
    io::write_likelihood_report(report, &rows)?;
    Ok(rows)
}

/// Reference for [`cmd_eval`].
#[derive(Debug, Clone, PartialEq)]
pub enum Reference {
    /// Empirical joint of a configuration file.
    Dataset(PathBuf),
    /// Explicit joint file.
    Joint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub dims: Dims,
    pub num_samples: usize,
    pub tv: f64,
    pub marginal_tv: Vec<f64>,
    pub entropy_samples: f64,
    pub entropy_reference: f64,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "dims {}", self.dims)?;
        writeln!(f, "samples {}", self.num_samples)?;
        writeln!(f, "tv {}", self.tv)?;
        for (i, m) in self.marginal_tv.iter().enumerate() {
            writeln!(f, "marginal_tv[{i}] {m}")?;
        }
        writeln!(f, "entropy_samples {}", self.entropy_samples)?;
        write!(f, "entropy_reference {}", self.entropy_reference)
    }
}

/// Compares the empirical joint of `samples` with a reference.
pub fn cmd_eval(samples: &Path, reference: &Reference) -> Result<EvalReport> {
    let data = io::read_dataset(samples)?;
    if data.configurations.is_empty() {
        return Err(Error::Domain(format!("{} has no configurations", samples.display())));
    }
    let p = empirical_joint(&data.configurations, data.dims)?;
    let q = match reference {
        Reference::Dataset(path) => {
            let r = io::read_dataset(path)?;
            if r.configurations.is_empty() {
                return Err(Error::Domain(format!("{} has no configurations", path.display())));
            }
            empirical_joint(&r.configurations, r.dims)?
        }
        Reference::Joint(path) => io::read_joint(path)?,
    };
    if p.dims() != q.dims() {
        return Err(Error::Dims(format!(
            "samples have {}, reference has {}",
            p.dims(),
            q.dims()
        )));
    }
    Ok(EvalReport {
        dims: p.dims(),
        num_samples: data.configurations.len(),
        tv: tv_distance(&p, &q)?,
        marginal_tv: marginal_tv(&p, &q)?,
        entropy_samples: entropy(&p),
        entropy_reference: entropy(&q),
    })
}

/// Source distribution for [`cmd_synth`].
#[derive(Debug, Clone, PartialEq)]
pub enum SynthTarget {
    /// Built-in target; `c` is the grid size of the two-variable targets.
    Builtin(Target, usize),
    Joint(PathBuf),
}

impl SynthTarget {
    pub fn joint(&self) -> Result<JointDistribution> {
        match self {
            SynthTarget::Builtin(t, c) => t.joint(*c),
            SynthTarget::Joint(path) => io::read_joint(path),
        }
    }
}

/// Draws `count` i.i.d. configurations from the target into `output`.
pub fn cmd_synth(target: &SynthTarget, count: usize, seed: u64, output: &Path) -> Result<Dims> {
    let p = target.joint()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = p.sample(count, &mut rng);
    io::write_dataset(output, p.dims(), &samples)?;
    Ok(p.dims())
}

/// Loads the field of a checkpoint.
pub fn load_field(path: &Path) -> Result<FieldParams> {
    Ok(io::read_checkpoint(path)?.params)
}
