use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use egflow::commands::{self, Reference, RunConfig, SynthTarget};
use egflow::targets::Target;
use egflow::Error;

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "EGFLOW_THREADS";

#[derive(Parser)]
#[command(name = "egflow", version, about = "E-geodesic flow matching for discrete joint distributions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a field on a dataset and write a checkpoint and loss trace.
    Train(RunFlags),
    /// Generate configurations from a checkpoint.
    Sample(RunFlags),
    /// Importance-sampling lower bounds on configuration log-likelihoods.
    Loglik(RunFlags),
    /// Compare a samples file with a reference distribution.
    Eval(EvalArgs),
    /// Draw a dataset from a built-in target or a joint file.
    Synth(SynthArgs),
}

/// Settings shared by train, sample and loglik. Each flag sets the run-config
/// key of the same name (dashes become underscores) and overrides `--config`.
#[derive(Args)]
struct RunFlags {
    /// Run-config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long)]
    c: Option<String>,
    /// linear or mlp.
    #[arg(long)]
    field: Option<String>,
    /// Comma-separated hidden widths of the mlp field.
    #[arg(long)]
    hidden: Option<String>,
    /// true or false; linear field only.
    #[arg(long)]
    bias: Option<String>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    /// constant or cosine.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// rk4 or euler.
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    integrator_steps: Option<String>,
    #[arg(long)]
    mass: Option<String>,
    #[arg(long)]
    n_samples: Option<String>,
    #[arg(long)]
    count: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    loss_trace: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    histogram: Option<String>,
    #[arg(long)]
    configurations: Option<String>,
    #[arg(long)]
    report: Option<String>,
}

impl RunFlags {
    fn entries(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("n", &self.n),
            ("c", &self.c),
            ("field", &self.field),
            ("hidden", &self.hidden),
            ("bias", &self.bias),
            ("eps", &self.eps),
            ("batch_size", &self.batch_size),
            ("steps", &self.steps),
            ("lr", &self.lr),
            ("schedule", &self.schedule),
            ("seed", &self.seed),
            ("scheme", &self.scheme),
            ("integrator_steps", &self.integrator_steps),
            ("mass", &self.mass),
            ("n_samples", &self.n_samples),
            ("count", &self.count),
            ("dataset", &self.dataset),
            ("checkpoint", &self.checkpoint),
            ("loss_trace", &self.loss_trace),
            ("samples", &self.samples),
            ("histogram", &self.histogram),
            ("configurations", &self.configurations),
            ("report", &self.report),
        ]
    }

    fn resolve(&self) -> egflow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for (key, value) in self.entries() {
            if let Some(v) = value {
                cfg.set(key, v).map_err(Error::Domain)?;
            }
        }
        Ok(cfg)
    }

    fn overrides_integrator(&self) -> bool {
        self.scheme.is_some() || self.integrator_steps.is_some()
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Configuration file to evaluate.
    #[arg(long)]
    samples: PathBuf,
    /// Reference configuration file; its empirical joint is the reference.
    #[arg(long, conflicts_with = "reference_joint", required_unless_present = "reference_joint")]
    reference_dataset: Option<PathBuf>,
    /// Reference joint file.
    #[arg(long)]
    reference_joint: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// coupled-binaries, mog, pinwheel, or the path of a joint file.
    #[arg(long)]
    target: String,
    /// Grid size of the two-variable built-in targets.
    #[arg(long, default_value_t = 16)]
    c: usize,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output: PathBuf,
}

fn configure_threads() -> egflow::Result<()> {
    let Ok(value) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Error::Domain(format!("{THREADS_VAR} must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Domain(e.to_string()))
}

fn run(cli: Cli) -> egflow::Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Train(flags) => {
            let cfg = flags.resolve()?;
            let total = cfg.steps;
            let every = (total / 20).max(1);
            let s = commands::cmd_train(&cfg, |step, loss| {
                if step % every == 0 || step + 1 == total {
                    eprintln!("step {step} loss {loss:.6}");
                }
            })?;
            println!(
                "trained {} parameters on {}; checkpoint {}; loss trace {}",
                s.num_params,
                s.dims,
                s.checkpoint.display(),
                s.loss_trace.display()
            );
        }
        Command::Sample(flags) => {
            let cfg = flags.resolve()?;
            let integrator = flags.overrides_integrator().then(|| cfg.integrator());
            let s = commands::cmd_sample(&cfg, integrator)?;
            println!("wrote {} configurations to {}", s.count, s.samples.display());
            if let Some(h) = s.histogram {
                println!("histogram {}", h.display());
            }
            if s.ties > 0 {
                eprintln!("warning: {} rows rounded at a tie", s.ties);
            }
        }
        Command::Loglik(flags) => {
            let cfg = flags.resolve()?;
            let rows = commands::cmd_loglik(&cfg)?;
            for (alpha, est) in &rows {
                println!("{alpha}: {} nats, {} bits/dim", est.bound, est.bits_per_dim);
            }
        }
        Command::Eval(args) => {
            let reference = match (args.reference_dataset, args.reference_joint) {
                (Some(p), _) => Reference::Dataset(p),
                (None, Some(p)) => Reference::Joint(p),
                (None, None) => unreachable!("clap requires one reference"),
            };
            println!("{}", commands::cmd_eval(&args.samples, &reference)?);
        }
        Command::Synth(args) => {
            let target = match args.target.parse::<Target>() {
                Ok(t) => SynthTarget::Builtin(t, args.c),
                Err(_) => SynthTarget::Joint(PathBuf::from(&args.target)),
            };
            let dims = commands::cmd_synth(&target, args.count, args.seed, &args.output)?;
            println!("wrote {} configurations ({dims}) to {}", args.count, args.output.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e) as u8)
        }
    }
}
