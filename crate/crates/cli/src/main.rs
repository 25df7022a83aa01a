use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use flowpath::commands::{self, EvalOptions};
use flowpath::config::RunConfig;
use flowpath::diag;
use flowpath::{CliError, CliResult};

/// Normalizing-flow variational inference with path-gradient estimators.
#[derive(Debug, Parser)]
#[command(name = "flowpath", version)]
struct Cli {
    /// Worker threads (default: number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration; defaults apply to everything not set.
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lr0=1e-4`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a flow.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Draw reference samples from the target with overrelaxed HMC.
    Hmc {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Forward/reverse ESS and NIS observables of a trained flow.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// HMC sample dump for the forward ESS (overrides `eval.hmc_dump`).
        #[arg(long)]
        hmc_dump: Option<PathBuf>,
        /// Flow samples for the reverse ESS (overrides `eval.n_q`).
        #[arg(long)]
        n_q_samples: Option<usize>,
    },
    /// Train and evaluate several estimators side by side.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Comma-separated estimators (overrides `compare.estimators`).
        #[arg(long, value_delimiter = ',')]
        estimators: Option<Vec<String>>,
    },
    /// Experiments on the estimators themselves.
    Diagnostics {
        #[command(subcommand)]
        which: Diagnostic,
    },
}

#[derive(Debug, Subcommand)]
enum Diagnostic {
    /// Replicate variance of each estimator on shared batches.
    Variance {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Use this flow instead of the initial one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "RepQP,PathQP,Score,ReinfPQ,PathPQ,ZPathPQ")]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 256)]
        batch: usize,
        #[arg(long, default_value_t = 200)]
        replicates: usize,
    },
    /// Compare the path estimators on a batch with one dominant weight.
    Singular {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        batch: usize,
        #[arg(long, default_value_t = 1e-8)]
        epsilon: f64,
    },
    /// Bias of forward-KL estimators on a near-converged 1-D Gaussian.
    Bias {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "PathPQ,ZPathPQ,ReinfPQ")]
        estimators: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        replicates: usize,
        #[arg(long, default_value_t = 0.0)]
        mean: f64,
        #[arg(long, default_value_t = 1.0)]
        std: f64,
        /// Relative offset of the flow from the target.
        #[arg(long, default_value_t = 0.05)]
        rel: f64,
    },
    /// Check that the score term averages to zero.
    ScoreMean {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        batch: usize,
        #[arg(long, default_value_t = 100)]
        batches: usize,
    },
    /// Median wall-clock time per gradient evaluation.
    Timing {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "RepQP,PathQP,ReinfPQ,PathPQ,ZPathPQ")]
        estimators: Vec<String>,
        #[arg(long, default_value_t = 1024)]
        batch: usize,
        #[arg(long, default_value_t = 10)]
        reps: usize,
    },
    /// Gradient-norm traces with EMA smoothing from metrics files.
    Trace {
        /// `metrics.csv` paths, optionally as `label=path`.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let workers = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) => w,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    match cli.command {
        Command::Train { cfg, resume } => {
            let out = commands::train(&cfg.load()?, workers, resume.as_deref())?;
            println!("trained {} iterations; checkpoint in {}", out.iterations, out.dir.display());
        }
        Command::Hmc { cfg } => {
            let out = commands::hmc(&cfg.load()?, workers)?;
            print!("{}", out.report);
        }
        Command::Eval { cfg, checkpoint, hmc_dump, n_q_samples } => {
            let c = cfg.load()?;
            let hmc_dump = hmc_dump.or_else(|| (!c.eval.hmc_dump.is_empty()).then(|| PathBuf::from(&c.eval.hmc_dump)));
            let opts = EvalOptions {
                checkpoint,
                hmc_dump,
                n_q: n_q_samples.unwrap_or(c.eval.n_q),
                z_batch: c.eval.z_batch,
                bootstrap: c.eval.bootstrap,
                seed: c.eval.seed,
                out: cfg.out.clone(),
            };
            let (_, report) = commands::eval(&opts, workers)?;
            print!("{report}");
        }
        Command::Compare { cfg, estimators } => {
            let c = cfg.load()?;
            let list: Vec<String> = estimators
                .unwrap_or_else(|| c.compare.estimators.clone())
                .into_iter()
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect();
            let cells = commands::compare(&c, &list, workers)?;
            for cell in cells {
                println!("{}: reverse ESS {:.4}, forward ESS {:.4} ({})", cell.estimator, cell.reverse_ess, cell.forward_ess, cell.status);
            }
        }
        Command::Diagnostics { which } => diagnostics(which, workers)?,
    }
    Ok(())
}

fn diagnostics(which: Diagnostic, workers: usize) -> CliResult<()> {
    match which {
        Diagnostic::Variance { cfg, checkpoint, estimators, batch, replicates } => {
            let c = cfg.load()?;
            let ids = diag::parse_estimators("--estimators", &estimators)?;
            let (flow, target) = diag::load_model(&c, checkpoint.as_deref())?;
            for r in diag::variance(&flow, &target, &ids, batch, replicates, c.seed, workers, &c.output.dir)? {
                println!("{}: |g| mean {:.4e}, total variance {:.4e}", r.estimator, r.norm_mean, r.total_variance);
            }
        }
        Diagnostic::Singular { cfg, checkpoint, batch, epsilon } => {
            let c = cfg.load()?;
            let (flow, target) = diag::load_model(&c, checkpoint.as_deref())?;
            print!("{}", diag::singular(&c, &flow, &target, batch, epsilon, c.seed, &c.output.dir)?);
        }
        Diagnostic::Bias { cfg, estimators, sizes, replicates, mean, std, rel } => {
            let c = cfg.load()?;
            let ids = diag::parse_estimators("--estimators", &estimators)?;
            for r in diag::bias(&ids, mean, std, rel, &sizes, replicates, c.seed, workers, &c.output.dir)? {
                println!("{} N={}: |bias| {:.4e} ± {:.1e}", r.estimator, r.batch_size, r.bias_norm, r.bias_stderr);
            }
        }
        Diagnostic::ScoreMean { cfg, checkpoint, batch, batches } => {
            let c = cfg.load()?;
            let (flow, target) = diag::load_model(&c, checkpoint.as_deref())?;
            print!("{}", diag::score_mean(&flow, &target, batch, batches, c.seed, workers, &c.output.dir)?);
        }
        Diagnostic::Timing { cfg, checkpoint, estimators, batch, reps } => {
            let c = cfg.load()?;
            let ids = diag::parse_estimators("--estimators", &estimators)?;
            let (flow, target) = diag::load_model(&c, checkpoint.as_deref())?;
            for t in diag::timing(&flow, &target, &ids, batch, reps, workers, &c.output.dir)? {
                println!("{}: {:.3} ms", t.estimator, t.median_ms);
            }
        }
        Diagnostic::Trace { inputs, out } => {
            let series = diag::trace(&inputs, &out)?;
            println!("wrote {} series to {}", series.len(), out.join("gradnorm.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
