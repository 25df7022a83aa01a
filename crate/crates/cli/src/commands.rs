//! The `train`, `hmc`, `eval` and `compare` commands.

use std::path::{Path, PathBuf};
use std::time::Instant;

use flowpath_core::estimators::EstimatorId;
use flowpath_core::flow::{Flow, RealNvp};
use flowpath_core::matrix::Matrix;
use flowpath_core::parallel;
use flowpath_core::sampling::{self, hmc_sample, HmcRun};
use flowpath_core::target::Target;
use flowpath_core::training::{Trainer, MAX_CONSECUTIVE_FAILURES};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_estimator, RunConfig};
use crate::metrics::{self, MetricsWriter};
use crate::report::Report;
use crate::run_target::TargetDesc;
use crate::{dump, CliError, CliResult};

pub const CHECKPOINT: &str = "checkpoint.nfck";
pub const FAILED_CHECKPOINT: &str = "failed.nfck";
pub const SAMPLES: &str = "samples.nfs";

/// Rows per chunk when pushing large sample sets through a flow.
const CHUNK: usize = 4096;

fn make_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir.display()))
}

fn generator(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub dir: PathBuf,
    pub flow: RealNvp,
    pub iterations: u64,
    pub last_eval_reverse_ess: Option<f64>,
    pub stopped_by_budget: bool,
}

/// Runs (or resumes) training as configured; writes `config.toml`,
/// `metrics.csv`, `walltime.csv`, `train_report.txt` and checkpoints.
pub fn train(cfg: &RunConfig, workers: usize, resume: Option<&Path>) -> CliResult<TrainOutcome> {
    let dir = cfg.output.dir.clone();
    make_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let desc = TargetDesc::from_config(cfg);
    let tcfg = cfg.train_config()?;
    let (mut flow, mut trainer) = match resume {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            if ck.target != desc || ck.spec != cfg.flow_spec() || ck.flow_seed != cfg.flow.seed {
                return Err(CliError::Usage(format!("{} was written for a different target or flow", path.display())));
            }
            let state = ck.train.clone().ok_or_else(|| CliError::Usage(format!("{} has no training state", path.display())))?;
            (ck.flow()?, Trainer::resume(tcfg, state)?)
        }
        None => {
            let flow = RealNvp::new(cfg.flow_spec(), cfg.flow.seed);
            let n = flow.params().len();
            (flow, Trainer::new(tcfg, n)?)
        }
    };
    let target = desc.build(cfg.flow_spec(), cfg.flow.seed);
    let mut out = MetricsWriter::create(&dir, resume.is_some())?;
    let t0 = Instant::now();
    let mut last_eval = None;
    let mut stopped_by_budget = false;
    log::info!("training {} for {} iterations ({} parameters)", cfg.train.estimator, cfg.train.max_iters, flow.params().len());
    while !trainer.done() {
        let row = match trainer.step(&mut flow, &target, workers) {
            Ok(row) => row,
            Err(e) => {
                out.flush()?;
                Checkpoint::new(desc.clone(), &flow, Some(trainer.state())).write(&dir.join(FAILED_CHECKPOINT))?;
                return Err(CliError::Runtime(format!(
                    "training aborted at iteration {} after more than {MAX_CONSECUTIVE_FAILURES} consecutive failed batches: {e} (state saved to {FAILED_CHECKPOINT})",
                    trainer.iter()
                )));
            }
        };
        out.push(&row, t0.elapsed().as_secs_f64() * 1e3)?;
        if let Some(ess) = row.eval_reverse_ess {
            last_eval = Some(ess);
            log::info!("iter {:>6}  {}  |g| {:.3e}  lr {:.2e}  eval reverse ESS {:.4}", row.iter + 1, row.estimator, row.grad_norm, row.lr, ess);
            Checkpoint::new(desc.clone(), &flow, Some(trainer.state())).write(&dir.join(CHECKPOINT))?;
        }
        if cfg.train.max_seconds > 0.0 && t0.elapsed().as_secs_f64() >= cfg.train.max_seconds {
            stopped_by_budget = true;
            log::info!("wall-clock budget of {} s reached at iteration {}", cfg.train.max_seconds, trainer.iter());
            break;
        }
    }
    out.flush()?;
    Checkpoint::new(desc, &flow, Some(trainer.state())).write(&dir.join(CHECKPOINT))?;
    let state = trainer.state();
    let mut r = Report::new();
    r.add("estimator", &cfg.train.estimator)
        .add("iterations", state.iter)
        .add("final_lr", state.lr)
        .add("skipped_updates", state.adam.skipped)
        .add("last_eval_reverse_ess", last_eval.map_or("none".to_string(), |v| v.to_string()))
        .add("stopped_by_budget", stopped_by_budget)
        .add("flow_seed", cfg.flow.seed)
        .add("train_seed", cfg.train.seed)
        .add("wall_seconds", format!("{:.3}", t0.elapsed().as_secs_f64()));
    r.write(&dir.join("train_report.txt"))?;
    Ok(TrainOutcome { dir, flow, iterations: state.iter, last_eval_reverse_ess: last_eval, stopped_by_budget })
}

/// `x ↦ mean_t x_t²`.
pub fn mean_square(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

/// Fraction of configurations whose lattice mean is positive.
pub fn positive_fraction(samples: &Matrix) -> f64 {
    let n = samples.rows();
    (0..n).filter(|&i| samples.row(i).iter().sum::<f64>() > 0.0).count() as f64 / n as f64
}

#[derive(Debug, Clone)]
pub struct HmcOutcome {
    pub run: HmcRun,
    pub dump: PathBuf,
    pub report: Report,
}

/// Runs the configured HMC chains; writes `samples.nfs` and
/// `hmc_report.txt`.
pub fn hmc(cfg: &RunConfig, workers: usize) -> CliResult<HmcOutcome> {
    let dir = cfg.output.dir.clone();
    make_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let target = TargetDesc::from_config(cfg).build(cfg.flow_spec(), cfg.flow.seed);
    let hcfg = cfg.hmc_config();
    let t0 = Instant::now();
    let run = hmc_sample(&target, &hcfg, workers)?;
    if run.restarts > 0 {
        log::warn!("{} chain restarts after non-finite Hamiltonians", run.restarts);
    }
    let path = dir.join(SAMPLES);
    dump::write(&path, &run.samples)?;
    let x2: Vec<f64> = (0..run.samples.rows()).map(|i| mean_square(run.samples.row(i))).collect();
    let steps = &run.step_sizes;
    let mut r = Report::new();
    r.add("samples", run.samples.rows())
        .add("sites", run.samples.cols())
        .add("acceptance", run.acceptance)
        .add("step_size_mean", steps.iter().sum::<f64>() / steps.len() as f64)
        .add("step_size_min", steps.iter().copied().fold(f64::INFINITY, f64::min))
        .add("step_size_max", steps.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .add("positive_well_fraction", positive_fraction(&run.samples))
        .add("mirror_moves", run.mirror_moves)
        .add("mirror_rejections", run.mirror_rejections)
        .add("restarts", run.restarts)
        .add("x2_mean", x2.iter().sum::<f64>() / x2.len() as f64)
        .add("x2_stderr", sampling::batch_means_se(&x2, 100))
        .add("seed", hcfg.seed)
        .add("wall_seconds", format!("{:.3}", t0.elapsed().as_secs_f64()));
    r.write(&dir.join("hmc_report.txt"))?;
    Ok(HmcOutcome { run, dump: path, report: r })
}

/// `log w̃` of arbitrary configurations, evaluated in parallel chunks.
pub fn log_weights_chunked<F: Flow, T: Target>(flow: &F, target: &T, x: &Matrix, workers: usize) -> CliResult<Vec<f64>> {
    let chunks = x.rows().div_ceil(CHUNK);
    let parts = parallel::map_indexed(chunks, workers, |k| {
        let xs = x.slice_rows(k * CHUNK, ((k + 1) * CHUNK).min(x.rows()));
        sampling::log_weights(flow, target, &xs)
    });
    let mut out = Vec::with_capacity(x.rows());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `n` flow samples with their `log w̃`; the base draws are sequential
/// so the result does not depend on `workers`.
pub fn sample_chunked<F: Flow, T: Target>(flow: &F, target: &T, n: usize, rng: &mut ChaCha8Rng, workers: usize) -> CliResult<(Matrix, Vec<f64>)> {
    let z = flow.base().sample(n, rng);
    let chunks = n.div_ceil(CHUNK);
    let parts = parallel::map_indexed(chunks, workers, |k| -> flowpath_core::Result<_> {
        let zs = z.slice_rows(k * CHUNK, ((k + 1) * CHUNK).min(n));
        let (x, ld) = flow.forward(&zs)?;
        let s = target.action(&x)?;
        let lz = flow.base().log_prob_batch(&zs);
        let lw: Vec<f64> = (0..zs.rows()).map(|i| -s[i] - (lz[i] - ld[i])).collect();
        Ok((x, lw))
    });
    let mut xs = Vec::with_capacity(chunks);
    let mut lw = Vec::with_capacity(n);
    for p in parts {
        let (x, w) = p?;
        xs.push(x);
        lw.extend(w);
    }
    Ok((Matrix::vstack(&xs), lw))
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub checkpoint: PathBuf,
    pub hmc_dump: Option<PathBuf>,
    pub n_q: usize,
    pub z_batch: usize,
    pub bootstrap: usize,
    pub seed: u64,
    /// Directory for `ess_report.txt`; the checkpoint's directory if unset.
    pub out: Option<PathBuf>,
}

/// Forward and reverse ESS of a trained flow, with bootstrap 16–84 %
/// intervals, plus the NIS estimate of the site-averaged `x²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EssReport {
    pub reverse_ess: f64,
    pub reverse_interval: (f64, f64),
    pub forward_ess: Option<f64>,
    pub forward_interval: Option<(f64, f64)>,
    pub log_z_hat: f64,
    pub n_q: usize,
    pub n_p: usize,
    pub x2_nis: (f64, f64),
    pub x2_hmc: Option<(f64, f64)>,
    /// Forward ESS below 0.6 × reverse ESS.
    pub collapse: Option<bool>,
}

pub const COLLAPSE_RATIO: f64 = 0.6;

#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    p_samples: Option<&Matrix>,
    n_q: usize,
    z_batch: usize,
    bootstrap: usize,
    seed: u64,
    workers: usize,
) -> CliResult<EssReport> {
    if n_q < 2 || z_batch < 2 {
        return Err(CliError::Usage("eval needs at least two flow samples (n_q, z_batch >= 2)".into()));
    }
    if let Some(p) = p_samples {
        if p.cols() != flow.dim() {
            return Err(CliError::Usage(format!("sample dump has {} sites, flow has {}", p.cols(), flow.dim())));
        }
        if p.rows() < 2 {
            return Err(CliError::Usage("sample dump needs at least two rows".into()));
        }
    }
    let (x, lw) = sample_chunked(flow, target, n_q, &mut generator(seed, 1), workers)?;
    let reverse_ess = sampling::reverse_ess(&lw)?;
    let mut boot = generator(seed, 3);
    let reverse_interval = sampling::bootstrap_interval(&lw, bootstrap, &mut boot, sampling::reverse_ess)?;
    let x2: Vec<f64> = (0..x.rows()).map(|i| mean_square(x.row(i))).collect();
    let x2_nis = sampling::weighted_mean(&lw, &x2)?;
    let (_, lw_z) = sample_chunked(flow, target, z_batch, &mut generator(seed, 2), workers)?;
    let log_z_hat = sampling::log_z_hat(&lw_z)?;
    let (mut forward_ess, mut forward_interval, mut x2_hmc, mut collapse) = (None, None, None, None);
    let mut n_p = 0;
    if let Some(p) = p_samples {
        n_p = p.rows();
        let lwp = log_weights_chunked(flow, target, p, workers)?;
        let f = sampling::forward_ess(&lwp, log_z_hat)?;
        forward_interval =
            Some(sampling::bootstrap_interval(&lwp, bootstrap, &mut boot, |v| sampling::forward_ess(v, log_z_hat))?);
        forward_ess = Some(f);
        collapse = Some(f < COLLAPSE_RATIO * reverse_ess);
        let px2: Vec<f64> = (0..p.rows()).map(|i| mean_square(p.row(i))).collect();
        x2_hmc = Some((px2.iter().sum::<f64>() / px2.len() as f64, sampling::batch_means_se(&px2, 100)));
    }
    Ok(EssReport { reverse_ess, reverse_interval, forward_ess, forward_interval, log_z_hat, n_q, n_p, x2_nis, x2_hmc, collapse })
}

impl EssReport {
    pub fn to_report(&self, seed: u64) -> Report {
        let mut r = Report::new();
        r.add("reverse_ess", self.reverse_ess)
            .add("reverse_ess_p16", self.reverse_interval.0)
            .add("reverse_ess_p84", self.reverse_interval.1)
            .add("n_q_samples", self.n_q)
            .add("log_z_hat", self.log_z_hat);
        match (self.forward_ess, self.forward_interval) {
            (Some(f), Some((lo, hi))) => {
                r.add("forward_ess", f).add("forward_ess_p16", lo).add("forward_ess_p84", hi);
            }
            _ => {
                r.add("forward_ess", "skipped (no p samples)");
            }
        }
        r.add("n_p_samples", self.n_p).add("x2_nis_mean", self.x2_nis.0).add("x2_nis_stderr", self.x2_nis.1);
        if let Some((m, se)) = self.x2_hmc {
            r.add("x2_hmc_mean", m).add("x2_hmc_stderr", se);
        }
        if let Some(c) = self.collapse {
            r.add("mode_collapse", c);
        }
        r.add("seed", seed)
            .add("q_batch_stream", 1)
            .add("z_hat_batch_stream", 2)
            .add("bootstrap_stream", 3);
        r
    }
}

pub fn eval(opts: &EvalOptions, workers: usize) -> CliResult<(EssReport, Report)> {
    if opts.n_q < 2 {
        return Err(CliError::Usage("--n-q must be at least 2".into()));
    }
    let ck = Checkpoint::read(&opts.checkpoint)?;
    let flow = ck.flow()?;
    let target = ck.target.build(ck.spec, ck.flow_seed);
    let p = match &opts.hmc_dump {
        Some(path) => Some(dump::read(path)?),
        None => {
            log::warn!("no HMC sample dump given; forward ESS skipped");
            None
        }
    };
    let ess = evaluate(&flow, &target, p.as_ref(), opts.n_q, opts.z_batch, opts.bootstrap, opts.seed, workers)?;
    let mut report = ess.to_report(opts.seed);
    report.add("checkpoint", opts.checkpoint.display());
    if let Some(path) = &opts.hmc_dump {
        report.add("hmc_dump", path.display());
    }
    let dir = match &opts.out {
        Some(d) => d.clone(),
        None => opts.checkpoint.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    make_dir(&dir)?;
    report.write(&dir.join("ess_report.txt"))?;
    Ok((ess, report))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareCell {
    pub estimator: String,
    pub iterations: u64,
    pub reverse_ess: f64,
    pub reverse_interval: (f64, f64),
    pub forward_ess: f64,
    pub forward_interval: (f64, f64),
    /// `ok`, or the reason the cell failed.
    pub status: String,
}

/// Trains and evaluates each estimator in its own subdirectory; writes
/// `comparison.csv` and `gradnorm.csv`. Baselines (non-path estimators)
/// get `compare.baseline_factor` times the iterations.
pub fn compare(cfg: &RunConfig, estimators: &[String], workers: usize) -> CliResult<Vec<CompareCell>> {
    if estimators.is_empty() {
        return Err(CliError::Usage("compare needs at least one estimator".into()));
    }
    let ids = estimators
        .iter()
        .map(|e| parse_estimator("compare.estimators", e))
        .collect::<CliResult<Vec<EstimatorId>>>()?;
    let dir = cfg.output.dir.clone();
    make_dir(&dir)?;
    cfg.write_resolved(&dir)?;
    let p = if cfg.eval.hmc_dump.is_empty() { None } else { Some(dump::read(Path::new(&cfg.eval.hmc_dump))?) };
    let mut cells = Vec::new();
    let mut traces = Vec::new();
    for id in ids {
        let mut sub = cfg.clone();
        sub.train.estimator = id.name().to_string();
        sub.train.switch_from.clear();
        if !id.is_path() {
            sub.train.max_iters *= cfg.compare.baseline_factor.max(1);
        }
        sub.output.dir = dir.join(id.name());
        let nan = (f64::NAN, f64::NAN);
        let mut cell = CompareCell {
            estimator: id.name().to_string(),
            iterations: sub.train.max_iters,
            reverse_ess: f64::NAN,
            reverse_interval: nan,
            forward_ess: f64::NAN,
            forward_interval: nan,
            status: "ok".into(),
        };
        let result = train(&sub, workers, None).and_then(|out| {
            cell.iterations = out.iterations;
            let target = TargetDesc::from_config(&sub).build(sub.flow_spec(), sub.flow.seed);
            evaluate(&out.flow, &target, p.as_ref(), sub.eval.n_q, sub.eval.z_batch, sub.eval.bootstrap, sub.eval.seed, workers)
        });
        match result {
            Ok(ess) => {
                cell.reverse_ess = ess.reverse_ess;
                cell.reverse_interval = ess.reverse_interval;
                if let (Some(f), Some(i)) = (ess.forward_ess, ess.forward_interval) {
                    cell.forward_ess = f;
                    cell.forward_interval = i;
                }
                ess.to_report(sub.eval.seed).write(&sub.output.dir.join("ess_report.txt"))?;
            }
            Err(e) => {
                log::warn!("{id}: {e}");
                cell.status = e.to_string().replace(['\n', ','], " ");
            }
        }
        let metrics_path = sub.output.dir.join("metrics.csv");
        if let Ok(rows) = metrics::read_metrics(&metrics_path) {
            traces.extend(metrics::gradnorm_trace(&rows, ""));
        }
        cells.push(cell);
    }
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            vec![
                c.estimator.clone(),
                c.iterations.to_string(),
                c.reverse_ess.to_string(),
                c.reverse_interval.0.to_string(),
                c.reverse_interval.1.to_string(),
                c.forward_ess.to_string(),
                c.forward_interval.0.to_string(),
                c.forward_interval.1.to_string(),
                c.status.clone(),
            ]
        })
        .collect();
    metrics::write_table(
        &dir.join("comparison.csv"),
        &["estimator", "iterations", "reverse_ess", "reverse_ess_p16", "reverse_ess_p84", "forward_ess", "forward_ess_p16", "forward_ess_p84", "status"],
        &rows,
    )?;
    metrics::write_series(&dir.join("gradnorm.csv"), &traces)?;
    Ok(cells)
}
