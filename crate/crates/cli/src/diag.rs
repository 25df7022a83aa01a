//! The `diagnostics` subcommands: estimator variance and bias, the
//! singular-weight probe, the score zero-mean check, timing and
//! gradient-norm traces.

use std::path::Path;

use flowpath_core::diagnostics::{
    gaussian_forward_kl_grad, measure_bias, measure_variance, near_converged_pair, score_zero_mean_test,
    singular_regime_probe, SingularRegimeSpec,
};
use flowpath_core::estimators::EstimatorId;
use flowpath_core::flow::{Flow, RealNvp};
use flowpath_core::math;
use flowpath_core::target::Target;

use crate::checkpoint::Checkpoint;
use crate::config::{parse_estimator, RunConfig};
use crate::metrics::{self, Series};
use crate::report::Report;
use crate::run_target::{RunTarget, TargetDesc};
use crate::timing::{timing_probe, Timing};
use crate::{CliError, CliResult};

/// The flow of `checkpoint`, or the freshly initialized flow of `cfg`,
/// together with its target.
pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> CliResult<(RealNvp, RunTarget)> {
    match checkpoint {
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let target = ck.target.build(ck.spec, ck.flow_seed);
            Ok((ck.flow()?, target))
        }
        None => {
            let target = TargetDesc::from_config(cfg).build(cfg.flow_spec(), cfg.flow.seed);
            Ok((RealNvp::new(cfg.flow_spec(), cfg.flow.seed), target))
        }
    }
}

pub fn parse_estimators(key: &str, names: &[String]) -> CliResult<Vec<EstimatorId>> {
    if names.is_empty() {
        return Err(CliError::Usage(format!("`{key}` needs at least one estimator")));
    }
    names.iter().map(|n| parse_estimator(key, n)).collect()
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(CliError::io(dir.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    pub replicates: usize,
    pub failures: usize,
    pub norm_mean: f64,
    pub norm_variance: f64,
    /// Sum of the componentwise variances.
    pub total_variance: f64,
}

/// Replicate variance of each estimator on shared batches; writes
/// `variance.csv`.
#[allow(clippy::too_many_arguments)]
pub fn variance<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    estimators: &[EstimatorId],
    n: usize,
    r: usize,
    seed: u64,
    workers: usize,
    out: &Path,
) -> CliResult<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    for &id in estimators {
        let rep = measure_variance(id, flow, target, n, r, seed, workers)?;
        for (k, e) in &rep.failures {
            log::warn!("{id}: replicate {k} failed: {e}");
        }
        rows.push(VarianceRow {
            estimator: id,
            batch_size: n,
            replicates: rep.replicates,
            failures: rep.failures.len(),
            norm_mean: rep.norm_mean,
            norm_variance: rep.norm_variance,
            total_variance: rep.variance.iter().sum(),
        });
    }
    ensure_dir(out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|v| {
            vec![
                v.estimator.to_string(),
                v.batch_size.to_string(),
                v.replicates.to_string(),
                v.failures.to_string(),
                v.norm_mean.to_string(),
                v.norm_variance.to_string(),
                v.total_variance.to_string(),
            ]
        })
        .collect();
    metrics::write_table(
        &out.join("variance.csv"),
        &["estimator", "batch_size", "replicates", "failures", "norm_mean", "norm_variance", "total_variance"],
        &table,
    )?;
    Ok(rows)
}

/// Singular-weight probe on the double well; writes `singular_report.txt`.
pub fn singular(cfg: &RunConfig, flow: &RealNvp, target: &RunTarget, n: usize, epsilon: f64, seed: u64, out: &Path) -> CliResult<Report> {
    if !matches!(TargetDesc::from_config(cfg), TargetDesc::DoubleWell(_)) {
        return Err(CliError::Usage("the singular probe needs the double-well target".into()));
    }
    let spec = SingularRegimeSpec::double_well(&cfg.double_well(), n, epsilon, seed);
    let p = singular_regime_probe(&spec, flow, target)?;
    let mut r = Report::new();
    r.add("n", n)
        .add("epsilon", epsilon)
        .add("weight_ratio", p.weight_ratio)
        .add("norm_pathpq", p.norm_pathpq)
        .add("norm_zpathpq", p.norm_zpathpq)
        .add("norm_pathqp", p.norm_pathqp)
        .add("ratio_zpathpq_pathpq", p.norm_zpathpq / p.norm_pathpq)
        .add("cos_pathpq_pathqp", p.cos_pathpq_pathqp)
        .add("cos_pathpq_anchor", p.cos_pathpq_anchor)
        .add("seed", seed);
    ensure_dir(out)?;
    r.write(&out.join("singular_report.txt"))?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasRow {
    pub estimator: EstimatorId,
    pub batch_size: usize,
    /// Euclidean norm of the bias vector.
    pub bias_norm: f64,
    /// Standard error of that norm, from the per-component errors.
    pub bias_stderr: f64,
    pub bias: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Bias of forward-KL estimators on a 1-D Gaussian target `N(mean, std²)`
/// against a flow off by `rel`, over several batch sizes; writes
/// `bias.csv`.
#[allow(clippy::too_many_arguments)]
pub fn bias(
    estimators: &[EstimatorId],
    mean: f64,
    std: f64,
    rel: f64,
    sizes: &[usize],
    r: usize,
    seed: u64,
    workers: usize,
    out: &Path,
) -> CliResult<Vec<BiasRow>> {
    let (flow, target) = near_converged_pair(mean, std, rel)?;
    let exact = match estimators.iter().find(|id| !id.is_forward()) {
        Some(id) => return Err(CliError::Usage(format!("bias needs a forward-KL estimator, got {id}"))),
        None => gaussian_forward_kl_grad(
            &flow.params()[..1],
            &flow.params()[1..],
            target.mean(),
            target.stddev(),
        ),
    };
    let mut rows = Vec::new();
    for &id in estimators {
        for &n in sizes {
            let b = measure_bias(id, &flow, &target, &exact, n, r, seed, workers)?;
            let bias_norm = math::norm(&b.bias);
            let bias_stderr = if bias_norm > 0.0 {
                math::sqrt(b.bias.iter().zip(&b.stderr).map(|(x, s)| (x * s) * (x * s)).sum::<f64>()) / bias_norm
            } else {
                math::norm(&b.stderr)
            };
            rows.push(BiasRow { estimator: id, batch_size: n, bias_norm, bias_stderr, bias: b.bias, stderr: b.stderr });
        }
    }
    ensure_dir(out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|b| {
            vec![
                b.estimator.to_string(),
                b.batch_size.to_string(),
                b.bias_norm.to_string(),
                b.bias_stderr.to_string(),
                b.bias[0].to_string(),
                b.stderr[0].to_string(),
                b.bias[1].to_string(),
                b.stderr[1].to_string(),
            ]
        })
        .collect();
    metrics::write_table(
        &out.join("bias.csv"),
        &["estimator", "batch_size", "bias_norm", "bias_stderr", "bias_loc", "stderr_loc", "bias_scale", "stderr_scale"],
        &table,
    )?;
    Ok(rows)
}

/// Monte-Carlo check that the score term averages to zero; writes
/// `score_mean_report.txt`.
#[allow(clippy::too_many_arguments)]
pub fn score_mean<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    batch: usize,
    batches: usize,
    seed: u64,
    workers: usize,
    out: &Path,
) -> CliResult<Report> {
    let s = score_zero_mean_test(flow, target, batch, batches, seed, workers)?;
    let worst = s
        .mean
        .iter()
        .zip(&s.stderr)
        .map(|(m, e)| if *e > 0.0 { m.abs() / e } else if *m == 0.0 { 0.0 } else { f64::INFINITY })
        .fold(0.0, f64::max);
    let mut r = Report::new();
    r.add("samples", s.samples)
        .add("mean_norm", s.mean_norm())
        .add("max_abs_z", worst)
        .add("within_4_stderr", s.within(4.0))
        .add("seed", seed);
    ensure_dir(out)?;
    r.write(&out.join("score_mean_report.txt"))?;
    Ok(r)
}

/// Median wall-clock cost per estimator; writes `timing.csv`.
#[allow(clippy::too_many_arguments)]
pub fn timing<F: Flow, T: Target>(
    flow: &F,
    target: &T,
    estimators: &[EstimatorId],
    n: usize,
    reps: usize,
    workers: usize,
    out: &Path,
) -> CliResult<Vec<Timing>> {
    let t = timing_probe(flow, target, n, reps, estimators, workers)?;
    ensure_dir(out)?;
    let table: Vec<Vec<String>> =
        t.iter().map(|t| vec![t.estimator.to_string(), t.batch_size.to_string(), t.median_ms.to_string()]).collect();
    metrics::write_table(&out.join("timing.csv"), &["estimator", "batch_size", "median_ms"], &table)?;
    Ok(t)
}

/// Gradient-norm traces (raw and EMA) of one or more metrics files;
/// writes `gradnorm.csv`. Inputs are `label=path` or a bare path, whose
/// parent directory name becomes the label.
pub fn trace(inputs: &[String], out: &Path) -> CliResult<Vec<Series>> {
    if inputs.is_empty() {
        return Err(CliError::Usage("trace needs at least one metrics file".into()));
    }
    let parsed: Vec<(String, &Path)> = inputs
        .iter()
        .map(|s| match s.split_once('=') {
            Some((label, path)) => (label.to_string(), Path::new(path)),
            None => {
                let p = Path::new(s.as_str());
                let label = p.parent().and_then(|d| d.file_name()).map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                (label, p)
            }
        })
        .collect();
    ensure_dir(out)?;
    metrics::trace_files(&parsed, &out.join("gradnorm.csv"))
}
