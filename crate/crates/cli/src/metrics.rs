//! Metrics CSVs and the gradient-norm trace derived from them.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use flowpath_core::training::MetricsRow;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// One line of `metrics.csv`. Wall time is kept out of this file so that
/// reruns compare byte for byte; it goes to `walltime.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub estimator: String,
    pub loss_surrogate: f64,
    pub grad_norm: f64,
    pub reverse_ess: f64,
    pub eval_reverse_ess: Option<f64>,
    pub lr: f64,
    pub skipped: bool,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        Self {
            iter: r.iter,
            estimator: r.estimator.name().to_string(),
            loss_surrogate: r.loss_surrogate,
            grad_norm: r.grad_norm,
            reverse_ess: r.reverse_ess,
            eval_reverse_ess: r.eval_reverse_ess,
            lr: r.lr,
            skipped: r.skipped,
        }
    }
}

pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    walltime: csv::Writer<File>,
}

impl MetricsWriter {
    /// Creates `metrics.csv` and `walltime.csv` in `dir`, or appends to
    /// them when `append` is set (resumed runs).
    pub fn create(dir: &Path, append: bool) -> Result<Self, CliError> {
        let open = |name: &str| -> Result<(csv::Writer<File>, bool), CliError> {
            let path = dir.join(name);
            let existing = append && path.exists();
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(existing)
                .truncate(!existing)
                .open(&path)
                .map_err(CliError::io(path.display()))?;
            Ok((csv::WriterBuilder::new().has_headers(!existing).from_writer(f), existing))
        };
        let (metrics, _) = open("metrics.csv")?;
        let (mut walltime, existing) = open("walltime.csv")?;
        if !existing {
            walltime.write_record(["iter", "wall_ms"]).map_err(csv_err)?;
        }
        Ok(Self { metrics, walltime })
    }

    pub fn push(&mut self, row: &MetricsRow, wall_ms: f64) -> Result<(), CliError> {
        self.metrics.serialize(MetricsRecord::from(row)).map_err(csv_err)?;
        self.walltime.write_record([row.iter.to_string(), format!("{wall_ms:.3}")]).map_err(csv_err)
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.metrics.flush().map_err(CliError::io("metrics.csv"))?;
        self.walltime.flush().map_err(CliError::io("walltime.csv"))
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Runtime(format!("metrics: {e}"))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: line {line}: {msg}")]
pub struct ParseError {
    pub path: String,
    pub line: u64,
    pub msg: String,
}

impl From<ParseError> for CliError {
    fn from(e: ParseError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, ParseError> {
    let name = path.display().to_string();
    let err = |line: u64, msg: String| ParseError { path: name.clone(), line, msg };
    let text = std::fs::read_to_string(path).map_err(|e| err(0, e.to_string()))?;
    parse_metrics(&text).map_err(|(line, msg)| err(line, msg))
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>, (u64, String)> {
    if text.trim().is_empty() {
        return Err((1, "empty metrics file".into()));
    }
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in rdr.deserialize::<MetricsRecord>() {
        match rec {
            Ok(r) => rows.push(r),
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err((line, e.to_string()));
            }
        }
    }
    if rows.is_empty() {
        return Err((2, "metrics file has a header but no rows".into()));
    }
    Ok(rows)
}

/// Smoothing constant of the exponential moving average in traces.
pub const EMA_ALPHA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub iters: Vec<u64>,
    pub values: Vec<f64>,
}

/// `(iter, grad_norm)` per estimator, in order of first appearance, each
/// followed by its EMA-smoothed copy labelled `<name>_ema`. Skipped
/// iterations are left out. `prefix` is prepended to every label.
pub fn gradnorm_trace(rows: &[MetricsRecord], prefix: &str) -> Vec<Series> {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.estimator.as_str()) {
            order.push(&r.estimator);
        }
    }
    let mut out = Vec::new();
    for name in order {
        let (iters, values): (Vec<u64>, Vec<f64>) = rows
            .iter()
            .filter(|r| r.estimator == name && !r.skipped && r.grad_norm.is_finite())
            .map(|r| (r.iter, r.grad_norm))
            .unzip();
        let mut ema = Vec::with_capacity(values.len());
        let mut e = f64::NAN;
        for &v in &values {
            e = if e.is_nan() { v } else { (1.0 - EMA_ALPHA) * e + EMA_ALPHA * v };
            ema.push(e);
        }
        out.push(Series { label: format!("{prefix}{name}"), iters: iters.clone(), values });
        out.push(Series { label: format!("{prefix}{name}_ema"), iters, values: ema });
    }
    out
}

/// Two columns per series (`<label>_iter`, `<label>_grad_norm`); shorter
/// series leave blank cells.
pub fn write_series(path: &Path, series: &[Series]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    let header: Vec<String> =
        series.iter().flat_map(|s| [format!("{}_iter", s.label), format!("{}_grad_norm", s.label)]).collect();
    w.write_record(&header).map_err(csv_err)?;
    let len = series.iter().map(|s| s.iters.len()).max().unwrap_or(0);
    for i in 0..len {
        let rec: Vec<String> = series
            .iter()
            .flat_map(|s| match (s.iters.get(i), s.values.get(i)) {
                (Some(it), Some(v)) => [it.to_string(), v.to_string()],
                _ => [String::new(), String::new()],
            })
            .collect();
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(CliError::io(path.display()))
}

/// Reads each metrics file and writes the combined trace to `out`.
pub fn trace_files(inputs: &[(String, &Path)], out: &Path) -> Result<Vec<Series>, CliError> {
    let mut all = Vec::new();
    for (prefix, path) in inputs {
        let rows = read_metrics(path)?;
        all.extend(gradnorm_trace(&rows, prefix));
    }
    write_series(out, &all)?;
    Ok(all)
}

/// Writes a plain header + rows CSV.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut f = File::create(path).map_err(CliError::io(path.display()))?;
    let mut w = csv::Writer::from_writer(&mut f);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(CliError::io(path.display()))?;
    drop(w);
    f.flush().map_err(CliError::io(path.display()))
}
