//! Run configuration: a TOML document with one table per component.
//!
//! Keys missing from the file take their defaults; unknown keys and
//! mistyped values are errors naming the full dotted key. `--set a.b=v`
//! overrides are applied on top of the file before validation.
//!
//! Seeds: the top-level `seed` falls back to `NF_SEED`, then to 0, and any
//! section without its own `seed` inherits it. The resolved document lists
//! every seed explicitly.

use std::path::{Path, PathBuf};

use flowpath_core::estimators::EstimatorId;
use flowpath_core::flow::RealNvpSpec;
use flowpath_core::sampling::HmcConfig;
use flowpath_core::target::DoubleWell;
use flowpath_core::training::{Switch, TrainConfig};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const SEED_ENV: &str = "NF_SEED";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub target: TargetSection,
    pub flow: FlowSection,
    pub train: TrainSection,
    pub hmc: HmcSection,
    pub eval: EvalSection,
    pub compare: CompareSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    DoubleWell,
    /// The flow's own initial density, frozen.
    #[serde(rename = "self")]
    SelfTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetSection {
    pub kind: TargetKind,
    pub sites: usize,
    pub a: f64,
    pub m0: f64,
    pub mu2: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowSection {
    pub n_layers: usize,
    pub hidden_layers: usize,
    pub width: usize,
    pub base_stddev: f64,
    pub clamp: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub estimator: String,
    pub batch_size: usize,
    pub max_iters: u64,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub plateau_patience: u64,
    pub lr_min: f64,
    pub lr_factor: f64,
    pub eval_every: u64,
    pub eval_batch: usize,
    /// Estimator used before `switch_at`; empty for none.
    pub switch_from: String,
    pub switch_at: u64,
    /// Clip gradients longer than this multiple of the running mean norm; 0 for none.
    pub clip_factor: f64,
    /// Wall-clock budget in seconds; 0 for none.
    pub max_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmcSection {
    pub n_chains: usize,
    pub n_steps: usize,
    pub n_leapfrog: usize,
    pub step_size: f64,
    pub overrelax_freq: usize,
    pub burn_in: usize,
    pub tune: bool,
    pub target_accept: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Flow samples for the reverse ESS and NIS estimates.
    pub n_q: usize,
    /// Independent flow samples for the Ẑ used by the forward ESS.
    pub z_batch: usize,
    pub bootstrap: usize,
    /// HMC sample dump for the forward ESS; empty to skip.
    pub hmc_dump: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub estimators: Vec<String>,
    /// Iteration multiplier for the non-path baselines.
    pub baseline_factor: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for TargetSection {
    fn default() -> Self {
        let dw = DoubleWell::new(8);
        Self { kind: TargetKind::DoubleWell, sites: dw.sites, a: dw.a, m0: dw.m0, mu2: dw.mu2, lambda: dw.lambda }
    }
}

impl Default for FlowSection {
    fn default() -> Self {
        Self { n_layers: 6, hidden_layers: 2, width: 64, base_stddev: 10.0, clamp: 5.0, seed: 0 }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            estimator: t.estimator.name().to_string(),
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            lr0: 1e-3,
            beta1: t.betas.0,
            beta2: t.betas.1,
            adam_eps: t.adam_eps,
            plateau_patience: t.plateau_patience,
            lr_min: t.lr_min,
            lr_factor: t.lr_factor,
            eval_every: t.eval_every,
            eval_batch: t.eval_batch,
            switch_from: String::new(),
            switch_at: 0,
            clip_factor: t.clip_factor,
            max_seconds: 0.0,
            seed: 0,
        }
    }
}

impl Default for HmcSection {
    fn default() -> Self {
        let h = HmcConfig::default();
        Self {
            n_chains: h.n_chains,
            n_steps: h.n_steps,
            n_leapfrog: h.n_leapfrog,
            step_size: h.step_size,
            overrelax_freq: h.overrelax_freq,
            burn_in: h.burn_in,
            tune: h.tune,
            target_accept: h.target_accept,
            seed: 0,
        }
    }
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { n_q: 100_000, z_batch: 100_000, bootstrap: 1000, hmc_dump: String::new(), seed: 0 }
    }
}

impl Default for CompareSection {
    fn default() -> Self {
        Self { estimators: EstimatorId::TRAINABLE.iter().map(|e| e.name().to_string()).collect(), baseline_factor: 2 }
    }
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

const SEEDED: [&str; 4] = ["flow", "train", "hmc", "eval"];

impl RunConfig {
    /// Reads `path` (if given), applies `overrides` and resolves seeds.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                text.parse::<Table>().map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let env_seed = std::env::var(SEED_ENV).ok();
        Self::from_table(table, env_seed.as_deref())
    }

    pub fn from_table(mut table: Table, env_seed: Option<&str>) -> Result<Self, CliError> {
        if !table.contains_key("seed") {
            if let Some(s) = env_seed {
                let v: u64 = s.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}={s} is not a seed")))?;
                table.insert("seed".into(), Value::Integer(v as i64));
            }
        }
        let defaults = Table::try_from(RunConfig::default()).expect("defaults serialize");
        check_against(&mut table, &defaults, "")?;
        let master = table.get("seed").cloned().unwrap_or(Value::Integer(0));
        for section in SEEDED {
            let t = table.entry(section).or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = t {
                t.entry("seed").or_insert_with(|| master.clone());
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.estimator()?;
        self.switch()?;
        for name in &self.compare.estimators {
            parse_estimator("compare.estimators", name)?;
        }
        self.double_well().validate().map_err(usage("target"))?;
        self.flow_spec().validate().map_err(usage("flow"))?;
        self.train_config()?.validate().map_err(usage("train"))?;
        self.hmc_config().validate().map_err(usage("hmc"))?;
        if self.eval.n_q < 2 || self.eval.z_batch < 2 {
            return Err(CliError::Usage("eval.n_q and eval.z_batch must be at least 2".into()));
        }
        if self.train.max_seconds.is_nan() || self.train.max_seconds < 0.0 {
            return Err(CliError::Usage("train.max_seconds must be non-negative".into()));
        }
        Ok(())
    }

    pub fn estimator(&self) -> Result<EstimatorId, CliError> {
        parse_estimator("train.estimator", &self.train.estimator)
    }

    fn switch(&self) -> Result<Option<Switch>, CliError> {
        if self.train.switch_from.is_empty() {
            return Ok(None);
        }
        let start = parse_estimator("train.switch_from", &self.train.switch_from)?;
        Ok(Some(Switch { start, at: self.train.switch_at }))
    }

    pub fn double_well(&self) -> DoubleWell {
        let t = &self.target;
        DoubleWell { sites: t.sites, a: t.a, m0: t.m0, mu2: t.mu2, lambda: t.lambda }
    }

    pub fn flow_spec(&self) -> RealNvpSpec {
        let f = &self.flow;
        RealNvpSpec {
            dim: self.target.sites,
            n_layers: f.n_layers,
            hidden_layers: f.hidden_layers,
            width: f.width,
            base_stddev: f.base_stddev,
            clamp: f.clamp,
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            estimator: self.estimator()?,
            batch_size: t.batch_size,
            max_iters: t.max_iters,
            lr0: t.lr0,
            betas: (t.beta1, t.beta2),
            adam_eps: t.adam_eps,
            plateau_patience: t.plateau_patience,
            lr_min: t.lr_min,
            lr_factor: t.lr_factor,
            seed: t.seed,
            eval_every: t.eval_every,
            eval_batch: t.eval_batch,
            switch: self.switch()?,
            clip_factor: t.clip_factor,
        })
    }

    pub fn hmc_config(&self) -> HmcConfig {
        let h = &self.hmc;
        HmcConfig {
            n_chains: h.n_chains,
            n_steps: h.n_steps,
            n_leapfrog: h.n_leapfrog,
            step_size: h.step_size,
            overrelax_freq: h.overrelax_freq,
            burn_in: h.burn_in,
            seed: h.seed,
            tune: h.tune,
            target_accept: h.target_accept,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved configuration as `config.toml` in `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::write(dir.join("config.toml"), self.to_toml()).map_err(CliError::io("config.toml"))
    }
}

fn usage(section: &'static str) -> impl Fn(flowpath_core::Error) -> CliError {
    move |e| CliError::Usage(format!("{section}: {e}"))
}

pub fn parse_estimator(key: &str, name: &str) -> Result<EstimatorId, CliError> {
    name.parse().map_err(|_| {
        let known: Vec<&str> = EstimatorId::ALL.iter().map(|e| e.name()).collect();
        CliError::Usage(format!("`{key}`: unknown estimator `{name}` (expected one of {})", known.join(", ")))
    })
}

/// Applies `section.key=value`. The value is read as a TOML literal when
/// it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{spec}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = cur.entry(*part).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("`{}` is not a section", parts[..=i].join(".")))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::String(_) => "a string",
        Value::Integer(_) => "an integer",
        Value::Float(_) => "a float",
        Value::Boolean(_) => "a boolean",
        Value::Datetime(_) => "a datetime",
        Value::Array(_) => "an array",
        Value::Table(_) => "a table",
    }
}

/// Rejects keys absent from `defaults` and values whose type differs from
/// the default's, widening integers to floats where a float is expected.
fn check_against(table: &mut Table, defaults: &Table, prefix: &str) -> Result<(), CliError> {
    for (k, v) in table.iter_mut() {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let Some(d) = defaults.get(k) else {
            return Err(CliError::Usage(format!("unknown key `{path}`")));
        };
        match (d, &mut *v) {
            (Value::Table(dt), Value::Table(t)) => check_against(t, dt, &path)?,
            (Value::Float(_), Value::Integer(i)) => *v = Value::Float(*i as f64),
            (Value::Integer(_), Value::Integer(i)) if *i < 0 => {
                return Err(CliError::Usage(format!("`{path}` must be non-negative")));
            }
            (d, v) if std::mem::discriminant(d) == std::mem::discriminant(v) => {}
            (d, v) => {
                return Err(CliError::Usage(format!("`{path}` expects {}, got {}", type_name(d), type_name(v))));
            }
        }
    }
    Ok(())
}
