//! Checkpoints: a text header describing target, architecture and
//! optimizer state, terminated by `end`, then little-endian `f64` blocks
//! for θ and (when training state is present) the Adam moments `m`, `v`.
//!
//! ```text
//! flowpath-checkpoint 1
//! target double_well sites=8 a=1 m0=2.75 mu2=-1 lambda=1
//! flow realnvp dim=8 n_layers=6 hidden_layers=2 width=64 base_stddev=10 clamp=5 seed=0
//! params 1234
//! train iter=100 lr=0.001 ...
//! end
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! checkpoint reloads bit-exactly.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use flowpath_core::flow::{Flow, RealNvp, RealNvpSpec};
use flowpath_core::target::DoubleWell;
use flowpath_core::training::{Adam, Plateau, RngPos, TrainState};

use crate::run_target::TargetDesc;
use crate::CliError;

const MAGIC: &str = "flowpath-checkpoint 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub target: TargetDesc,
    pub spec: RealNvpSpec,
    pub flow_seed: u64,
    pub params: Vec<f64>,
    pub train: Option<TrainState>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("checkpoint: {0}")]
pub struct FormatError(String);

fn bad(msg: impl Into<String>) -> FormatError {
    FormatError(msg.into())
}

impl Checkpoint {
    pub fn new(target: TargetDesc, flow: &RealNvp, train: Option<TrainState>) -> Self {
        Self { target, spec: *flow.spec(), flow_seed: flow.seed(), params: flow.params().to_vec(), train }
    }

    pub fn flow(&self) -> Result<RealNvp, CliError> {
        Ok(RealNvp::from_params(self.spec, self.flow_seed, self.params.clone())?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let s = &self.spec;
        let mut head = String::new();
        head.push_str(MAGIC);
        head.push('\n');
        match &self.target {
            TargetDesc::DoubleWell(d) => head.push_str(&format!(
                "target double_well sites={} a={} m0={} mu2={} lambda={}\n",
                d.sites, d.a, d.m0, d.mu2, d.lambda
            )),
            TargetDesc::SelfTarget => head.push_str("target self\n"),
        }
        head.push_str(&format!(
            "flow realnvp dim={} n_layers={} hidden_layers={} width={} base_stddev={} clamp={} seed={}\n",
            s.dim, s.n_layers, s.hidden_layers, s.width, s.base_stddev, s.clamp, self.flow_seed
        ));
        head.push_str(&format!("params {}\n", self.params.len()));
        if let Some(t) = &self.train {
            let (a, p) = (&t.adam, &t.plateau);
            head.push_str(&format!(
                "train iter={} lr={} failures={} grad_ema={} beta1={} beta2={} eps={} t={} skipped={} patience={} factor={} lr_min={} best={} counter={} batch_rng={} eval_rng={}\n",
                t.iter, t.lr, t.consecutive_failures, t.grad_norm_ema, a.beta1, a.beta2, a.eps, a.t, a.skipped,
                p.patience, p.factor, p.lr_min, p.best, p.counter, fmt_rng(t.batch_rng), fmt_rng(t.eval_rng)
            ));
        }
        head.push_str("end\n");
        let mut out = head.into_bytes();
        let mut push = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        push(&self.params);
        if let Some(t) = &self.train {
            push(&t.adam.m);
            push(&t.adam.v);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut lines = Vec::new();
        let mut pos = 0;
        loop {
            let nl = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| bad("header is not terminated"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not text"))?;
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
            if lines.len() > 16 {
                return Err(bad("header too long"));
            }
        }
        if lines.first() != Some(&MAGIC) {
            return Err(bad("missing magic line"));
        }
        let mut target = None;
        let mut flow = None;
        let mut n_params = None;
        let mut train = None;
        for line in &lines[1..] {
            let mut words = line.split_whitespace();
            let kind = words.next().unwrap_or("");
            match kind {
                "target" => {
                    let name = words.next().ok_or_else(|| bad("target has no kind"))?;
                    let f = Fields::parse(words)?;
                    target = Some(match name {
                        "double_well" => TargetDesc::DoubleWell(DoubleWell {
                            sites: f.get("sites")?,
                            a: f.get("a")?,
                            m0: f.get("m0")?,
                            mu2: f.get("mu2")?,
                            lambda: f.get("lambda")?,
                        }),
                        "self" => TargetDesc::SelfTarget,
                        other => return Err(bad(format!("unknown target `{other}`"))),
                    });
                }
                "flow" => {
                    if words.next() != Some("realnvp") {
                        return Err(bad("only realnvp flows are supported"));
                    }
                    let f = Fields::parse(words)?;
                    let spec = RealNvpSpec {
                        dim: f.get("dim")?,
                        n_layers: f.get("n_layers")?,
                        hidden_layers: f.get("hidden_layers")?,
                        width: f.get("width")?,
                        base_stddev: f.get("base_stddev")?,
                        clamp: f.get("clamp")?,
                    };
                    flow = Some((spec, f.get::<u64>("seed")?));
                }
                "params" => {
                    let n = words.next().ok_or_else(|| bad("params has no count"))?;
                    n_params = Some(n.parse::<usize>().map_err(|_| bad("bad params count"))?);
                }
                "train" => {
                    let f = Fields::parse(words)?;
                    train = Some(f);
                }
                other => return Err(bad(format!("unknown header line `{other}`"))),
            }
        }
        let target = target.ok_or_else(|| bad("missing target line"))?;
        let (spec, flow_seed) = flow.ok_or_else(|| bad("missing flow line"))?;
        spec.validate().map_err(|e| bad(e.to_string()))?;
        let n = n_params.ok_or_else(|| bad("missing params line"))?;
        let blocks = if train.is_some() { 3 } else { 1 };
        let body = &bytes[pos..];
        if body.len() != 8 * n * blocks {
            return Err(bad(format!("expected {} data bytes, found {}", 8 * n * blocks, body.len())));
        }
        let mut vals = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut block = || (&mut vals).take(n).collect::<Vec<f64>>();
        let params = block();
        let train = match train {
            None => None,
            Some(f) => {
                let (m, v) = (block(), block());
                Some(TrainState {
                    iter: f.get("iter")?,
                    lr: f.get("lr")?,
                    consecutive_failures: f.get("failures")?,
                    grad_norm_ema: f.get("grad_ema")?,
                    adam: Adam { beta1: f.get("beta1")?, beta2: f.get("beta2")?, eps: f.get("eps")?, m, v, t: f.get("t")?, skipped: f.get("skipped")? },
                    plateau: Plateau {
                        patience: f.get("patience")?,
                        factor: f.get("factor")?,
                        lr_min: f.get("lr_min")?,
                        best: f.get("best")?,
                        counter: f.get("counter")?,
                    },
                    batch_rng: parse_rng(f.raw("batch_rng")?)?,
                    eval_rng: parse_rng(f.raw("eval_rng")?)?,
                })
            }
        };
        let ck = Checkpoint { target, spec, flow_seed, params, train };
        let expect = RealNvp::new(spec, flow_seed).params().len();
        if expect != n {
            return Err(bad(format!("architecture has {expect} parameters, file has {n}")));
        }
        Ok(ck)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(CliError::io(tmp.display()))?;
        std::fs::rename(&tmp, path).map_err(CliError::io(path.display()))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(CliError::read(path))?;
        Self::decode(&bytes).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

fn fmt_rng(r: RngPos) -> String {
    format!("{}/{}/{}", r.seed, r.stream, r.word_pos)
}

fn parse_rng(s: &str) -> Result<RngPos, FormatError> {
    let parts: Vec<&str> = s.split('/').collect();
    let err = || bad(format!("bad generator position `{s}`"));
    if parts.len() != 3 {
        return Err(err());
    }
    Ok(RngPos {
        seed: parts[0].parse().map_err(|_| err())?,
        stream: parts[1].parse().map_err(|_| err())?,
        word_pos: parts[2].parse().map_err(|_| err())?,
    })
}

struct Fields<'a>(HashMap<&'a str, &'a str>);

impl<'a> Fields<'a> {
    fn parse(words: impl Iterator<Item = &'a str>) -> Result<Self, FormatError> {
        let mut map = HashMap::new();
        for w in words {
            let (k, v) = w.split_once('=').ok_or_else(|| bad(format!("malformed field `{w}`")))?;
            map.insert(k, v);
        }
        Ok(Fields(map))
    }

    fn raw(&self, key: &str) -> Result<&'a str, FormatError> {
        self.0.get(key).copied().ok_or_else(|| bad(format!("missing field `{key}`")))
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, FormatError> {
        let v = self.raw(key)?;
        v.parse().map_err(|_| bad(format!("bad value `{v}` for `{key}`")))
    }
}
