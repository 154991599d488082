//! Flat `key = value` run configuration.
//!
//! Every key has a default; a config file and `--set` flags may only touch
//! known keys. Generator keys (`disk.*`, `odom.*`) mirror the simulator
//! config structs field by field; tuple and array fields are written as
//! comma-separated lists.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{Map, Number, Value};
use smoothlearn::factors::{NoiseKind, Task};
use smoothlearn::learn::{AdamConfig, LossKind, Supervision, TrainConfig};
use smoothlearn::solve::LinearBackend;
use smoothlearn::tasks::{DiskSimConfig, Estimator, GeneratorConfig, OdomSimConfig};

use crate::CliError;

pub const SEED_ENV: &str = "SMOOTHLEARN_SEED";

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Int,
    Float,
    Bool,
    Text,
    Choice(&'static [&'static str]),
    FloatList,
}

/// Keys outside the generator sections: name, default, type.
const KEYS: &[(&str, &str, Kind)] = &[
    ("seed", "0", Kind::Int),
    ("out", "runs/latest", Kind::Text),
    ("task", "disk", Kind::Choice(&["disk", "odom2d"])),
    ("data.records", "500", Kind::Int),
    ("data.path", "", Kind::Text),
    ("data.frames", "0", Kind::Int),
    (
        "train.loss",
        "e2e-mse",
        Kind::Choice(&["e2e-mse", "joint-nll", "ekf-mse"]),
    ),
    (
        "train.noise",
        "heteroscedastic",
        Kind::Choice(&["constant", "heteroscedastic"]),
    ),
    ("train.epochs", "10", Kind::Int),
    ("train.batch_size", "16", Kind::Int),
    ("train.lr", "0.003", Kind::Float),
    ("train.K", "5", Kind::Int),
    (
        "train.supervision",
        "position",
        Kind::Choice(&["position", "velocity", "all"]),
    ),
    (
        "train.backend",
        "auto",
        Kind::Choice(&["auto", "cg", "cholesky"]),
    ),
    ("train.cg_tol", "1e-10", Kind::Float),
    ("train.pretrain", "true", Kind::Bool),
    ("train.pretrain_fraction", "0.5", Kind::Float),
    ("train.fold", "0", Kind::Int),
    ("train.validate", "true", Kind::Bool),
    ("train.checkpoint", "", Kind::Text),
    (
        "eval.estimator",
        "smoother",
        Kind::Choice(&["smoother", "ekf", "raw", "gt"]),
    ),
    ("eval.checkpoint", "", Kind::Text),
    ("eval.folds", "all", Kind::Text),
    ("experiment.jobs", "1", Kind::Int),
    ("disk_compare.records", "500", Kind::Int),
    ("disk_compare.folds", "10", Kind::Int),
    ("odom_compare.records", "200", Kind::Int),
    ("odom_compare.folds", "3", Kind::Int),
    ("noise_transfer.records", "200", Kind::Int),
    ("noise_transfer.seeds", "3", Kind::Int),
];

/// Resolved configuration: every known key bound to a validated value.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
    kinds: BTreeMap<String, Kind>,
}

fn generator_defaults() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for (section, v) in [
        ("disk", serde_json::to_value(DiskSimConfig::default())),
        ("odom", serde_json::to_value(OdomSimConfig::default())),
    ] {
        let Value::Object(map) = v.expect("simulator config serializes") else {
            unreachable!("simulator configs are structs")
        };
        for (k, v) in map {
            out.push((format!("{section}.{k}"), v));
        }
    }
    out
}

fn value_text(v: &Value) -> String {
    match v {
        Value::Array(xs) => xs.iter().map(value_text).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn kind_of(v: &Value) -> Kind {
    match v {
        Value::Array(_) => Kind::FloatList,
        Value::Number(n) if n.is_u64() => Kind::Int,
        Value::Number(_) => Kind::Float,
        Value::Bool(_) => Kind::Bool,
        _ => Kind::Text,
    }
}

fn check(key: &str, kind: Kind, value: &str) -> Result<(), CliError> {
    let ok = match kind {
        Kind::Int => value.parse::<u64>().is_ok(),
        Kind::Float => value.parse::<f64>().is_ok_and(f64::is_finite),
        Kind::Bool => value.parse::<bool>().is_ok(),
        Kind::Text => true,
        Kind::Choice(options) => options.contains(&value),
        Kind::FloatList => value
            .split(',')
            .all(|x| x.trim().parse::<f64>().is_ok_and(f64::is_finite)),
    };
    if ok {
        Ok(())
    } else {
        let expected = match kind {
            Kind::Int => "a non-negative integer".to_string(),
            Kind::Float => "a finite number".to_string(),
            Kind::Bool => "true or false".to_string(),
            Kind::Choice(o) => format!("one of {}", o.join(", ")),
            Kind::FloatList => "comma-separated numbers".to_string(),
            Kind::Text => unreachable!(),
        };
        Err(CliError::Config(format!(
            "{key} = {value:?}: expected {expected}"
        )))
    }
}

/// Splits `key = value` (or `key=value`).
pub fn split_assignment(s: &str) -> Result<(String, String), CliError> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("expected key = value, got {s:?}")))?;
    let (k, v) = (k.trim(), v.trim());
    if k.is_empty() {
        return Err(CliError::Config(format!("empty key in {s:?}")));
    }
    let v = v
        .strip_prefix('"')
        .and_then(|x| x.strip_suffix('"'))
        .unwrap_or(v);
    Ok((k.to_string(), v.to_string()))
}

/// Parses a config file: one assignment per line, `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let pair =
            split_assignment(line).map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        out.push(pair);
    }
    Ok(out)
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        for &(k, v, kind) in KEYS {
            values.insert(k.to_string(), v.to_string());
            kinds.insert(k.to_string(), kind);
        }
        for (k, v) in generator_defaults() {
            kinds.insert(k.clone(), kind_of(&v));
            values.insert(k, value_text(&v));
        }
        RunConfig { values, kinds }
    }
}

impl RunConfig {
    /// Defaults, then the file, then `overrides` in order. The seed
    /// environment variable beats the file and overrides but not an
    /// explicit `seed_flag`.
    pub fn resolve(
        file: Option<&Path>,
        overrides: &[(String, String)],
        env_seed: Option<&str>,
        seed_flag: Option<u64>,
    ) -> Result<Self, CliError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("cannot read config {}: {e}", path.display()))
            })?;
            for (k, v) in parse_config_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        if let Some(s) = env_seed.filter(|s| !s.is_empty()) {
            cfg.set("seed", s)
                .map_err(|e| CliError::Config(format!("{SEED_ENV}: {e}")))?;
        }
        if let Some(s) = seed_flag {
            cfg.set("seed", &s.to_string())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let kind = *self
            .kinds
            .get(key)
            .ok_or_else(|| CliError::Config(format!("unknown config key {key:?}")))?;
        check(key, kind, value)?;
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn str(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key {key} is not declared"))
    }

    pub fn usize(&self, key: &str) -> usize {
        self.str(key).parse().expect("validated on set")
    }

    pub fn u64(&self, key: &str) -> u64 {
        self.str(key).parse().expect("validated on set")
    }

    pub fn f64(&self, key: &str) -> f64 {
        self.str(key).parse().expect("validated on set")
    }

    pub fn bool(&self, key: &str) -> bool {
        self.str(key).parse().expect("validated on set")
    }

    pub fn seed(&self) -> u64 {
        self.u64("seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.str("out"))
    }

    /// `key`, or `fallback` inside the output directory when empty.
    pub fn path_or(&self, key: &str, fallback: &str) -> PathBuf {
        match self.str(key) {
            "" => self.out_dir().join(fallback),
            p => PathBuf::from(p),
        }
    }

    pub fn task(&self) -> Task {
        Task::parse(self.str("task")).expect("validated on set")
    }

    pub fn noise(&self) -> NoiseKind {
        NoiseKind::parse(self.str("train.noise")).expect("validated on set")
    }

    pub fn loss(&self) -> LossKind {
        LossKind::parse(self.str("train.loss")).expect("validated on set")
    }

    pub fn estimator(&self) -> Estimator {
        Estimator::parse(self.str("eval.estimator")).expect("validated on set")
    }

    /// Simulator settings of the configured task.
    pub fn generator(&self) -> Result<GeneratorConfig, CliError> {
        self.generator_for(self.task())
    }

    pub fn generator_for(&self, task: Task) -> Result<GeneratorConfig, CliError> {
        let section = match task {
            Task::Disk => "disk",
            Task::Odom2d => "odom",
        };
        let mut map = Map::new();
        for (k, v) in generator_defaults() {
            let Some(field) = k.strip_prefix(&format!("{section}.")) else {
                continue;
            };
            let text = self.str(&k);
            let parsed = match v {
                Value::Array(_) => Value::Array(
                    text.split(',')
                        .map(|x| number(x.trim().parse().expect("validated on set")))
                        .collect(),
                ),
                Value::Number(n) if n.is_u64() => Value::from(self.u64(&k)),
                Value::Number(_) => number(self.f64(&k)),
                Value::Bool(_) => Value::Bool(self.bool(&k)),
                other => other,
            };
            map.insert(field.to_string(), parsed);
        }
        let value = Value::Object(map);
        let bad = |e: serde_json::Error| CliError::Config(format!("{section}.*: {e}"));
        let generator = match task {
            Task::Disk => GeneratorConfig::Disk(serde_json::from_value(value).map_err(bad)?),
            Task::Odom2d => GeneratorConfig::Odom2d(serde_json::from_value(value).map_err(bad)?),
        };
        let length = generator.length();
        if length < 2 {
            return Err(CliError::Config(format!(
                "{section}.length must be at least 2, got {length}"
            )));
        }
        Ok(generator)
    }

    /// Training settings; `task` picks the backend when set to `auto`.
    pub fn train_config(&self, task: Task) -> Result<TrainConfig, CliError> {
        let cg = LinearBackend::Cg {
            rel_tol: self.f64("train.cg_tol"),
            max_iters: None,
        };
        let backend = match (self.str("train.backend"), task) {
            ("cg", _) | ("auto", Task::Disk) => cg,
            // the odometry prior makes the normal equations too stiff for CG
            _ => LinearBackend::Cholesky,
        };
        let config = TrainConfig {
            adam: AdamConfig {
                learning_rate: self.f64("train.lr"),
                ..Default::default()
            },
            batch_size: self.usize("train.batch_size"),
            epochs: self.usize("train.epochs"),
            seed: self.seed(),
            loss: self.loss(),
            supervision: Supervision::parse(self.str("train.supervision"))
                .expect("validated on set"),
            surrogate_steps: self.usize("train.K"),
            backend,
            pretrain: self.bool("train.pretrain"),
            pretrain_fraction: self.f64("train.pretrain_fraction"),
        };
        config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(config)
    }

    /// The resolved-config echo: one sorted `key = value` line per key.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            writeln!(s, "{k} = {v}").expect("writing to a string");
        }
        s
    }
}

fn number(x: f64) -> Value {
    Number::from_f64(x).map_or(Value::Null, Value::Number)
}
