//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! system.threads = 16
//! system.policy = nonblocking      # or blocking
//! class.0.k = 3
//! class.0.n_max = 6
//! class.0.delta = 0.4              # or class.0.mean + class.0.delta_fraction,
//! class.0.mu = 1.6667              # or class.0.trace = latencies.csv
//! class.0.rate = 5.0               # or class.0.alpha with run.load
//! scheduler = bafec
//! run.horizon = 200000
//! run.seed = 7
//! sweep.multipliers = 0.1, 0.5, 0.9
//! sweep.schedulers = fixed:3; fixed:6; greedy; bafec
//! sweep.seeds = 1, 2, 3
//! ```
//!
//! Class indices must be contiguous from 0. Relative trace paths are
//! resolved against the config file's directory. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::analytics::{AnalyticsError, ClassParams, Policy, SystemParams};
use crate::delay_model::{
    estimate_params, load_trace, DelayModelError, DelaySource, EstimatedParams, SamplingMode, ShiftedExp, TraceFilter,
    DEFAULT_FILTERED_FRACTION,
};
use crate::experiment::{reference_capacity, SweepSpec};
use crate::schedulers::SchedulerKind;
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("missing key `{0}`")]
    Missing(String),
    #[error("unknown key `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Delay(#[from] DelayModelError),
    #[error(transparent)]
    Analytics(#[from] AnalyticsError),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A parsed configuration: one simulation plus optional sweep settings.
#[derive(Debug, Clone)]
pub struct Config {
    pub sim: SimConfig,
    /// Class composition of the arrival stream.
    pub alpha: Vec<f64>,
    pub sweep: SweepSpec,
    /// Parameters fitted from traces, per class.
    pub estimated: Vec<Option<EstimatedParams>>,
}

struct Entries {
    map: BTreeMap<String, (String, usize)>,
}

impl Entries {
    fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("expected `key = value`, got `{content}`"),
                });
            };
            let key = key.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("bad key `{key}`"),
                });
            }
            if map.insert(key.to_string(), (value.trim().to_string(), line)).is_some() {
                return Err(ConfigError::Syntax {
                    line,
                    message: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { map })
    }

    fn take_str(&mut self, key: &str) -> Option<String> {
        self.map.remove(key).map(|(v, _)| v)
    }

    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, ConfigError>
    where
        T::Err: Display,
    {
        self.take_str(key)
            .map(|v| {
                v.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    message: format!("`{v}`: {e}"),
                })
            })
            .transpose()
    }

    fn require<T: FromStr>(&mut self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: Display,
    {
        self.take(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn take_list<T: FromStr>(&mut self, key: &str, sep: char) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: Display,
    {
        let Some(v) = self.take_str(key) else {
            return Ok(None);
        };
        v.split(sep)
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse().map_err(|e: T::Err| ConfigError::Value {
                    key: key.to_string(),
                    message: format!("`{t}`: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn class_count(&self) -> usize {
        self.map
            .keys()
            .filter_map(|k| k.strip_prefix("class.")?.split('.').next()?.parse::<usize>().ok())
            .map(|i| i + 1)
            .max()
            .unwrap_or(0)
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.map.into_iter().next() {
            Some((key, _)) => Err(ConfigError::Unknown(key)),
            None => Ok(()),
        }
    }
}

fn value_err(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        message: message.into(),
    }
}

struct ParsedClass {
    params: ClassParams,
    source: DelaySource,
    estimated: Option<EstimatedParams>,
    rate: Option<f64>,
    alpha: Option<f64>,
}

fn parse_class(e: &mut Entries, i: usize, base_dir: &Path, seed: u64) -> Result<ParsedClass, ConfigError> {
    let key = |name: &str| format!("class.{i}.{name}");
    let k: u32 = e.require(&key("k"))?;
    let n_max: u32 = e.require(&key("n_max"))?;
    let delta: Option<f64> = e.take(&key("delta"))?;
    let mu: Option<f64> = e.take(&key("mu"))?;
    let mean: Option<f64> = e.take(&key("mean"))?;
    let fraction: Option<f64> = e.take(&key("delta_fraction"))?;
    let trace: Option<String> = e.take_str(&key("trace"));
    let filter = TraceFilter {
        op_type: e.take_str(&key("trace_op")),
        chunk_bytes: e.take(&key("trace_chunk"))?,
    };
    let mode: SamplingMode = e.take(&key("trace_mode"))?.unwrap_or_default();
    let filtered: f64 = e.take(&key("filtered_fraction"))?.unwrap_or(DEFAULT_FILTERED_FRACTION);

    let trace = match trace {
        Some(path) => {
            let path = PathBuf::from(path);
            let path = if path.is_relative() { base_dir.join(path) } else { path };
            Some(load_trace(&path, &filter, mode, seed)?)
        }
        None => None,
    };
    let estimated = trace
        .as_ref()
        .map(|t| estimate_params(t.samples(), filtered))
        .transpose()?;

    let delay = match (delta, mu, mean, fraction, &estimated) {
        (Some(d), Some(m), None, None, _) => ShiftedExp::new(d, m)?,
        (None, None, Some(mean), Some(f), _) => ShiftedExp::from_mean_and_fraction(mean, f)?,
        (None, None, None, None, Some(est)) => est.to_shifted_exp(),
        _ => {
            return Err(value_err(
                key("delta"),
                "give delta and mu, or mean and delta_fraction, or a trace",
            ))
        }
    };
    let params = ClassParams::from_delay(k, &delay, n_max)?;
    let source = match trace {
        Some(t) => DelaySource::Trace(t),
        None => DelaySource::ShiftedExp(delay),
    };
    Ok(ParsedClass {
        params,
        source,
        estimated,
        rate: e.take(&key("rate"))?,
        alpha: e.take(&key("alpha"))?,
    })
}

impl Config {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut e = Entries::parse(text)?;

        let threads: u32 = e.require("system.threads")?;
        let beta: f64 = e.take("system.beta")?.unwrap_or(SystemParams::DEFAULT_BETA);
        let sys = SystemParams::new(threads, beta)?;
        let policy: Policy = e.take("system.policy")?.unwrap_or(Policy::NonBlocking);
        let scheduler: SchedulerKind = e.take("scheduler")?.unwrap_or(SchedulerKind::Greedy);
        let seed: u64 = e.take("run.seed")?.unwrap_or(1);
        let horizon: Option<usize> = e.take("run.horizon")?;
        let warmup: Option<usize> = e.take("run.warmup")?;
        let load: Option<f64> = e.take("run.load")?;

        let m = e.class_count();
        if m == 0 {
            return Err(ConfigError::Missing("class.0.k".into()));
        }
        let parsed = (0..m)
            .map(|i| parse_class(&mut e, i, base_dir, seed))
            .collect::<Result<Vec<_>, _>>()?;
        let classes: Vec<ClassParams> = parsed.iter().map(|p| p.params).collect();

        let given_rates: Vec<f64> = parsed.iter().filter_map(|p| p.rate).collect();
        let rates_given = given_rates.len() == m;
        if !given_rates.is_empty() && !rates_given {
            return Err(value_err("class.*.rate", "set a rate for every class or for none"));
        }
        let alpha: Vec<f64> = if rates_given {
            let total: f64 = given_rates.iter().sum();
            if !(total > 0.0) {
                return Err(value_err("class.*.rate", "total rate must be positive"));
            }
            given_rates.iter().map(|r| r / total).collect()
        } else {
            let raw: Vec<f64> = parsed.iter().map(|p| p.alpha.unwrap_or(1.0)).collect();
            let total: f64 = raw.iter().sum();
            if raw.iter().any(|a| !(*a >= 0.0)) || !(total > 0.0) {
                return Err(value_err("class.*.alpha", "weights must be >= 0 with a positive sum"));
            }
            raw.iter().map(|a| a / total).collect()
        };

        let capacity_override: Option<f64> = e.take("sweep.capacity")?;
        let capacity = match capacity_override {
            Some(c) => c,
            None => reference_capacity(&classes, &alpha, &sys, policy)?,
        };
        let rates = if rates_given {
            if load.is_some() {
                return Err(value_err("run.load", "cannot be combined with explicit class rates"));
            }
            given_rates
        } else {
            let load = load.unwrap_or(0.5);
            alpha.iter().map(|a| a * load * capacity).collect()
        };

        let mut sim = SimConfig::new(classes, rates, sys, policy, scheduler.clone());
        sim.delay_sources = parsed.iter().map(|p| p.source.clone()).collect();
        sim = sim.with_seed(seed);
        if let Some(h) = horizon {
            sim = sim.with_horizon(h);
        }
        if let Some(w) = warmup {
            sim.warmup = w;
        }

        let multipliers = e
            .take_list("sweep.multipliers", ',')?
            .unwrap_or_else(|| (1..=9).map(|i| i as f64 / 10.0).collect());
        let schedulers = e.take_list("sweep.schedulers", ';')?.unwrap_or_else(|| vec![scheduler]);
        let seeds = e.take_list("sweep.seeds", ',')?.unwrap_or_else(|| vec![seed, seed + 1, seed + 2]);
        let sweep = SweepSpec {
            multipliers,
            schedulers,
            seeds,
            capacity,
        };
        sweep.validate().map_err(|m| value_err("sweep", m))?;

        e.finish()?;
        Ok(Self {
            sim,
            alpha,
            sweep,
            estimated: parsed.into_iter().map(|p| p.estimated).collect(),
        })
    }

    /// Replaces the run seed; sweep seeds become `seed, seed + 1, ...`.
    pub fn override_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        let count = self.sweep.seeds.len() as u64;
        self.sweep.seeds = (seed..seed + count).collect();
    }
}
