//! Task service-time sources.
//!
//! A task delay is either drawn from the shifted-exponential model
//! `delta + Exp(mu)` or replayed from a measured latency trace. Traces can also
//! be reduced to a `(delta, mu)` pair with [`estimate_params`].

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::Deserialize;
use thiserror::Error;

/// Rates at or above this are treated as a zero-variance exponential.
pub const MU_CAP: f64 = 1e12;

/// Default fraction of the largest samples discarded before estimation.
pub const DEFAULT_FILTERED_FRACTION: f64 = 0.001;

#[derive(Debug, Error, PartialEq)]
pub enum DelayModelError {
    #[error("invalid shifted exponential: delta={delta}, mu={mu}")]
    InvalidShiftedExp { delta: f64, mu: f64 },
    #[error("trace must contain at least one sample")]
    EmptyTrace,
    #[error("trace latency {value} at index {index} is not a positive finite number")]
    NonPositiveLatency { index: usize, value: f64 },
    #[error("need at least {needed} samples to estimate parameters, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("filtered fraction {0} outside [0, 0.5)")]
    InvalidFraction(f64),
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },
    #[error("{path}: no samples left after filtering on {filter}")]
    EmptyAfterFilter { path: String, filter: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// Constant overhead `delta` plus an exponential tail with rate `mu`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftedExp {
    delta: f64,
    mu: f64,
}

impl ShiftedExp {
    pub fn new(delta: f64, mu: f64) -> Result<Self, DelayModelError> {
        if !(delta >= 0.0 && delta.is_finite() && mu > 0.0) {
            return Err(DelayModelError::InvalidShiftedExp { delta, mu });
        }
        Ok(Self {
            delta,
            mu: mu.min(MU_CAP),
        })
    }

    /// Builds the model from a mean task delay and the share of it that is the
    /// constant overhead, `delta / (delta + 1/mu)`.
    pub fn from_mean_and_fraction(mean: f64, delta_fraction: f64) -> Result<Self, DelayModelError> {
        let delta = mean * delta_fraction;
        let tail = mean - delta;
        let mu = if tail > 0.0 { 1.0 / tail } else { MU_CAP };
        Self::new(delta, mu)
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn mean(&self) -> f64 {
        self.delta + 1.0 / self.mu
    }

    pub fn is_degenerate(&self) -> bool {
        self.mu >= MU_CAP
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_degenerate() {
            return self.delta;
        }
        // mu > 0 and finite here, so Exp::new cannot fail.
        let exp = Exp::new(self.mu).expect("positive rate");
        self.delta + exp.sample(rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// i.i.d. resampling with replacement.
    #[default]
    Bootstrap,
    /// Replays samples in file order, wrapping at the end.
    Sequential,
}

impl fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingMode::Bootstrap => f.write_str("bootstrap"),
            SamplingMode::Sequential => f.write_str("sequential"),
        }
    }
}

impl std::str::FromStr for SamplingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bootstrap" => Ok(SamplingMode::Bootstrap),
            "sequential" => Ok(SamplingMode::Sequential),
            other => Err(format!("unknown sampling mode `{other}`")),
        }
    }
}

/// Recorded task latencies (seconds) replayed as a delay source.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSource {
    samples: Arc<[f64]>,
    mode: SamplingMode,
    rng_seed: u64,
}

impl TraceSource {
    pub fn new(samples: Vec<f64>, mode: SamplingMode, rng_seed: u64) -> Result<Self, DelayModelError> {
        if samples.is_empty() {
            return Err(DelayModelError::EmptyTrace);
        }
        if let Some((index, &value)) = samples
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(DelayModelError::NonPositiveLatency { index, value });
        }
        Ok(Self {
            samples: samples.into(),
            mode,
            rng_seed,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    /// Standalone sample stream seeded from the trace's own seed.
    pub fn sampler(&self) -> DelaySampler {
        DelaySampler::new(DelaySource::Trace(self.clone()), 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DelaySource {
    ShiftedExp(ShiftedExp),
    Trace(TraceSource),
}

impl DelaySource {
    /// Mean task delay of the source.
    pub fn mean(&self) -> f64 {
        match self {
            DelaySource::ShiftedExp(d) => d.mean(),
            DelaySource::Trace(t) => t.samples.iter().sum::<f64>() / t.samples.len() as f64,
        }
    }
}

impl From<ShiftedExp> for DelaySource {
    fn from(d: ShiftedExp) -> Self {
        DelaySource::ShiftedExp(d)
    }
}

impl From<TraceSource> for DelaySource {
    fn from(t: TraceSource) -> Self {
        DelaySource::Trace(t)
    }
}

/// Per-run sampling state for one delay source: its own RNG stream and, for
/// sequential trace replay, a cursor.
#[derive(Debug, Clone)]
pub struct DelaySampler {
    source: DelaySource,
    rng: ChaCha8Rng,
    cursor: usize,
}

impl DelaySampler {
    /// `stream` selects an independent RNG stream; trace sources additionally
    /// mix in their own seed.
    pub fn new(source: DelaySource, seed: u64) -> Self {
        let seed = match &source {
            DelaySource::ShiftedExp(_) => seed,
            DelaySource::Trace(t) => seed ^ t.rng_seed.rotate_left(32),
        };
        Self {
            source,
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
        }
    }

    pub fn with_stream(mut self, stream: u64) -> Self {
        self.rng.set_stream(stream);
        self
    }

    pub fn source(&self) -> &DelaySource {
        &self.source
    }

    pub fn next_delay(&mut self) -> f64 {
        sample_task_delay(&self.source, &mut self.rng, &mut self.cursor)
    }
}

impl Iterator for DelaySampler {
    type Item = f64;

    fn next(&mut self) -> Option<f64> {
        Some(self.next_delay())
    }
}

/// Draws one task latency. `cursor` is only touched by sequential traces.
pub fn sample_task_delay<R: Rng + ?Sized>(source: &DelaySource, rng: &mut R, cursor: &mut usize) -> f64 {
    match source {
        DelaySource::ShiftedExp(d) => d.sample(rng),
        DelaySource::Trace(t) => match t.mode {
            SamplingMode::Bootstrap => t.samples[rng.random_range(0..t.samples.len())],
            SamplingMode::Sequential => {
                let v = t.samples[*cursor % t.samples.len()];
                *cursor = (*cursor + 1) % t.samples.len();
                v
            }
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatedParams {
    pub delta: f64,
    pub mu: f64,
    pub filtered_fraction: f64,
}

impl EstimatedParams {
    pub fn to_shifted_exp(&self) -> ShiftedExp {
        ShiftedExp::new(self.delta, self.mu).expect("estimates are always valid")
    }
}

/// Fits `(delta, mu)` by moments after dropping the `ceil(fraction * count)`
/// largest samples: `1/mu` is the population standard deviation of the rest
/// and `delta + 1/mu` their mean.
pub fn estimate_params(samples: &[f64], filtered_fraction: f64) -> Result<EstimatedParams, DelayModelError> {
    const MIN_SAMPLES: usize = 10;
    if samples.len() < MIN_SAMPLES {
        return Err(DelayModelError::TooFewSamples {
            needed: MIN_SAMPLES,
            got: samples.len(),
        });
    }
    if !(0.0..0.5).contains(&filtered_fraction) {
        return Err(DelayModelError::InvalidFraction(filtered_fraction));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let drop = (filtered_fraction * sorted.len() as f64).ceil() as usize;
    let kept = &sorted[..sorted.len() - drop];

    let count = kept.len() as f64;
    let mean = kept.iter().sum::<f64>() / count;
    let var = kept.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count;
    let stddev = var.sqrt();

    let mu = if stddev > 0.0 { (1.0 / stddev).min(MU_CAP) } else { MU_CAP };
    Ok(EstimatedParams {
        delta: (mean - stddev).max(0.0),
        mu,
        filtered_fraction,
    })
}

/// Row selector for [`load_trace`]; `None` matches anything.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TraceFilter {
    pub op_type: Option<String>,
    pub chunk_bytes: Option<u64>,
}

impl fmt::Display for TraceFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let op = self.op_type.as_deref().unwrap_or("*");
        match self.chunk_bytes {
            Some(c) => write!(f, "op_type={op}, chunk_bytes={c}"),
            None => write!(f, "op_type={op}, chunk_bytes=*"),
        }
    }
}

#[derive(Debug, Deserialize)]
struct TraceRow {
    op_type: String,
    chunk_bytes: u64,
    latency_seconds: f64,
}

/// Reads a `op_type,chunk_bytes,latency_seconds` CSV trace. Lines starting
/// with `#` are comments.
pub fn load_trace(
    path: impl AsRef<Path>,
    filter: &TraceFilter,
    mode: SamplingMode,
    rng_seed: u64,
) -> Result<TraceSource, DelayModelError> {
    let path = path.as_ref();
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| DelayModelError::Io {
        path: display.clone(),
        message: e.to_string(),
    })?;
    read_trace(file, &display, filter, mode, rng_seed)
}

pub(crate) fn read_trace<R: std::io::Read>(
    reader: R,
    display: &str,
    filter: &TraceFilter,
    mode: SamplingMode,
    rng_seed: u64,
) -> Result<TraceSource, DelayModelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut samples = Vec::new();
    for result in rdr.deserialize::<TraceRow>() {
        let row = result.map_err(|e| DelayModelError::Parse {
            path: display.to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if filter.op_type.as_ref().is_some_and(|op| *op != row.op_type) {
            continue;
        }
        if filter.chunk_bytes.is_some_and(|c| c != row.chunk_bytes) {
            continue;
        }
        if !(row.latency_seconds.is_finite() && row.latency_seconds > 0.0) {
            return Err(DelayModelError::Parse {
                path: display.to_string(),
                line: rdr.position().line(),
                message: format!("latency {} is not positive", row.latency_seconds),
            });
        }
        samples.push(row.latency_seconds);
    }
    if samples.is_empty() {
        return Err(DelayModelError::EmptyAfterFilter {
            path: display.to_string(),
            filter: filter.to_string(),
        });
    }
    TraceSource::new(samples, mode, rng_seed)
}
