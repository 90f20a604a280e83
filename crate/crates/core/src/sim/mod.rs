//! Discrete-event simulation of a proxy that serves coded requests with a
//! pool of `L` threads.
//!
//! Requests arrive per class as independent Poisson streams and wait in a
//! FIFO request queue. The scheduler picks an `(n, k)` code when a request
//! arrives. Once admitted (blocking: `n` idle threads, non-blocking: one idle
//! thread) the request's `n` tasks join a FIFO task queue that idle threads
//! drain. The request finishes at its k-th task completion; its waiting tasks
//! are dropped and its running tasks are cancelled at that instant.

use std::io::Write;

use thiserror::Error;

use crate::analytics::{ClassParams, Policy, SystemParams};
use crate::delay_model::DelaySource;
use crate::schedulers::{CodeSpec, SchedulerError, SchedulerKind};

mod engine;

pub use engine::{run_backlogged, run_simulation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("simulator invariant violated at t={time}: {what}")]
    Invariant { time: f64, what: String },
}

/// Everything that determines one run, including the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub classes: Vec<ClassParams>,
    /// Per-class Poisson rates (requests/second). A zero rate disables a class.
    pub rates: Vec<f64>,
    pub sys: SystemParams,
    pub policy: Policy,
    pub scheduler: SchedulerKind,
    /// Per-class task delay source; defaults to each class's shifted
    /// exponential.
    pub delay_sources: Vec<DelaySource>,
    /// Number of requests generated.
    pub horizon: usize,
    /// Leading requests excluded from statistics.
    pub warmup: usize,
    pub seed: u64,
    /// Task delays handed out in start order before falling back to the
    /// delay sources. Only meant for hand-traced tests.
    pub scripted_delays: Option<Vec<f64>>,
    /// Re-check queue/thread invariants after every event.
    pub check_invariants: bool,
}

pub const DEFAULT_HORIZON: usize = 200_000;

impl SimConfig {
    pub fn new(
        classes: Vec<ClassParams>,
        rates: Vec<f64>,
        sys: SystemParams,
        policy: Policy,
        scheduler: SchedulerKind,
    ) -> Self {
        let delay_sources = classes.iter().map(|c| DelaySource::ShiftedExp(c.delay())).collect();
        Self {
            classes,
            rates,
            sys,
            policy,
            scheduler,
            delay_sources,
            horizon: DEFAULT_HORIZON,
            warmup: DEFAULT_HORIZON / 10,
            seed: 1,
            scripted_delays: None,
            check_invariants: false,
        }
    }

    /// Sets the horizon and the default 10% warmup.
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.horizon = horizon;
        self.warmup = horizon / 10;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.iter().sum()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let m = self.classes.len();
        if m == 0 {
            return Err(SimError::Config("at least one class is required".into()));
        }
        if self.rates.len() != m || self.delay_sources.len() != m {
            return Err(SimError::Config(format!(
                "{m} classes but {} rates and {} delay sources",
                self.rates.len(),
                self.delay_sources.len()
            )));
        }
        if self.rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || self.total_rate() <= 0.0 {
            return Err(SimError::Config("rates must be >= 0 with a positive total".into()));
        }
        if self.horizon <= self.warmup {
            return Err(SimError::Config(format!(
                "horizon {} must exceed warmup {}",
                self.horizon, self.warmup
            )));
        }
        if self.policy == Policy::Blocking {
            if let Some(c) = self.classes.iter().find(|c| c.n_max > self.sys.threads) {
                return Err(SimError::Config(format!(
                    "blocking policy with n_max {} > {} threads would never admit",
                    c.n_max, self.sys.threads
                )));
            }
        }
        Ok(())
    }
}

/// Timestamps and outcome of one request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RequestRecord {
    pub id: u64,
    pub class_id: usize,
    pub t_arrive: f64,
    pub t_start: f64,
    pub t_finish: f64,
    pub code: CodeSpec,
    pub tasks_completed: u32,
    pub tasks_canceled: u32,
    /// Request-queue length seen on arrival (the scheduler's backlog).
    pub backlog_at_arrival: usize,
}

impl RequestRecord {
    pub fn queueing_delay(&self) -> f64 {
        self.t_start - self.t_arrive
    }

    pub fn service_delay(&self) -> f64 {
        self.t_finish - self.t_start
    }

    pub fn total_delay(&self) -> f64 {
        self.t_finish - self.t_arrive
    }
}

/// Writes `id,class_id,t_arrive,t_start,t_finish,n,k,D_q,D_s,D_total`.
pub fn write_records_csv<W: Write>(records: &[RequestRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "id,class_id,t_arrive,t_start,t_finish,n,k,D_q,D_s,D_total")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.class_id,
            r.t_arrive,
            r.t_start,
            r.t_finish,
            r.code.n,
            r.code.k,
            r.queueing_delay(),
            r.service_delay(),
            r.total_delay()
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// All generated requests, ordered by id (arrival order).
    pub records: Vec<RequestRecord>,
    pub warmup: usize,
    /// Time-averaged request-queue length between the first post-warmup
    /// arrival and the last arrival.
    pub mean_backlog: f64,
    /// Empirical arrival rate over the same window.
    pub arrival_rate: f64,
}

impl SimOutput {
    pub fn measured(&self) -> &[RequestRecord] {
        &self.records[self.warmup.min(self.records.len())..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stability {
    Stable,
    Unstable,
}

/// Flags a run as unstable when the mean arrival backlog of consecutive
/// `window`-request blocks grew by more than 20% at each of the last three
/// block boundaries.
pub fn detect_stability(records: &[RequestRecord], window: usize) -> Stability {
    const GROWTH: f64 = 1.2;
    const STEPS: usize = 3;
    if window == 0 {
        return Stability::Stable;
    }
    let means: Vec<f64> = records
        .chunks_exact(window)
        .map(|c| c.iter().map(|r| r.backlog_at_arrival as f64).sum::<f64>() / window as f64)
        .collect();
    if means.len() < STEPS + 1 {
        return Stability::Stable;
    }
    let tail = &means[means.len() - STEPS - 1..];
    let growing = tail.windows(2).all(|w| w[1] > w[0] && w[1] > GROWTH * w[0]);
    if growing {
        Stability::Unstable
    } else {
        Stability::Stable
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: u64, backlog: usize) -> RequestRecord {
        RequestRecord {
            id,
            class_id: 0,
            t_arrive: 0.0,
            t_start: 0.0,
            t_finish: 1.0,
            code: CodeSpec { n: 3, k: 3 },
            tasks_completed: 3,
            tasks_canceled: 0,
            backlog_at_arrival: backlog,
        }
    }

    #[test]
    fn stability_detector() {
        let idle: Vec<_> = (0..100).map(|i| rec(i, 0)).collect();
        assert_eq!(detect_stability(&idle, 20), Stability::Stable);

        let growing: Vec<_> = (0..100).map(|i| rec(i, i as usize)).collect();
        assert_eq!(detect_stability(&growing, 20), Stability::Unstable);

        let noisy: Vec<_> = (0..100).map(|i| rec(i, (i % 7) as usize)).collect();
        assert_eq!(detect_stability(&noisy, 20), Stability::Stable);
        assert_eq!(detect_stability(&growing, 0), Stability::Stable);
    }

    #[test]
    fn records_csv_header() {
        let mut out = Vec::new();
        write_records_csv(&[rec(0, 0)], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "id,class_id,t_arrive,t_start,t_finish,n,k,D_q,D_s,D_total\n0,0,0,0,1,3,3,0,1,1\n"
        );
    }
}
