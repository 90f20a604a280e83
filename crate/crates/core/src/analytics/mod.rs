//! Closed-form capacity and delay approximations.
//!
//! [`single`] covers one request class: per-request usage, blocking and
//! non-blocking capacity estimates, the Erlang/Pollaczek-Khinchin queueing
//! delay estimate, and the crossover rates/backlogs that drive the
//! backlog-threshold schedulers. [`multiclass`] covers the relaxed multi-class
//! problem: usage vectors, total queue length, the good-code curve and its
//! layer constants, plus a finite-difference stationarity check.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::delay_model::{ShiftedExp, MU_CAP};

pub mod multiclass;
pub mod single;

pub use multiclass::{
    good_code_curve, layer_constant, multiclass_queue_length, multiclass_total_delay,
    multiclass_usage_vector, optimal_queue_length, round_code_vector, s_factor, verify_stationarity, CodeVector,
    RateVector, Stationarity,
};
pub use single::{
    capacity, capacity_blocking_bounds, capacity_blocking_estimate, capacity_nonblocking,
    crossover_backlog, queueing_delay_estimate, service_delay, service_delay_relaxed,
    solve_crossover_rate, threshold_row, total_delay_estimate, usage, Threshold,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("invalid class parameters: {0}")]
    InvalidClass(String),
    #[error("invalid system parameters: {0}")]
    InvalidSystem(String),
    #[error("code length {n} must exceed k - 1 = {}", .k - 1)]
    Domain { n: f64, k: u32 },
    #[error("code length {n} outside [{lo}, {hi}]")]
    CodeOutOfRange { n: u32, lo: u32, hi: u32 },
    #[error("arrival rate {lambda} is not below capacity {capacity}")]
    Unstable { lambda: f64, capacity: f64 },
    #[error("invalid arrival rate {0}")]
    InvalidRate(f64),
    #[error("delay curves of codes n={n} and n={} never cross on the stable range", .n + 1)]
    NoCrossover { n: u32, longer_dominates: bool },
    #[error("class {class}: no code length satisfies the good-code condition (target {target})")]
    NoSolution { class: usize, target: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// One request class: `k` chunks per file, task delays `delta + Exp(mu)`, and
/// code lengths allowed up to `n_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassParams {
    pub k: u32,
    pub delta: f64,
    pub mu: f64,
    pub n_max: u32,
}

impl ClassParams {
    pub fn new(k: u32, delta: f64, mu: f64, n_max: u32) -> Result<Self, AnalyticsError> {
        if k == 0 {
            return Err(AnalyticsError::InvalidClass("k must be >= 1".into()));
        }
        if n_max < k {
            return Err(AnalyticsError::InvalidClass(format!("n_max {n_max} < k {k}")));
        }
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(AnalyticsError::InvalidClass(format!("delta {delta} must be >= 0")));
        }
        if !(mu > 0.0) {
            return Err(AnalyticsError::InvalidClass(format!("mu {mu} must be > 0")));
        }
        Ok(Self {
            k,
            delta,
            mu: mu.min(MU_CAP),
            n_max,
        })
    }

    pub fn from_delay(k: u32, delay: &ShiftedExp, n_max: u32) -> Result<Self, AnalyticsError> {
        Self::new(k, delay.delta(), delay.mu(), n_max)
    }

    pub fn delay(&self) -> ShiftedExp {
        ShiftedExp::new(self.delta, self.mu).expect("validated on construction")
    }

    /// Mean task delay `delta + 1/mu`.
    pub fn mean_task_delay(&self) -> f64 {
        self.delta + 1.0 / self.mu
    }

    /// `delta * mu`, the overhead measured in units of the exponential mean.
    pub fn overhead_ratio(&self) -> f64 {
        self.delta * self.mu
    }
}

/// Thread pool size `threads` (L) and, for the multi-class analysis only, the
/// service-time second-moment ratio `beta = E[X^2] / E[X]^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SystemParams {
    pub threads: u32,
    pub beta: f64,
}

impl SystemParams {
    pub const DEFAULT_BETA: f64 = 2.0;

    pub fn new(threads: u32, beta: f64) -> Result<Self, AnalyticsError> {
        if threads == 0 {
            return Err(AnalyticsError::InvalidSystem("threads must be >= 1".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(AnalyticsError::InvalidSystem(format!("beta {beta} must be > 0")));
        }
        Ok(Self { threads, beta })
    }

    pub fn with_threads(threads: u32) -> Result<Self, AnalyticsError> {
        Self::new(threads, Self::DEFAULT_BETA)
    }

    pub(crate) fn l(&self) -> f64 {
        self.threads as f64
    }
}

/// Admission rule for the head-of-line request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Policy {
    /// Admit only when at least `n` threads are idle.
    Blocking,
    /// Admit whenever at least one thread is idle.
    NonBlocking,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Blocking => f.write_str("blocking"),
            Policy::NonBlocking => f.write_str("nonblocking"),
        }
    }
}

impl FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blocking" => Ok(Policy::Blocking),
            "nonblocking" | "non-blocking" => Ok(Policy::NonBlocking),
            other => Err(format!("unknown policy `{other}` (expected blocking|nonblocking)")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_validation() {
        assert!(ClassParams::new(0, 0.1, 1.0, 3).is_err());
        assert!(ClassParams::new(3, 0.1, 1.0, 2).is_err());
        assert!(ClassParams::new(3, -0.1, 1.0, 6).is_err());
        assert!(ClassParams::new(3, 0.1, 0.0, 6).is_err());
        assert_eq!(ClassParams::new(3, 0.1, f64::INFINITY, 6).unwrap().mu, MU_CAP);
    }

    #[test]
    fn system_validation() {
        assert!(SystemParams::new(0, 2.0).is_err());
        assert!(SystemParams::new(4, 0.0).is_err());
        assert_eq!(SystemParams::with_threads(16).unwrap().beta, 2.0);
    }

    #[test]
    fn policy_round_trip() {
        for p in [Policy::Blocking, Policy::NonBlocking] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("sometimes".parse::<Policy>().is_err());
    }
}
