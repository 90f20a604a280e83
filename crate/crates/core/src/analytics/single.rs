//! Single-class approximations.

use super::{AnalyticsError, ClassParams, Policy, SystemParams};
use crate::numeric::{bisect, first_sign_change};

/// Expected thread-time consumed by one request with an `(n, k)` code,
/// `n * delta + k / mu`. `n` may be fractional but must exceed `k - 1`.
pub fn usage(n: f64, class: &ClassParams) -> Result<f64, AnalyticsError> {
    check_relaxed(n, class.k)?;
    Ok(n * class.delta + class.k as f64 / class.mu)
}

pub(crate) fn check_relaxed(n: f64, k: u32) -> Result<(), AnalyticsError> {
    if n.is_finite() && n > k as f64 - 1.0 {
        Ok(())
    } else {
        Err(AnalyticsError::Domain { n, k })
    }
}

fn check_code(n: u32, class: &ClassParams, sys: &SystemParams) -> Result<(), AnalyticsError> {
    if n < class.k || n > sys.threads {
        return Err(AnalyticsError::CodeOutOfRange {
            n,
            lo: class.k,
            hi: sys.threads,
        });
    }
    Ok(())
}

/// Bounds on the always-backlogged throughput of a blocking policy:
/// `(L - n + 1) / u(n)` and `L / u(n)`.
pub fn capacity_blocking_bounds(
    n: u32,
    class: &ClassParams,
    sys: &SystemParams,
) -> Result<(f64, f64), AnalyticsError> {
    check_code(n, class, sys)?;
    let u = usage(n as f64, class)?;
    let l = sys.l();
    Ok(((l - n as f64 + 1.0) / u, l / u))
}

/// Midpoint of the blocking bounds, `(L - (n - 1)/2) / u(n)`.
pub fn capacity_blocking_estimate(n: u32, class: &ClassParams, sys: &SystemParams) -> Result<f64, AnalyticsError> {
    check_code(n, class, sys)?;
    let u = usage(n as f64, class)?;
    Ok((sys.l() - (n as f64 - 1.0) / 2.0) / u)
}

/// `L / u(n)`: a saturated work-conserving pool keeps all threads busy.
pub fn capacity_nonblocking(n: u32, class: &ClassParams, sys: &SystemParams) -> Result<f64, AnalyticsError> {
    check_code(n, class, sys)?;
    Ok(sys.l() / usage(n as f64, class)?)
}

pub fn capacity(n: u32, class: &ClassParams, sys: &SystemParams, policy: Policy) -> Result<f64, AnalyticsError> {
    match policy {
        Policy::Blocking => capacity_blocking_estimate(n, class, sys),
        Policy::NonBlocking => capacity_nonblocking(n, class, sys),
    }
}

/// Mean of the k-th order statistic of `n` task delays:
/// `delta + sum_{j=0}^{k-1} 1/((n - j) mu)`, defined for real `n > k - 1`.
pub fn service_delay_relaxed(n: f64, class: &ClassParams) -> Result<f64, AnalyticsError> {
    check_relaxed(n, class.k)?;
    let tail: f64 = (0..class.k).map(|j| 1.0 / ((n - j as f64) * class.mu)).sum();
    Ok(class.delta + tail)
}

/// Expected service delay of an `(n, k)` request,
/// `delta + sum_{j=n-k+1}^{n} 1/(j mu)`.
pub fn service_delay(n: u32, class: &ClassParams) -> Result<f64, AnalyticsError> {
    if n < class.k {
        return Err(AnalyticsError::CodeOutOfRange {
            n,
            lo: class.k,
            hi: u32::MAX,
        });
    }
    service_delay_relaxed(n as f64, class)
}

/// M/G/1 waiting time with Erlang-`n` service of mean `1/capacity`:
/// `lambda (n + 1) / (2 n C (C - lambda))`.
pub fn queueing_delay_estimate(n: u32, lambda: f64, capacity: f64) -> Result<f64, AnalyticsError> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(AnalyticsError::InvalidRate(lambda));
    }
    if lambda >= capacity {
        return Err(AnalyticsError::Unstable { lambda, capacity });
    }
    let n = n as f64;
    Ok(lambda * (n + 1.0) / (2.0 * n * capacity * (capacity - lambda)))
}

/// Estimated mean total delay: service delay plus queueing delay under the
/// policy's capacity estimate.
pub fn total_delay_estimate(
    n: u32,
    class: &ClassParams,
    sys: &SystemParams,
    lambda: f64,
    policy: Policy,
) -> Result<f64, AnalyticsError> {
    let c = capacity(n, class, sys, policy)?;
    Ok(service_delay(n, class)? + queueing_delay_estimate(n, lambda, c)?)
}

const SCAN_STEPS: usize = 20_000;

/// Arrival rate where codes `(n, k)` and `(n + 1, k)` have equal estimated
/// total delay. Below it the longer code is better.
///
/// The difference of the two delay curves is scanned upward from zero and
/// the first sign change is refined by bisection, so the smaller root is
/// returned when two exist.
pub fn solve_crossover_rate(
    n: u32,
    class: &ClassParams,
    sys: &SystemParams,
    policy: Policy,
) -> Result<f64, AnalyticsError> {
    if n < class.k || n >= class.n_max {
        return Err(AnalyticsError::CodeOutOfRange {
            n,
            lo: class.k,
            hi: class.n_max.saturating_sub(1),
        });
    }
    let c_short = capacity(n, class, sys, policy)?;
    let c_long = capacity(n + 1, class, sys, policy)?;
    let c_min = c_short.min(c_long);

    let ds_short = service_delay(n, class)?;
    let ds_long = service_delay(n + 1, class)?;
    let diff = |lambda: f64| {
        let short = ds_short + queueing_delay_estimate(n, lambda, c_short).unwrap_or(f64::INFINITY);
        let long = ds_long + queueing_delay_estimate(n + 1, lambda, c_long).unwrap_or(f64::INFINITY);
        short - long
    };

    // Stay strictly below the pole of the smaller capacity.
    let hi = c_min * (1.0 - 1e-12);
    let Some((a, b)) = first_sign_change(&diff, 0.0, hi, SCAN_STEPS) else {
        return Err(AnalyticsError::NoCrossover {
            n,
            longer_dominates: diff(0.0) > 0.0,
        });
    };
    if a == b {
        return Ok(a);
    }
    bisect(diff, a, b).ok_or(AnalyticsError::NoCrossover {
        n,
        longer_dominates: true,
    })
}

/// Expected request-queue length at the crossover rate, via Little's law:
/// `Q_n = lambda_n * Dq(n, lambda_n)`.
///
/// When the longer code wins on the whole stable range the threshold is
/// `+inf` (never fall back to `n`); when the shorter code always wins it is
/// `0`.
pub fn crossover_backlog(
    n: u32,
    class: &ClassParams,
    sys: &SystemParams,
    policy: Policy,
) -> Result<f64, AnalyticsError> {
    match solve_crossover_rate(n, class, sys, policy) {
        Ok(lambda) => {
            let c = capacity(n, class, sys, policy)?;
            Ok(lambda * queueing_delay_estimate(n, lambda, c)?)
        }
        Err(AnalyticsError::NoCrossover { longer_dominates, .. }) => {
            Ok(if longer_dominates { f64::INFINITY } else { 0.0 })
        }
        Err(e) => Err(e),
    }
}

/// One backlog threshold between codes `n` and `n + 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub n: u32,
    /// `None` when the delay curves never cross.
    pub lambda: Option<f64>,
    pub backlog: f64,
}

/// Thresholds `Q_k, ..., Q_{n_max - 1}` for a class in isolation.
pub fn threshold_row(class: &ClassParams, sys: &SystemParams, policy: Policy) -> Result<Vec<Threshold>, AnalyticsError> {
    (class.k..class.n_max)
        .map(|n| {
            let lambda = match solve_crossover_rate(n, class, sys, policy) {
                Ok(l) => Some(l),
                Err(AnalyticsError::NoCrossover { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(Threshold {
                n,
                lambda,
                backlog: crossover_backlog(n, class, sys, policy)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }

    fn read_class() -> ClassParams {
        ClassParams::new(3, 0.061, 1.0 / 0.079, 6).unwrap()
    }

    fn synthetic(frac: f64) -> ClassParams {
        // mean task delay 1
        ClassParams::new(3, frac, 1.0 / (1.0 - frac), 6).unwrap()
    }

    fn sys(l: u32) -> SystemParams {
        SystemParams::with_threads(l).unwrap()
    }

    #[test]
    fn usage_examples() {
        let c = ClassParams::new(3, 0.0, 1.0, 6).unwrap();
        for n in [3.0, 4.5, 6.0] {
            assert_eq!(usage(n, &c).unwrap(), 3.0);
        }
        assert!(rel(usage(3.0, &read_class()).unwrap(), 0.420) < 1e-9);
        assert!(rel(usage(6.0, &read_class()).unwrap(), 0.603) < 1e-9);
        assert!(matches!(usage(2.0, &read_class()), Err(AnalyticsError::Domain { .. })));
    }

    #[test]
    fn blocking_bounds_examples() {
        let (lo, hi) = capacity_blocking_bounds(3, &read_class(), &sys(16)).unwrap();
        assert!(rel(lo, 14.0 / 0.42) < 1e-9);
        assert!(rel(hi, 16.0 / 0.42) < 1e-9);
        assert!((lo - 33.333_333).abs() < 1e-5 && (hi - 38.095_238).abs() < 1e-5);

        let one = ClassParams::new(1, 0.2, 2.0, 4).unwrap();
        let (lo, hi) = capacity_blocking_bounds(1, &one, &sys(1)).unwrap();
        assert_eq!(lo, hi);
        assert!(rel(lo, 1.0 / 0.7) < 1e-12);

        let (lo, _) = capacity_blocking_bounds(4, &one, &sys(4)).unwrap();
        assert!(rel(lo, 1.0 / usage(4.0, &one).unwrap()) < 1e-12);

        assert!(matches!(
            capacity_blocking_bounds(5, &one, &sys(4)),
            Err(AnalyticsError::CodeOutOfRange { .. })
        ));
    }

    #[test]
    fn blocking_estimate_examples() {
        let c = read_class();
        let est = capacity_blocking_estimate(3, &c, &sys(16)).unwrap();
        assert!(rel(est, 15.0 / 0.42) < 1e-9);
        assert!((est - 35.714_286).abs() < 1e-5);

        let one = ClassParams::new(1, 0.2, 2.0, 4).unwrap();
        let (_, hi) = capacity_blocking_bounds(1, &one, &sys(8)).unwrap();
        assert_eq!(capacity_blocking_estimate(1, &one, &sys(8)).unwrap(), hi);

        for n in 4..=6 {
            let (lo, hi) = capacity_blocking_bounds(n, &c, &sys(16)).unwrap();
            let e = capacity_blocking_estimate(n, &c, &sys(16)).unwrap();
            assert!(lo < e && e < hi);
        }
    }

    #[test]
    fn nonblocking_capacity_examples() {
        let c = ClassParams::new(3, 0.0, 2.0, 6).unwrap();
        for n in 3..=6 {
            assert!(rel(capacity_nonblocking(n, &c, &sys(16)).unwrap(), 16.0 * 2.0 / 3.0) < 1e-12);
        }
        assert!(rel(capacity_nonblocking(3, &read_class(), &sys(16)).unwrap(), 38.095_238_095) < 1e-9);
        let caps: Vec<f64> = (3..=6)
            .map(|n| capacity_nonblocking(n, &read_class(), &sys(16)).unwrap())
            .collect();
        assert!(caps.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn service_delay_examples() {
        let c = ClassParams::new(1, 0.3, 2.0, 4).unwrap();
        assert!(rel(service_delay(1, &c).unwrap(), 0.3 + 0.5) < 1e-12);

        let c = ClassParams::new(3, 0.0, 1.0, 6).unwrap();
        assert!(rel(service_delay(4, &c).unwrap(), 13.0 / 12.0) < 1e-12);
        assert!(rel(service_delay(6, &c).unwrap(), 37.0 / 60.0) < 1e-12);
        assert!(service_delay(2, &c).is_err());
    }

    #[test]
    fn queueing_delay_examples() {
        assert_eq!(queueing_delay_estimate(3, 0.0, 10.0).unwrap(), 0.0);
        assert!(rel(queueing_delay_estimate(1, 0.5, 1.0).unwrap(), 1.0) < 1e-12);
        assert!(matches!(
            queueing_delay_estimate(3, 10.0, 10.0),
            Err(AnalyticsError::Unstable { .. })
        ));
        assert!(queueing_delay_estimate(3, -1.0, 10.0).is_err());
        let mut prev = 0.0;
        for i in 1..1000 {
            let d = queueing_delay_estimate(4, 10.0 * i as f64 / 1000.0, 10.0).unwrap();
            assert!(d > prev);
            prev = d;
        }
        assert!(queueing_delay_estimate(4, 10.0 * (1.0 - 1e-9), 10.0).unwrap() > 1e7);
    }

    #[test]
    fn total_delay_at_zero_rate_is_service_delay() {
        let c = read_class();
        for policy in [Policy::Blocking, Policy::NonBlocking] {
            for n in 3..=6 {
                assert_eq!(
                    total_delay_estimate(n, &c, &sys(16), 0.0, policy).unwrap(),
                    service_delay(n, &c).unwrap()
                );
            }
        }
    }

    /// Independent oracle: evaluate both delay curves on a dense grid and
    /// locate the first place where their order flips.
    fn grid_crossover(n: u32, c: &ClassParams, s: &SystemParams, policy: Policy) -> Option<f64> {
        let cap = capacity(n + 1, c, s, policy).unwrap().min(capacity(n, c, s, policy).unwrap());
        let steps = 200_000;
        let mut prev_sign = None;
        for i in 0..steps {
            let lambda = cap * i as f64 / steps as f64;
            let a = total_delay_estimate(n, c, s, lambda, policy).unwrap();
            let b = total_delay_estimate(n + 1, c, s, lambda, policy).unwrap();
            let sign = a > b;
            if let Some(p) = prev_sign {
                if p != sign {
                    return Some(lambda);
                }
            }
            prev_sign = Some(sign);
        }
        None
    }

    #[test]
    fn crossover_matches_grid_and_plugs_back() {
        let c = synthetic(0.4);
        let s = sys(16);
        for policy in [Policy::NonBlocking, Policy::Blocking] {
            for n in 3..6 {
                let lambda = solve_crossover_rate(n, &c, &s, policy).unwrap();
                let a = total_delay_estimate(n, &c, &s, lambda, policy).unwrap();
                let b = total_delay_estimate(n + 1, &c, &s, lambda, policy).unwrap();
                assert!(rel(a, b) < 1e-9, "residual {}", rel(a, b));

                let grid = grid_crossover(n, &c, &s, policy).unwrap();
                let cap = capacity(n + 1, &c, &s, policy).unwrap();
                assert!((grid - lambda).abs() <= cap / 200_000.0 + 1e-12, "{grid} vs {lambda}");
                assert!(lambda > 0.0 && lambda < cap);
            }
        }
    }

    #[test]
    fn crossover_sign_structure() {
        let c = synthetic(0.4);
        let s = sys(16);
        let lambda = solve_crossover_rate(3, &c, &s, Policy::NonBlocking).unwrap();
        let cap4 = capacity_nonblocking(4, &c, &s).unwrap();
        for i in 1..200 {
            let l = cap4 * i as f64 / 200.0;
            let d3 = total_delay_estimate(3, &c, &s, l, Policy::NonBlocking).unwrap();
            let d4 = total_delay_estimate(4, &c, &s, l, Policy::NonBlocking).unwrap();
            if l < lambda * (1.0 - 1e-9) {
                assert!(d4 < d3, "at {l}");
            } else if l > lambda * (1.0 + 1e-9) {
                assert!(d3 < d4, "at {l}");
            }
        }
    }

    #[test]
    fn zero_overhead_has_no_crossover() {
        let c = ClassParams::new(3, 0.0, 1.0, 6).unwrap();
        let err = solve_crossover_rate(3, &c, &sys(16), Policy::NonBlocking).unwrap_err();
        assert_eq!(
            err,
            AnalyticsError::NoCrossover {
                n: 3,
                longer_dominates: true
            }
        );
        assert_eq!(crossover_backlog(3, &c, &sys(16), Policy::NonBlocking).unwrap(), f64::INFINITY);
    }

    #[test]
    fn crossover_range_checked() {
        let c = synthetic(0.4);
        assert!(solve_crossover_rate(6, &c, &sys(16), Policy::NonBlocking).is_err());
        assert!(solve_crossover_rate(2, &c, &sys(16), Policy::NonBlocking).is_err());
    }

    #[test]
    fn backlog_thresholds_strictly_decrease() {
        for frac in [0.1, 0.2, 0.4, 0.6, 0.8] {
            for l in [16, 64] {
                for policy in [Policy::NonBlocking, Policy::Blocking] {
                    let row = threshold_row(&synthetic(frac), &sys(l), policy).unwrap();
                    assert_eq!(row.len(), 3);
                    assert!(
                        row.windows(2).all(|w| w[1].backlog < w[0].backlog),
                        "frac {frac} L {l} {policy}: {row:?}"
                    );
                }
            }
        }
        let row = threshold_row(&read_class(), &sys(16), Policy::NonBlocking).unwrap();
        assert!(row.windows(2).all(|w| w[1].backlog < w[0].backlog));
    }
}
