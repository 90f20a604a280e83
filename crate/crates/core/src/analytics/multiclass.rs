//! Relaxed multi-class analysis.
//!
//! Code lengths are real numbers `n_i > k_i - 1`. The request-queue service
//! time is modelled with mean `alpha^T U / L` and second moment
//! `beta * mean^2`.

use super::single::{check_relaxed, service_delay_relaxed, usage};
use super::{AnalyticsError, ClassParams, SystemParams};
use crate::numeric::bisect;

/// Per-class code lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVector(pub Vec<f64>);

impl CodeVector {
    pub fn new(codes: Vec<f64>, classes: &[ClassParams]) -> Result<Self, AnalyticsError> {
        check_len(classes.len(), codes.len())?;
        for (n, c) in codes.iter().zip(classes) {
            check_relaxed(*n, c.k)?;
        }
        Ok(Self(codes))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Per-class Poisson arrival rates, all positive.
#[derive(Debug, Clone, PartialEq)]
pub struct RateVector(Vec<f64>);

impl RateVector {
    pub fn new(rates: Vec<f64>) -> Result<Self, AnalyticsError> {
        if rates.is_empty() {
            return Err(AnalyticsError::DimensionMismatch { expected: 1, got: 0 });
        }
        if let Some(&bad) = rates.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
            return Err(AnalyticsError::InvalidRate(bad));
        }
        Ok(Self(rates))
    }

    /// Total rate times a composition vector; the composition is normalised.
    pub fn from_composition(total: f64, alpha: &[f64]) -> Result<Self, AnalyticsError> {
        let sum: f64 = alpha.iter().sum();
        Self::new(alpha.iter().map(|a| total * a / sum).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }

    /// Composition vector `alpha = Lambda / lambda`.
    pub fn composition(&self) -> Vec<f64> {
        let total = self.total();
        self.0.iter().map(|r| r / total).collect()
    }
}

fn check_len(expected: usize, got: usize) -> Result<(), AnalyticsError> {
    if expected == got {
        Ok(())
    } else {
        Err(AnalyticsError::DimensionMismatch { expected, got })
    }
}

/// Element-wise usage `u_i(n_i)`.
pub fn multiclass_usage_vector(codes: &[f64], classes: &[ClassParams]) -> Result<Vec<f64>, AnalyticsError> {
    check_len(classes.len(), codes.len())?;
    codes.iter().zip(classes).map(|(&n, c)| usage(n, c)).collect()
}

fn load(codes: &[f64], rates: &RateVector, classes: &[ClassParams]) -> Result<f64, AnalyticsError> {
    check_len(classes.len(), rates.as_slice().len())?;
    let u = multiclass_usage_vector(codes, classes)?;
    Ok(rates.as_slice().iter().zip(&u).map(|(r, u)| r * u).sum())
}

/// Expected total request-queue length `beta x^2 / (2L (L - x))` with
/// `x = Lambda^T U(N)`.
pub fn multiclass_queue_length(
    codes: &[f64],
    rates: &RateVector,
    classes: &[ClassParams],
    sys: &SystemParams,
) -> Result<f64, AnalyticsError> {
    let x = load(codes, rates, classes)?;
    let l = sys.l();
    if x >= l {
        return Err(AnalyticsError::Unstable {
            lambda: x,
            capacity: l,
        });
    }
    Ok(sys.beta * x * x / (2.0 * l * (l - x)))
}

/// Composition-weighted mean delay: common queueing delay plus
/// `sum_i alpha_i D_{s,i}(n_i)`.
pub fn multiclass_total_delay(
    codes: &[f64],
    rates: &RateVector,
    classes: &[ClassParams],
    sys: &SystemParams,
) -> Result<f64, AnalyticsError> {
    let q = multiclass_queue_length(codes, rates, classes, sys)?;
    let lambda = rates.total();
    let alpha = rates.composition();
    let mut service = 0.0;
    for ((&n, c), a) in codes.iter().zip(classes).zip(&alpha) {
        service += a * service_delay_relaxed(n, c)?;
    }
    // Little's law: waiting time = queue length / total rate.
    Ok(q / lambda + service)
}

/// `s = sum_{j=0}^{k-1} 1/(n - j)^2`, minus the derivative of the service
/// delay tail scaled by `mu`.
pub fn s_factor(n: f64, k: u32) -> Result<f64, AnalyticsError> {
    check_relaxed(n, k)?;
    Ok((0..k).map(|j| (n - j as f64).powi(-2)).sum())
}

fn curve_value(n: f64, c: &ClassParams) -> Result<f64, AnalyticsError> {
    Ok(s_factor(n, c.k)? / c.overhead_ratio())
}

/// Completes a good code vector from one class's code length by solving
/// `s_j(n_j) / (delta_j mu_j) = s_a(n_a) / (delta_a mu_a)` for every other
/// class. `s` is strictly decreasing, so each root is unique.
pub fn good_code_curve(anchor: usize, anchor_n: f64, classes: &[ClassParams]) -> Result<CodeVector, AnalyticsError> {
    if anchor >= classes.len() {
        return Err(AnalyticsError::DimensionMismatch {
            expected: classes.len(),
            got: anchor + 1,
        });
    }
    for (i, c) in classes.iter().enumerate() {
        if c.delta <= 0.0 {
            return Err(AnalyticsError::NoSolution {
                class: i,
                target: f64::NAN,
            });
        }
    }
    let target = curve_value(anchor_n, &classes[anchor])?;

    let mut codes = Vec::with_capacity(classes.len());
    for (j, c) in classes.iter().enumerate() {
        if j == anchor {
            codes.push(anchor_n);
            continue;
        }
        let g = |n: f64| curve_value(n, c).map(|v| v - target).unwrap_or(f64::INFINITY);
        let floor = c.k as f64 - 1.0;
        let lo = floor + 1e-9 * floor.max(1.0);
        if g(lo) <= 0.0 {
            return Err(AnalyticsError::NoSolution { class: j, target });
        }
        let mut hi = c.k as f64;
        let mut tries = 0;
        while g(hi) > 0.0 {
            hi = floor + 2.0 * (hi - floor);
            tries += 1;
            if tries > 200 {
                return Err(AnalyticsError::NoSolution { class: j, target });
            }
        }
        let n = bisect(g, lo, hi).ok_or(AnalyticsError::NoSolution { class: j, target })?;
        codes.push(n);
    }
    Ok(CodeVector(codes))
}

fn pi_value(codes: &[f64], classes: &[ClassParams], sys: &SystemParams) -> Result<f64, AnalyticsError> {
    check_len(classes.len(), codes.len())?;
    Ok(2.0 * sys.l() / sys.beta * curve_value(codes[0], &classes[0])?)
}

/// Load `Lambda^T U` shared by every rate vector for which the good code
/// vector `codes` is optimal: `L - L / sqrt(1 + pi)`.
pub fn layer_constant(codes: &[f64], classes: &[ClassParams], sys: &SystemParams) -> Result<f64, AnalyticsError> {
    let pi = pi_value(codes, classes, sys)?;
    let l = sys.l();
    Ok(l - l / (1.0 + pi).sqrt())
}

/// Queue length on the optimal layer, `beta c^2 / (2L (L - c))`.
pub fn optimal_queue_length(codes: &[f64], classes: &[ClassParams], sys: &SystemParams) -> Result<f64, AnalyticsError> {
    let c = layer_constant(codes, classes, sys)?;
    let l = sys.l();
    Ok(sys.beta * c * c / (2.0 * l * (l - c)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stationarity {
    pub gradient: Vec<f64>,
    pub max_abs_gradient: f64,
    pub total_delay: f64,
}

impl Stationarity {
    pub fn relative(&self) -> f64 {
        self.max_abs_gradient / self.total_delay
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient of [`multiclass_total_delay`] with
/// respect to each code length.
pub fn verify_stationarity(
    codes: &[f64],
    rates: &RateVector,
    classes: &[ClassParams],
    sys: &SystemParams,
) -> Result<Stationarity, AnalyticsError> {
    let total_delay = multiclass_total_delay(codes, rates, classes, sys)?;
    let mut gradient = Vec::with_capacity(codes.len());
    let mut probe = codes.to_vec();
    for i in 0..codes.len() {
        probe[i] = codes[i] + FD_STEP;
        let up = multiclass_total_delay(&probe, rates, classes, sys)?;
        probe[i] = codes[i] - FD_STEP;
        let down = multiclass_total_delay(&probe, rates, classes, sys)?;
        probe[i] = codes[i];
        gradient.push((up - down) / (2.0 * FD_STEP));
    }
    let max_abs_gradient = gradient.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    Ok(Stationarity {
        gradient,
        max_abs_gradient,
        total_delay,
    })
}

/// Rounds a relaxed code vector to integers in `[k_i, n_max_i]`. Each class
/// independently takes the floor or ceiling, whichever gives the lower
/// estimated total delay with the other classes at their relaxed lengths.
pub fn round_code_vector(
    codes: &[f64],
    rates: &RateVector,
    classes: &[ClassParams],
    sys: &SystemParams,
) -> Result<Vec<u32>, AnalyticsError> {
    check_len(classes.len(), codes.len())?;
    let mut out = Vec::with_capacity(codes.len());
    let mut probe = codes.to_vec();
    for (i, c) in classes.iter().enumerate() {
        check_relaxed(codes[i], c.k)?;
        let lo = (codes[i].floor() as u32).clamp(c.k, c.n_max);
        let hi = (codes[i].ceil() as u32).clamp(c.k, c.n_max);
        let mut cost = |n: u32| {
            probe[i] = n as f64;
            multiclass_total_delay(&probe, rates, classes, sys).unwrap_or(f64::INFINITY)
        };
        let pick = if hi != lo && cost(hi) < cost(lo) { hi } else { lo };
        probe[i] = codes[i];
        out.push(pick);
    }
    Ok(out)
}
