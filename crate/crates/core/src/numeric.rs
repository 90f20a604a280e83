//! Scalar root bracketing and bisection.

/// Bisects `f` on `[lo, hi]` where `f(lo)` and `f(hi)` have opposite signs
/// (or one is zero). Runs until the bracket stops shrinking in floating point.
pub fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> Option<f64> {
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Some(lo);
    }
    if f_hi == 0.0 {
        return Some(hi);
    }
    if f_lo.signum() == f_hi.signum() || !f_lo.is_finite() && !f_hi.is_finite() {
        return None;
    }
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Some(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    // Return the endpoint with the smaller residual.
    if f(lo).abs() <= f(hi).abs() {
        Some(lo)
    } else {
        Some(hi)
    }
}

/// Scans `[lo, hi]` on a uniform grid of `steps` cells and returns the first
/// cell whose endpoints straddle a sign change of `f`.
pub fn first_sign_change<F: Fn(f64) -> f64>(f: &F, lo: f64, hi: f64, steps: usize) -> Option<(f64, f64)> {
    let mut prev_x = lo;
    let mut prev = f(lo);
    for i in 1..=steps {
        let x = lo + (hi - lo) * i as f64 / steps as f64;
        let v = f(x);
        if prev == 0.0 {
            return Some((prev_x, prev_x));
        }
        if v == 0.0 || v.signum() != prev.signum() {
            return Some((prev_x, x));
        }
        prev_x = x;
        prev = v;
    }
    None
}
