//! Bracketed bisection shared by every scalar root-find in the crate.

use crate::error::{Error, Result};

/// Relative abscissa tolerance.
pub const XTOL: f64 = 1e-12;
pub const MAX_ITER: usize = 200;

/// Smallest positive lower bracket used near the `x = 0` singularity.
pub const EPS_FLOOR: f64 = 1e-300;

/// Finds a sign change of `f` in `[lo, hi]`.
///
/// When the bracket is positive and spans more than a factor of four the
/// split point is the geometric mean, so roots sitting many decades below
/// `hi` are reached in a handful of steps.
pub fn bisect<F>(what: &'static str, mut f: F, mut lo: f64, mut hi: f64) -> Result<f64>
where
    F: FnMut(f64) -> f64,
{
    let mut f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(Error::ConvergenceFailure {
            what,
            iterations: 0,
            lo,
            hi,
        });
    }
    for _ in 0..MAX_ITER {
        let mid = if lo > 0.0 && hi > 4.0 * lo {
            lo.sqrt() * hi.sqrt()
        } else {
            0.5 * (lo + hi)
        };
        if mid <= lo || mid >= hi || hi - lo <= XTOL * lo.abs().max(hi.abs()) {
            return Ok(mid.clamp(lo, hi));
        }
        let f_mid = f(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::ConvergenceFailure {
        what,
        iterations: MAX_ITER,
        lo,
        hi,
    })
}
