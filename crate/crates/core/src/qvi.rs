//! Pointwise certification of the quasi-variational inequalities
//!
//! ```text
//! min_u (L^u V - r V) >= 0,   M V - V >= 0,   (M V - V) * min_u (L^u V - r V) = 0
//! ```
//!
//! with `L^u V = u^2 sigma^2 V'' / 2 + u mu V'` and `M` the inf-convolution
//! with the intervention cost.

use std::io::{self, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ValueFunction;

/// Left offset used at the kinks `x0` and `b`.
pub const KINK_RADIUS: f64 = 1e-9;

/// `min_{u in [0,1]} (u^2 sigma^2 V''/2 + u mu V' - r V)` and its minimiser.
///
/// The expression is quadratic in `u`: both endpoints are candidates, and the
/// stationary point `-mu V' / (sigma^2 V'')` is one too when `V'' > 0`.
pub fn min_residual(x: f64, vf: &ValueFunction) -> Result<(f64, f64)> {
    if !(x > 0.0) {
        return Err(Error::Domain {
            what: "continuation residual",
            x,
        });
    }
    let e = vf.eval(x)?;
    let p = &vf.params;
    let (s2, mu, r) = (p.sigma() * p.sigma(), p.mu(), p.r());
    let q = |u: f64| 0.5 * u * u * s2 * e.d2 + u * mu * e.d1 - r * e.value;
    let mut best = (q(0.0), 0.0);
    let at_one = q(1.0);
    if at_one < best.0 {
        best = (at_one, 1.0);
    }
    if e.d2 > 0.0 {
        let u = -mu * e.d1 / (s2 * e.d2);
        if u > 0.0 && u < 1.0 {
            let v = q(u);
            if v < best.0 {
                best = (v, u);
            }
        }
    }
    Ok(best)
}

/// Result of the inf-convolution at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MEval {
    pub value: f64,
    /// Minimising jump. When `limiting` is set the infimum is only approached
    /// as `xi -> 0` from the side given by the sign of `xi`.
    pub xi: f64,
    pub limiting: bool,
}

/// `M V(x) = inf_{xi != 0, x + xi >= 0} [g(xi) + V(x + xi)]` from the shape of `V`.
///
/// `V(y) + c+ y` is minimised where `V' = -c+`; `V(y) + c- y` decreases up to
/// `B` and is flat past `b`.
pub fn m_operator(x: f64, vf: &ValueFunction) -> Result<MEval> {
    if !(x >= 0.0) {
        return Err(Error::Domain {
            what: "inf-convolution",
            x,
        });
    }
    let p = &vf.params;
    let y_call = vf.call_argmin();
    let call = if x < y_call {
        MEval {
            value: vf.value(y_call) + p.c_plus() * (y_call - x) + p.k_plus(),
            xi: y_call - x,
            limiting: false,
        }
    } else {
        MEval {
            value: vf.value(x) + p.k_plus(),
            xi: f64::MIN_POSITIVE,
            limiting: true,
        }
    };
    let b_target = vf.policy.refund_target;
    let refund = if x > b_target {
        MEval {
            value: vf.value(b_target) - p.c_minus() * (x - b_target) + p.k_minus(),
            xi: -(x - b_target),
            limiting: false,
        }
    } else if x > 0.0 {
        MEval {
            value: vf.value(x) + p.k_minus(),
            xi: -f64::MIN_POSITIVE,
            limiting: true,
        }
    } else {
        // no refund is admissible from an empty reserve
        MEval {
            value: f64::INFINITY,
            xi: f64::NAN,
            limiting: false,
        }
    };
    Ok(if refund.value < call.value { refund } else { call })
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (hi - lo).abs() <= 1e-13 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    let candidates = [(lo, f(lo)), (hi, f(hi)), (c, fc), (d, fd)];
    candidates
        .into_iter()
        .fold((f64::NAN, f64::INFINITY), |acc, (x, v)| if v < acc.1 { (x, v) } else { acc })
}

/// Brute-force inf-convolution: a uniform `xi` grid of `n` points over
/// `[-x, 3b]`, then golden-section refinement around the best grid point on
/// each side of zero. Independent of the structural argument in [`m_operator`].
pub fn m_operator_grid(x: f64, vf: &ValueFunction, n: usize) -> Result<MEval> {
    if !(x >= 0.0) || n < 3 {
        return Err(Error::Domain {
            what: "inf-convolution grid",
            x,
        });
    }
    let p = vf.params;
    let phi = |xi: f64| p.cost(xi).unwrap_or(f64::INFINITY) + vf.value(x + xi);
    let lo = -x;
    let hi = 3.0 * vf.policy.refund_trigger;
    let step = (hi - lo) / (n - 1) as f64;
    let tiny = 1e-13 * (1.0 + x);
    let mut best_pos: Option<(usize, f64)> = None;
    let mut best_neg: Option<(usize, f64)> = None;
    for k in 0..n {
        let xi = lo + step * k as f64;
        if xi == 0.0 {
            continue;
        }
        let v = phi(xi);
        let slot = if xi > 0.0 { &mut best_pos } else { &mut best_neg };
        if slot.is_none_or(|(_, b)| v < b) {
            *slot = Some((k, v));
        }
    }
    let mut out = MEval {
        value: f64::INFINITY,
        xi: f64::NAN,
        limiting: false,
    };
    for (slot, positive) in [(best_pos, true), (best_neg, false)] {
        let Some((k, _)) = slot else { continue };
        let left = lo + step * (k.saturating_sub(1)) as f64;
        let right = (lo + step * (k + 1) as f64).min(hi);
        let (a, b) = if positive {
            (left.max(tiny), right)
        } else {
            (left.max(lo), right.min(-tiny))
        };
        if !(a < b) {
            continue;
        }
        let (xi, v) = golden_min(phi, a, b);
        if v < out.value {
            out = MEval {
                value: v,
                xi,
                limiting: xi.abs() <= 2.0 * tiny,
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QviPoint {
    pub x: f64,
    /// `min_u (L^u V - r V)`.
    pub continuation: f64,
    pub argmin_u: f64,
    /// `M V - V`.
    pub intervention: f64,
    /// Product of the positive parts of the two residuals.
    pub tightness: f64,
    /// Evaluated one-sided from the left of `x0` or `b`.
    pub kink: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub x: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QviReport {
    pub tol: f64,
    pub pass: bool,
    /// `M V(0) - V(0)`: zero when calls are used, positive when ruin is accepted.
    pub intervention_at_zero: f64,
    pub worst_continuation: Worst,
    pub worst_intervention: Worst,
    pub worst_tightness: Worst,
    /// Largest `|min_u (L^u V - r V)|` inside the continuation region.
    pub max_abs_continuation_inside: f64,
    pub points: Vec<QviPoint>,
}

fn residual_scale(v: f64, r: f64) -> f64 {
    1f64.max((r * v).abs())
}

/// Evaluates the three conditions on `n_grid` points of `(0, 2b]`.
pub fn qvi_report(vf: &ValueFunction, n_grid: usize, tol: f64) -> Result<QviReport> {
    if n_grid < 100 {
        return Err(Error::Domain {
            what: "QVI grid size",
            x: n_grid as f64,
        });
    }
    let b = vf.policy.refund_trigger;
    let x0 = vf.policy.x0;
    let r = vf.params.r();
    let top = 2.0 * b;
    let points: Vec<QviPoint> = (1..=n_grid)
        .into_par_iter()
        .map(|i| -> Result<QviPoint> {
            let grid_x = top * i as f64 / n_grid as f64;
            let near_kink = (grid_x - b).abs() <= KINK_RADIUS || (grid_x - x0).abs() <= KINK_RADIUS;
            let x = if near_kink { grid_x - KINK_RADIUS } else { grid_x };
            let (continuation, argmin_u) = min_residual(x, vf)?;
            let intervention = m_operator(x, vf)?.value - vf.value(x);
            Ok(QviPoint {
                x,
                continuation,
                argmin_u,
                intervention,
                tightness: continuation.max(0.0) * intervention.max(0.0),
                kink: near_kink,
            })
        })
        .collect::<Result<_>>()?;

    let intervention_at_zero = m_operator(0.0, vf)?.value - vf.value(0.0);
    let mut pass = intervention_at_zero >= -tol * residual_scale(vf.value(0.0), 1.0);
    let mut worst_c = Worst { x: f64::NAN, value: f64::INFINITY };
    let mut worst_i = Worst { x: f64::NAN, value: f64::INFINITY };
    let mut worst_t = Worst { x: f64::NAN, value: f64::NEG_INFINITY };
    let mut inside = 0f64;
    for pt in &points {
        let v = vf.value(pt.x);
        let sc = residual_scale(v, r);
        let si = residual_scale(v, 1.0);
        pass &= pt.continuation >= -tol * sc;
        pass &= pt.intervention >= -tol * si;
        pass &= pt.tightness <= tol * sc * si;
        if pt.continuation < worst_c.value {
            worst_c = Worst { x: pt.x, value: pt.continuation };
        }
        if pt.intervention < worst_i.value {
            worst_i = Worst { x: pt.x, value: pt.intervention };
        }
        if pt.tightness > worst_t.value {
            worst_t = Worst { x: pt.x, value: pt.tightness };
        }
        if pt.x < b {
            inside = inside.max(pt.continuation.abs());
        }
    }
    Ok(QviReport {
        tol,
        pass,
        intervention_at_zero,
        worst_continuation: worst_c,
        worst_intervention: worst_i,
        worst_tightness: worst_t,
        max_abs_continuation_inside: inside,
        points,
    })
}

impl QviReport {
    /// One row per grid point: `x,continuation,argmin_u,intervention,tightness,kink`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "x,continuation,argmin_u,intervention,tightness,kink")?;
        for p in &self.points {
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
                p.x, p.continuation, p.argmin_u, p.intervention, p.tightness, p.kink as u8
            )?;
        }
        Ok(())
    }
}
