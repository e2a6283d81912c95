//! Independent reference computations for the integration tests.
//!
//! Constants use the textbook root formulas, and areas under `H` come from
//! adaptive quadrature rather than the closed-form antiderivative. The power
//! branch is integrated after the substitution `s = t^(1/gamma)`, which
//! removes the `s^(gamma - 1)` singularity at 0.

#![allow(dead_code)]

use mutual_band::model::ModelParams;
use rand::Rng;

#[derive(Debug, Clone, Copy)]
pub struct OracleConstants {
    pub gamma: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub x_tilde0: f64,
}

pub fn oracle_constants(p: &ModelParams) -> OracleConstants {
    let (mu, s2, r) = (p.mu(), p.sigma() * p.sigma(), p.r());
    let disc = (mu * mu + 2.0 * r * s2).sqrt();
    let gamma = 1.0 / (1.0 + mu * mu / (2.0 * r * s2));
    OracleConstants {
        gamma,
        rho1: (disc - mu) / s2,
        rho2: (disc + mu) / s2,
        x_tilde0: s2 * (1.0 - gamma) / mu,
    }
}

/// `H` from its two branch formulas, with given exponential coefficients.
#[derive(Debug, Clone, Copy)]
pub struct OracleH {
    pub c: OracleConstants,
    pub a1: f64,
    pub a2: f64,
}

impl OracleH {
    pub fn power(&self, x: f64) -> f64 {
        -self.c.gamma * x.powf(self.c.gamma - 1.0)
    }

    pub fn exponential(&self, x: f64) -> f64 {
        let d = x - self.c.x_tilde0;
        -self.a1 * self.c.rho1 * (self.c.rho1 * d).exp() + self.a2 * self.c.rho2 * (-self.c.rho2 * d).exp()
    }

    pub fn eval(&self, x: f64) -> f64 {
        if x <= self.c.x_tilde0 {
            self.power(x)
        } else {
            self.exponential(x)
        }
    }

    /// `int_lo^hi H(s) ds` for `0 <= lo <= hi`.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        assert!(0.0 <= lo && lo <= hi);
        let x0 = self.c.x_tilde0;
        let g = self.c.gamma;
        let mut total = 0.0;
        if lo < x0 {
            let top = hi.min(x0);
            // s = t^(1/g): H(s) ds = H(t^(1/g)) t^(1/g - 1) / g dt
            let f = |t: f64| {
                if t <= 0.0 {
                    // limit of the transformed integrand at t = 0
                    return -1.0;
                }
                let s = t.powf(1.0 / g);
                self.power(s) * s / (g * t)
            };
            total += adaptive_simpson(&f, lo.powf(g), top.powf(g), 1e-14);
        }
        if hi > x0 {
            total += adaptive_simpson(&|s| self.exponential(s), lo.max(x0), hi, 1e-14);
        }
        total
    }
}

fn simpson_step(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
    let m = 0.5 * (a + b);
    let fm = f(m);
    (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    fa: f64,
    b: f64,
    fb: f64,
    m: f64,
    fm: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let (lm, flm, left) = simpson_step(f, a, fa, m, fm);
    let (rm, frm, right) = simpson_step(f, m, fm, b, fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1)
}

/// Adaptive Simpson with Richardson correction.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson_step(f, a, fa, b, fb);
    simpson_rec(f, a, fa, b, fb, m, fm, whole, tol, 50)
}

/// Random primitives over a range wide enough to move `gamma` across
/// `(0, 1)`; `K+` is left at 1 and set by the caller.
pub fn random_params<R: Rng>(rng: &mut R) -> ModelParams {
    let mu = rng.random_range(0.1..3.0);
    let sigma = rng.random_range(0.2..3.0);
    let r = rng.random_range(0.02..1.0);
    let c_plus = rng.random_range(1.01..2.0);
    let c_minus = rng.random_range(0.3..0.99);
    let k_minus = rng.random_range(0.01..0.5);
    ModelParams::new(mu, sigma, r, c_plus, c_minus, 1.0, k_minus).unwrap()
}
