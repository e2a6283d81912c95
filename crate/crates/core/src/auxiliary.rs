//! Refund-only auxiliary problem.
//!
//! The derivative of the auxiliary value function is a scaled copy of a
//! concave profile `H`, built from a power law on `(0, x~0]` and a pair of
//! exponentials on `[x~0, inf)`, pasted `C^1` at the switching point. The
//! scale `M*` is fixed by requiring the area between `M H` and the line
//! `-c-` to equal the fixed refund cost; its crossings are the refund
//! target and trigger. Every integral below is taken in closed form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{derive_constants, DerivedConstants, ModelParams};
use crate::roots::{bisect, EPS_FLOOR};

#[inline]
fn powf_guarded(x: f64, p: f64) -> f64 {
    (p * x.ln()).exp()
}

/// Value and first two derivatives of a function at a point.
///
/// `one_sided` marks a kink where the second derivative is the left limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEval {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub one_sided: bool,
}

/// `H`, `H'` and the antiderivative `F` with `F(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HValue {
    pub h: f64,
    pub dh: f64,
    pub antiderivative: f64,
}

/// Solves the `C^1` pasting conditions for the exponential coefficients.
///
/// Conditions are the value and slope of `H` at `x~0`:
/// `-a1 rho1 + a2 rho2 = -gamma x~0^(gamma-1)` and
/// `-a1 rho1^2 - a2 rho2^2 = -gamma (gamma-1) x~0^(gamma-2)`.
pub fn smooth_paste_coeffs(c: &DerivedConstants) -> Result<(f64, f64)> {
    let (g, x0, r1, r2) = (c.gamma, c.x_tilde0, c.rho1, c.rho2);
    let rhs1 = -g * powf_guarded(x0, g - 1.0);
    let rhs2 = -g * (g - 1.0) * powf_guarded(x0, g - 2.0);
    // [-r1, r2; -r1^2, -r2^2] (a1, a2)^T = (rhs1, rhs2)^T
    let det = r1 * r2 * r2 + r2 * r1 * r1;
    if !(det.is_finite() && det.abs() > f64::MIN_POSITIVE) {
        return Err(Error::SingularSystem { det });
    }
    let a1 = (rhs1 * (-r2 * r2) - r2 * rhs2) / det;
    let a2 = ((-r1) * rhs2 - (-r1 * r1) * rhs1) / det;
    Ok((a1, a2))
}

/// The unscaled derivative profile `H`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HFunction {
    pub constants: DerivedConstants,
    pub a1: f64,
    pub a2: f64,
}

impl HFunction {
    pub fn new(constants: DerivedConstants) -> Result<Self> {
        let (a1, a2) = smooth_paste_coeffs(&constants)?;
        Ok(HFunction { constants, a1, a2 })
    }

    pub fn eval(&self, x: f64) -> Result<HValue> {
        if !(x > 0.0) {
            return Err(Error::Domain { what: "H", x });
        }
        Ok(self.eval_unchecked(x))
    }

    pub(crate) fn eval_unchecked(&self, x: f64) -> HValue {
        let c = &self.constants;
        let g = c.gamma;
        if x <= c.x_tilde0 {
            let xg = powf_guarded(x, g);
            HValue {
                h: -g * xg / x,
                dh: -g * (g - 1.0) * xg / (x * x),
                antiderivative: -xg,
            }
        } else {
            let d = x - c.x_tilde0;
            let e1 = (c.rho1 * d).exp();
            let e2 = (-c.rho2 * d).exp();
            HValue {
                h: -self.a1 * c.rho1 * e1 + self.a2 * c.rho2 * e2,
                dh: -self.a1 * c.rho1 * c.rho1 * e1 - self.a2 * c.rho2 * c.rho2 * e2,
                antiderivative: -self.a1 * e1 - self.a2 * e2,
            }
        }
    }

    pub(crate) fn h(&self, x: f64) -> f64 {
        self.eval_unchecked(x).h
    }

    /// `H''`, used for the concavity checks.
    pub fn second_derivative(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain { what: "H''", x });
        }
        let c = &self.constants;
        let g = c.gamma;
        Ok(if x <= c.x_tilde0 {
            -g * (g - 1.0) * (g - 2.0) * powf_guarded(x, g - 3.0)
        } else {
            let d = x - c.x_tilde0;
            -self.a1 * c.rho1.powi(3) * (c.rho1 * d).exp()
                + self.a2 * c.rho2.powi(3) * (-c.rho2 * d).exp()
        })
    }

    /// Unique maximiser of `H`, from `H'(x) = 0` on the exponential branch.
    pub fn argmax(&self) -> f64 {
        let c = &self.constants;
        let ratio = -self.a2 * c.rho2 * c.rho2 / (self.a1 * c.rho1 * c.rho1);
        c.x_tilde0 + ratio.ln() / (c.rho1 + c.rho2)
    }

    /// Largest admissible scale: `M H` touches `-c-` only at the maximiser.
    pub fn max_scale(&self, c_minus: f64) -> f64 {
        -c_minus / self.h(self.argmax())
    }
}

/// Area between `M H` and `-c-`, with the two crossings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AreaI {
    pub value: f64,
    pub lower_crossing: f64,
    pub upper_crossing: f64,
}

/// Area `I(M)` between `M H` and the line `-c-` together with its lower and
/// upper crossings.
pub fn area_i(m: f64, h: &HFunction, c_minus: f64) -> Result<AreaI> {
    let x_bar = h.argmax();
    let m_max = h.max_scale(c_minus);
    if !(m > 0.0) || m > m_max * (1.0 + 1e-12) {
        return Err(Error::OutOfRange {
            what: "area I(M)",
            x: m,
            limit: m_max,
        });
    }
    let f = |x: f64| m * h.h(x) + c_minus;
    if f(x_bar) <= 0.0 {
        return Ok(AreaI {
            value: 0.0,
            lower_crossing: x_bar,
            upper_crossing: x_bar,
        });
    }
    let lower = bisect("lower crossing of M H = -c-", f, EPS_FLOOR, x_bar)?;
    let mut width = 1.0;
    while f(x_bar + width) >= 0.0 {
        width *= 2.0;
        if !width.is_finite() {
            return Err(Error::ConvergenceFailure {
                what: "upper crossing bracket",
                iterations: 1024,
                lo: x_bar,
                hi: width,
            });
        }
    }
    let upper = bisect("upper crossing of M H = -c-", f, x_bar, x_bar + width)?;
    let anti = |x: f64| h.eval_unchecked(x).antiderivative;
    let value = m * (anti(upper) - anti(lower)) + c_minus * (upper - lower);
    Ok(AreaI {
        value: value.max(0.0),
        lower_crossing: lower,
        upper_crossing: upper,
    })
}

/// Scale `M*` with `I(M*) = K-`, returned with its crossings.
pub fn solve_m_star(p: &ModelParams, h: &HFunction) -> Result<(f64, AreaI)> {
    let target = p.k_minus();
    let m_max = h.max_scale(p.c_minus());
    let g = |m: f64| -> f64 {
        match area_i(m, h, p.c_minus()) {
            Ok(a) => a.value - target,
            Err(_) => f64::NAN,
        }
    };
    let mut lo = 0.5 * m_max;
    let mut halvings = 0;
    while g(lo) <= 0.0 {
        lo *= 0.5;
        halvings += 1;
        if halvings > 1000 || lo < EPS_FLOOR {
            return Err(Error::ConvergenceFailure {
                what: "M* lower bracket",
                iterations: halvings,
                lo,
                hi: m_max,
            });
        }
    }
    let m_star = bisect("M*", g, lo, m_max)?;
    let area = area_i(m_star, h, p.c_minus())?;
    if (area.value - target).abs() > 1e-9 * target.max(1.0) {
        return Err(Error::ConvergenceFailure {
            what: "M* certificate",
            iterations: crate::roots::MAX_ITER,
            lo,
            hi: m_max,
        });
    }
    Ok((m_star, area))
}

/// Everything the refund-only problem produces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxSolution {
    pub params: ModelParams,
    pub h: HFunction,
    pub m_star: f64,
    pub x_bar: f64,
    /// Lower crossing of `M* H = -c-`: where a refund lands.
    pub refund_target: f64,
    /// Upper crossing: where a refund is triggered.
    pub refund_trigger: f64,
    /// Where `H* = -c+`: target of a call from zero before shifting.
    pub call_target: f64,
    /// Critical fixed call cost.
    pub k_plus_bar: f64,
}

impl AuxSolution {
    pub fn solve(p: &ModelParams) -> Result<Self> {
        let h = HFunction::new(derive_constants(p))?;
        let x_bar = h.argmax();
        let (m_star, area) = solve_m_star(p, &h)?;
        let mut s = AuxSolution {
            params: *p,
            h,
            m_star,
            x_bar,
            refund_target: area.lower_crossing,
            refund_trigger: area.upper_crossing,
            call_target: f64::NAN,
            k_plus_bar: f64::NAN,
        };
        let (a_bar, k_bar) = compute_call_threshold(p, &s)?;
        s.call_target = a_bar;
        s.k_plus_bar = k_bar;
        Ok(s)
    }

    pub fn constants(&self) -> &DerivedConstants {
        &self.h.constants
    }

    /// `H*`: `M* H` up to the refund trigger, `-c-` beyond.
    pub fn h_star(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain { what: "H*", x });
        }
        Ok(self.h_star_unchecked(x))
    }

    pub(crate) fn h_star_unchecked(&self, x: f64) -> f64 {
        if x <= self.refund_trigger {
            self.m_star * self.h.h(x)
        } else {
            -self.params.c_minus()
        }
    }

    /// Auxiliary value function `v(x) = int_0^x H*`, with `v'` and `v''`.
    pub fn v_eval(&self, x: f64) -> Result<ValueEval> {
        if !(x >= 0.0) {
            return Err(Error::Domain { what: "v", x });
        }
        let b = self.refund_trigger;
        if x == 0.0 {
            return Ok(ValueEval {
                value: 0.0,
                d1: f64::NEG_INFINITY,
                d2: f64::INFINITY,
                one_sided: true,
            });
        }
        if x <= b {
            let hv = self.h.eval_unchecked(x);
            Ok(ValueEval {
                value: self.m_star * hv.antiderivative,
                d1: self.m_star * hv.h,
                d2: self.m_star * hv.dh,
                one_sided: x == b,
            })
        } else {
            let vb = self.m_star * self.h.eval_unchecked(b).antiderivative;
            Ok(ValueEval {
                value: vb - self.params.c_minus() * (x - b),
                d1: -self.params.c_minus(),
                d2: 0.0,
                one_sided: false,
            })
        }
    }

    pub(crate) fn v(&self, x: f64) -> f64 {
        if x <= 0.0 {
            0.0
        } else {
            self.v_eval(x).map(|e| e.value).unwrap_or(f64::NAN)
        }
    }
}

/// Call target `A-bar` (where `H* = -c+`) and threshold
/// `K+bar = int_0^A-bar (-c+ - H*) = -c+ A-bar - v(A-bar)`.
pub fn compute_call_threshold(p: &ModelParams, s: &AuxSolution) -> Result<(f64, f64)> {
    let c_plus = p.c_plus();
    let a_bar = bisect(
        "call target",
        |x| s.h_star_unchecked(x) + c_plus,
        EPS_FLOOR,
        s.x_bar,
    )?;
    let k_bar = -c_plus * a_bar - s.v(a_bar);
    if !(k_bar.is_finite() && k_bar > 0.0) {
        return Err(Error::ConvergenceFailure {
            what: "call threshold",
            iterations: 0,
            lo: 0.0,
            hi: a_bar,
        });
    }
    Ok((a_bar, k_bar))
}

#[cfg(test)]
#[allow(clippy::excessive_precision)]
mod tests {
    use super::*;

    fn canonical() -> ModelParams {
        ModelParams::new(1.0, 1.0, 0.5, 1.1, 0.9, 0.3, 0.1).unwrap()
    }

    // Reference values computed at 40 digits with an independent
    // arbitrary-precision script (bisection on the same defining equations).
    const X_BAR: f64 = 1.123225240140230513;
    const H_X_BAR: f64 = -0.536212232491603163;
    const M_STAR: f64 = 1.438995344997449621;
    const B_BAR: f64 = 0.643060231320790793;
    const SMALL_B_BAR: f64 = 1.820074826178292155;
    const A_BAR: f64 = 0.427832149364530797;
    const K_PLUS_BAR: f64 = 0.470615364300983877;

    #[test]
    fn canonical_pasting_coefficients() {
        let h = HFunction::new(canonical().derived()).unwrap();
        let s2 = 2f64.sqrt();
        assert!((h.a1 - (2.0 + s2) / 4.0).abs() < 1e-14);
        assert!((h.a2 - (s2 - 2.0) / 4.0).abs() < 1e-14);
    }

    #[test]
    fn branches_agree_at_switch_point() {
        let h = HFunction::new(canonical().derived()).unwrap();
        let c = h.constants;
        let x0 = c.x_tilde0;
        let left = -c.gamma * x0.powf(c.gamma - 1.0);
        let right = -h.a1 * c.rho1 + h.a2 * c.rho2;
        assert!((left + 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((left - right).abs() < 1e-12);
        let anti_left = -x0.powf(c.gamma);
        let anti_right = -h.a1 - h.a2;
        assert!((anti_left + 2f64.sqrt() / 2.0).abs() < 1e-12);
        assert!((anti_left - anti_right).abs() < 1e-12);
    }

    #[test]
    fn h_rejects_non_positive_argument() {
        let h = HFunction::new(canonical().derived()).unwrap();
        assert!(matches!(h.eval(0.0), Err(Error::Domain { .. })));
        assert!(matches!(h.eval(-1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn h_blows_up_like_power_at_zero() {
        let h = HFunction::new(canonical().derived()).unwrap();
        let g = h.constants.gamma;
        for &x in &[1e-4, 1e-8, 1e-12] {
            let ratio = h.eval(x).unwrap().h / x.powf(g - 1.0);
            assert!((ratio + g).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_argmax() {
        let h = HFunction::new(canonical().derived()).unwrap();
        let xb = h.argmax();
        assert!((xb - X_BAR).abs() < 1e-12);
        let hv = h.eval(xb).unwrap();
        assert!((hv.h - H_X_BAR).abs() < 1e-12);
        assert!(hv.dh.abs() < 1e-10);
        assert!(h.second_derivative(xb).unwrap() < 0.0);
    }

    #[test]
    fn area_vanishes_at_the_largest_scale() {
        let p = canonical();
        let h = HFunction::new(p.derived()).unwrap();
        let m_max = h.max_scale(p.c_minus());
        let a = area_i(m_max, &h, p.c_minus()).unwrap();
        assert!(a.value.abs() < 1e-12);
        assert!((a.lower_crossing - a.upper_crossing).abs() < 1e-5);
        assert!(matches!(
            area_i(m_max * 1.01, &h, p.c_minus()),
            Err(Error::OutOfRange { .. })
        ));
        assert!(matches!(area_i(0.0, &h, p.c_minus()), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn area_grows_without_bound_as_scale_shrinks() {
        let p = canonical();
        let h = HFunction::new(p.derived()).unwrap();
        let mut last = 0.0;
        for k in 1..8 {
            let m = 10f64.powi(-k);
            let a = area_i(m, &h, p.c_minus()).unwrap().value;
            assert!(a > last);
            last = a;
        }
        assert!(last > 10.0);
    }

    #[test]
    fn canonical_area_at_unit_scale_straddles_argmax() {
        let p = canonical();
        let h = HFunction::new(p.derived()).unwrap();
        let a = area_i(1.0, &h, p.c_minus()).unwrap();
        // lower crossing is exactly (gamma / c-)^2 on the power branch
        assert!((a.lower_crossing - (0.5f64 / 0.9).powi(2)).abs() < 1e-12);
        assert!((a.value - 0.585791200617117338).abs() < 1e-12);
        assert!(a.lower_crossing < X_BAR && X_BAR < a.upper_crossing);
    }

    #[test]
    fn canonical_solution_regression() {
        let s = AuxSolution::solve(&canonical()).unwrap();
        assert!((s.m_star - M_STAR).abs() < 1e-10);
        assert!((s.refund_target - B_BAR).abs() < 1e-10);
        assert!((s.refund_trigger - SMALL_B_BAR).abs() < 1e-10);
        assert!((s.call_target - A_BAR).abs() < 1e-10);
        assert!((s.k_plus_bar - K_PLUS_BAR).abs() < 1e-10);
    }

    #[test]
    fn h_star_hits_refund_slope_at_both_crossings() {
        let s = AuxSolution::solve(&canonical()).unwrap();
        let cm = s.params.c_minus();
        assert!((s.h_star(s.refund_trigger).unwrap() + cm).abs() < 1e-9);
        assert!((s.h_star(s.refund_trigger * 1.5).unwrap() + cm).abs() < 1e-15);
        assert!((s.h_star(s.refund_target).unwrap() + cm).abs() < 1e-9);
        assert!(s.h_star(s.x_bar).unwrap() > -cm);
        assert!(matches!(s.h_star(0.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn v_boundary_values() {
        let s = AuxSolution::solve(&canonical()).unwrap();
        assert_eq!(s.v_eval(0.0).unwrap().value, 0.0);
        let at_switch = s.v_eval(0.5).unwrap().value;
        assert!((at_switch + s.m_star * 2f64.sqrt() / 2.0).abs() < 1e-12);
        let right = s.m_star * (-s.h.a1 - s.h.a2);
        assert!((at_switch - right).abs() < 1e-12);
        assert!(matches!(s.v_eval(-1e-9), Err(Error::Domain { .. })));
        let vb = s.v_eval(s.refund_trigger).unwrap();
        assert!(vb.one_sided);
        let v_upper = s.v(s.refund_trigger);
        let v_lower = s.v(s.refund_target);
        let rhs = v_lower + s.params.k_minus()
            - s.params.c_minus() * (s.refund_trigger - s.refund_target);
        assert!((v_upper - rhs).abs() < 1e-9);
    }

    #[test]
    fn call_target_certificate() {
        let s = AuxSolution::solve(&canonical()).unwrap();
        assert!((s.h_star(s.call_target).unwrap() + s.params.c_plus()).abs() < 1e-9);
        assert!(0.0 < s.call_target && s.call_target < s.refund_target);
        assert!(s.refund_target < s.x_bar && s.x_bar < s.refund_trigger);
        assert!(s.constants().x_tilde0 < s.x_bar);
    }
}
