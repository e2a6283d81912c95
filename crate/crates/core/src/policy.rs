//! Optimal band policy and value function of the two-sided problem.
//!
//! The solution is the auxiliary value function shifted left by `S*`, where
//! `S*` makes the area between `-c+` and `H*` over `[S*, A-bar]` equal the
//! fixed call cost. No such shift exists once `K+ >= K+bar`; the policy then
//! degenerates to refund-only with ruin at zero.

use serde::{Deserialize, Serialize};

use crate::auxiliary::{AuxSolution, ValueEval};
use crate::error::{Error, Result};
use crate::model::{DerivedConstants, ModelParams};
use crate::roots::{bisect, EPS_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Calls at zero up to `A`, refunds at `b` down to `B`.
    BandFull,
    /// Refunds only; reaching zero is ruin.
    DividendOnly,
}

/// Band `(a, A; B, b)` with the retention switching point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPolicy {
    pub regime: Regime,
    /// Lower trigger `a`; always zero for the optimal policy.
    #[serde(rename = "a")]
    pub lower_trigger: f64,
    /// Call target `A` (zero when refund-only).
    #[serde(rename = "A")]
    pub call_target: f64,
    /// Refund target `B`.
    #[serde(rename = "B")]
    pub refund_target: f64,
    /// Refund trigger `b`.
    #[serde(rename = "b")]
    pub refund_trigger: f64,
    #[serde(rename = "S_star")]
    pub shift: f64,
    /// Retention is full (`u = 1`) above this level.
    pub x0: f64,
}

impl BandPolicy {
    /// Feedback retention `min((x + S*) / x~0, 1)`, with `x~0 = x0 + S*`.
    pub fn rate_control(&self, x: f64) -> f64 {
        let x_tilde0 = self.x0 + self.shift;
        ((x + self.shift) / x_tilde0).clamp(0.0, 1.0)
    }

    /// Checks `0 <= A`, `0 <= B < b` and `A < b` for a user-supplied band.
    pub fn check_admissible(&self) -> Result<()> {
        let ok_num = [self.call_target, self.refund_target, self.refund_trigger, self.x0, self.shift]
            .iter()
            .all(|v| v.is_finite());
        if !ok_num {
            return Err(Error::InadmissiblePolicy("non-finite band parameter".into()));
        }
        if self.lower_trigger != 0.0 {
            return Err(Error::InadmissiblePolicy(format!(
                "lower trigger must be 0, got {}",
                self.lower_trigger
            )));
        }
        if self.call_target < 0.0 || self.refund_target < 0.0 {
            return Err(Error::InadmissiblePolicy(format!(
                "targets must be non-negative (A = {}, B = {})",
                self.call_target, self.refund_target
            )));
        }
        if self.refund_target >= self.refund_trigger || self.call_target >= self.refund_trigger {
            return Err(Error::InadmissiblePolicy(format!(
                "need A < b and B < b (A = {}, B = {}, b = {})",
                self.call_target, self.refund_target, self.refund_trigger
            )));
        }
        if self.regime == Regime::BandFull && self.call_target <= 0.0 {
            return Err(Error::InadmissiblePolicy("call target must be positive".into()));
        }
        if !(self.x0 + self.shift > 0.0) {
            return Err(Error::InadmissiblePolicy("switching level must be positive".into()));
        }
        Ok(())
    }
}

/// `J(S) = int_S^A-bar (-c+ - H*) = -c+ (A-bar - S) - (v(A-bar) - v(S))`.
pub fn curvilinear_j(shift: f64, aux: &AuxSolution) -> Result<f64> {
    let a_bar = aux.call_target;
    if !(0.0..=a_bar).contains(&shift) {
        return Err(Error::Domain {
            what: "J(S)",
            x: shift,
        });
    }
    let c_plus = aux.params.c_plus();
    Ok(-c_plus * (a_bar - shift) - (aux.v(a_bar) - aux.v(shift)))
}

/// Shift `S*` with `J(S*) = K+`, or `None` when `K+ >= K+bar`.
///
/// Only `k_plus` is read from `p`; everything else comes from `aux`.
pub fn solve_s_star(p: &ModelParams, aux: &AuxSolution) -> Result<Option<f64>> {
    let k_plus = p.k_plus();
    if k_plus >= aux.k_plus_bar {
        return Ok(None);
    }
    let f = |s: f64| curvilinear_j(s, aux).unwrap_or(f64::NAN) - k_plus;
    if f(EPS_FLOOR) <= 0.0 {
        return Ok(Some(0.0));
    }
    let s = bisect("S*", f, EPS_FLOOR, aux.call_target)?;
    if (f(s)).abs() > 1e-9 * k_plus.max(1.0) {
        return Err(Error::ConvergenceFailure {
            what: "S* certificate",
            iterations: crate::roots::MAX_ITER,
            lo: 0.0,
            hi: aux.call_target,
        });
    }
    Ok(Some(s))
}

/// Optimal policy together with its value function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub params: ModelParams,
    pub aux: AuxSolution,
    pub policy: BandPolicy,
    /// Set when `K+` equals the threshold and both regimes are optimal.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

/// Assembles the band and the shifted value function for the fixed call
/// cost in `p` (the auxiliary solution must come from the same remaining
/// parameters).
pub fn build_policy(p: &ModelParams, aux: &AuxSolution) -> Result<(BandPolicy, ValueFunction)> {
    let x_tilde0 = aux.constants().x_tilde0;
    let s_star = solve_s_star(p, aux)?;
    let policy = match s_star {
        Some(s) => BandPolicy {
            regime: Regime::BandFull,
            lower_trigger: 0.0,
            call_target: aux.call_target - s,
            refund_target: aux.refund_target - s,
            refund_trigger: aux.refund_trigger - s,
            shift: s,
            x0: x_tilde0 - s,
        },
        None => BandPolicy {
            regime: Regime::DividendOnly,
            lower_trigger: 0.0,
            call_target: 0.0,
            refund_target: aux.refund_target,
            refund_trigger: aux.refund_trigger,
            shift: 0.0,
            x0: x_tilde0,
        },
    };
    let note = (p.k_plus() == aux.k_plus_bar).then(|| {
        "K+ equals the threshold: the band (0, A-bar; B-bar, b-bar) with zero shift is equally optimal"
            .to_string()
    });
    let vf = ValueFunction {
        params: *p,
        aux: *aux,
        policy,
        note,
    };
    Ok((policy, vf))
}

impl ValueFunction {
    pub fn solve(p: &ModelParams) -> Result<Self> {
        let aux = AuxSolution::solve(p)?;
        Ok(build_policy(p, &aux)?.1)
    }

    pub fn shift(&self) -> f64 {
        self.policy.shift
    }

    /// `V(x) = v(x + S*)`, linear with slope `-c-` from the refund trigger on.
    pub fn eval(&self, x: f64) -> Result<ValueEval> {
        if !(x >= 0.0) {
            return Err(Error::Domain { what: "V", x });
        }
        self.aux.v_eval(x + self.shift())
    }

    pub fn value(&self, x: f64) -> f64 {
        self.eval(x).map(|e| e.value).unwrap_or(f64::NAN)
    }

    /// Optimal retention fraction.
    pub fn feedback_u(&self, x: f64) -> f64 {
        feedback_u(x, self)
    }

    /// Point where `V' = -c+`, the minimiser of `V(y) + c+ y`. Equals the
    /// call target when calls are used and `A-bar` otherwise.
    pub fn call_argmin(&self) -> f64 {
        self.aux.call_target - self.shift()
    }
}

/// Free-function form of [`ValueFunction::eval`].
pub fn v_eval(x: f64, vf: &ValueFunction) -> Result<ValueEval> {
    vf.eval(x)
}

/// `u*(x) = min((x + S*) / x~0, 1)`; equals `-mu V' / (sigma^2 V'')` below `x0`.
pub fn feedback_u(x: f64, vf: &ValueFunction) -> f64 {
    let x_tilde0 = vf.aux.constants().x_tilde0;
    ((x.max(0.0) + vf.shift()) / x_tilde0).min(1.0)
}

/// Coefficients of the two general ODE solutions
/// `V1 = -C1 (x + C2)^gamma` and `V2 = C3 e^{rho1 (x - x0)} + C4 e^{-rho2 (x - x0)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassicalConstants {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    pub x0: f64,
    pub gamma: f64,
    pub rho1: f64,
    pub rho2: f64,
}

impl ClassicalConstants {
    pub fn v1(&self, x: f64) -> f64 {
        -self.c1 * (x + self.c2).powf(self.gamma)
    }

    pub fn v2(&self, x: f64) -> f64 {
        let d = x - self.x0;
        self.c3 * (self.rho1 * d).exp() + self.c4 * (-self.rho2 * d).exp()
    }
}

pub fn export_classical_constants(vf: &ValueFunction) -> ClassicalConstants {
    let c = vf.aux.constants();
    let m = vf.aux.m_star;
    ClassicalConstants {
        c1: m,
        c2: vf.shift(),
        c3: -m * vf.aux.h.a1,
        c4: -m * vf.aux.h.a2,
        x0: vf.policy.x0,
        gamma: c.gamma,
        rho1: c.rho1,
        rho2: c.rho2,
    }
}

/// Serializable description of a solved policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDocument {
    pub params: ModelParams,
    #[serde(flatten)]
    pub policy: BandPolicy,
    #[serde(rename = "M_star")]
    pub m_star: f64,
    #[serde(rename = "K_plus_bar")]
    pub k_plus_bar: f64,
    #[serde(rename = "A_bar")]
    pub a_bar: f64,
    #[serde(rename = "B_bar")]
    pub b_lower_bar: f64,
    #[serde(rename = "b_bar")]
    pub b_upper_bar: f64,
    pub x_bar: f64,
    pub a1: f64,
    pub a2: f64,
    pub constants: DerivedConstants,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl From<&ValueFunction> for PolicyDocument {
    fn from(vf: &ValueFunction) -> Self {
        PolicyDocument {
            params: vf.params,
            policy: vf.policy,
            m_star: vf.aux.m_star,
            k_plus_bar: vf.aux.k_plus_bar,
            a_bar: vf.aux.call_target,
            b_lower_bar: vf.aux.refund_target,
            b_upper_bar: vf.aux.refund_trigger,
            x_bar: vf.aux.x_bar,
            a1: vf.aux.h.a1,
            a2: vf.aux.h.a2,
            constants: *vf.aux.constants(),
            note: vf.note.clone(),
        }
    }
}

/// One row of a sweep over the fixed call cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k_plus: f64,
    pub regime: Regime,
    #[serde(rename = "A")]
    pub call_target: f64,
    #[serde(rename = "B")]
    pub refund_target: f64,
    #[serde(rename = "b")]
    pub refund_trigger: f64,
    #[serde(rename = "V0")]
    pub v0: f64,
    #[serde(rename = "VB")]
    pub v_refund_target: f64,
}

/// Rebuilds the policy for `points` evenly spaced call costs in
/// `[from, to]`. The auxiliary problem does not involve `K+` and is solved once.
pub fn sweep_k_plus(p: &ModelParams, from: f64, to: f64, points: usize) -> Result<Vec<SweepRow>> {
    if points < 2 || !(from > 0.0 && to > from && to.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "sweep needs 0 < from < to and at least 2 points (from = {from}, to = {to}, points = {points})"
        )));
    }
    let aux = AuxSolution::solve(p)?;
    (0..points)
        .map(|i| {
            let k = from + (to - from) * i as f64 / (points - 1) as f64;
            let q = p.with_k_plus(k)?;
            let aux = AuxSolution { params: q, ..aux };
            let (pol, vf) = build_policy(&q, &aux)?;
            Ok(SweepRow {
                k_plus: k,
                regime: pol.regime,
                call_target: pol.call_target,
                refund_target: pol.refund_target,
                refund_trigger: pol.refund_trigger,
                v0: vf.value(0.0),
                v_refund_target: vf.value(pol.refund_target),
            })
        })
        .collect()
}

/// Indices `i` where the regime differs between rows `i` and `i + 1`.
pub fn regime_transitions(rows: &[SweepRow]) -> Vec<usize> {
    rows.windows(2)
        .enumerate()
        .filter(|(_, w)| w[0].regime != w[1].regime)
        .map(|(i, _)| i)
        .collect()
}
