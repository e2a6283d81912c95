//! Model primitives: the reserve diffusion, discounting and intervention costs.
//!
//! The uncontrolled reserve follows `dX = mu dt + sigma dW`. A retention
//! fraction `u in [0, 1]` scales both drift and volatility. Calls for funds
//! cost `K+ + c+ xi` and refunds cost `K- - c- |xi|`, discounted at rate `r`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Flat record of the seven primitives as read from a parameter file.
///
/// Every field is mandatory; there are no defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawParams {
    pub mu: f64,
    pub sigma: f64,
    pub r: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    pub k_plus: f64,
    pub k_minus: f64,
}

/// Validated model parameters. Construct through [`ModelParams::new`] or
/// [`validate_params`]; deserialization validates as well.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams", into = "RawParams")]
pub struct ModelParams {
    mu: f64,
    sigma: f64,
    r: f64,
    c_plus: f64,
    c_minus: f64,
    k_plus: f64,
    k_minus: f64,
}

fn check(name: &'static str, value: f64, ok: bool, constraint: &'static str) -> Result<()> {
    if value.is_finite() && ok {
        Ok(())
    } else {
        Err(Error::ParamOutOfRange {
            name,
            value,
            constraint,
        })
    }
}

/// Checks the sign conventions of the cost model and returns validated parameters.
pub fn validate_params(raw: RawParams) -> Result<ModelParams> {
    check("mu", raw.mu, raw.mu > 0.0, "mu > 0")?;
    check("sigma", raw.sigma, raw.sigma > 0.0, "sigma > 0")?;
    check("r", raw.r, raw.r > 0.0, "r > 0")?;
    check("c_plus", raw.c_plus, raw.c_plus > 1.0, "c_plus > 1")?;
    check(
        "c_minus",
        raw.c_minus,
        raw.c_minus > 0.0 && raw.c_minus < 1.0,
        "0 < c_minus < 1",
    )?;
    check("k_plus", raw.k_plus, raw.k_plus > 0.0, "k_plus > 0")?;
    check("k_minus", raw.k_minus, raw.k_minus > 0.0, "k_minus > 0")?;
    Ok(ModelParams {
        mu: raw.mu,
        sigma: raw.sigma,
        r: raw.r,
        c_plus: raw.c_plus,
        c_minus: raw.c_minus,
        k_plus: raw.k_plus,
        k_minus: raw.k_minus,
    })
}

impl TryFrom<RawParams> for ModelParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        validate_params(raw)
    }
}

impl From<ModelParams> for RawParams {
    fn from(p: ModelParams) -> Self {
        RawParams {
            mu: p.mu,
            sigma: p.sigma,
            r: p.r,
            c_plus: p.c_plus,
            c_minus: p.c_minus,
            k_plus: p.k_plus,
            k_minus: p.k_minus,
        }
    }
}

impl ModelParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        mu: f64,
        sigma: f64,
        r: f64,
        c_plus: f64,
        c_minus: f64,
        k_plus: f64,
        k_minus: f64,
    ) -> Result<Self> {
        validate_params(RawParams {
            mu,
            sigma,
            r,
            c_plus,
            c_minus,
            k_plus,
            k_minus,
        })
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn sigma(&self) -> f64 {
        self.sigma
    }
    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn c_plus(&self) -> f64 {
        self.c_plus
    }
    pub fn c_minus(&self) -> f64 {
        self.c_minus
    }
    pub fn k_plus(&self) -> f64 {
        self.k_plus
    }
    pub fn k_minus(&self) -> f64 {
        self.k_minus
    }

    /// Same parameters with a different fixed call cost.
    pub fn with_k_plus(&self, k_plus: f64) -> Result<Self> {
        validate_params(RawParams {
            k_plus,
            ..RawParams::from(*self)
        })
    }

    /// Same parameters with a different fixed refund cost.
    pub fn with_k_minus(&self, k_minus: f64) -> Result<Self> {
        validate_params(RawParams {
            k_minus,
            ..RawParams::from(*self)
        })
    }

    pub fn derived(&self) -> DerivedConstants {
        derive_constants(self)
    }

    /// Intervention cost; see [`cost_g`].
    pub fn cost(&self, xi: f64) -> Result<f64> {
        cost_g(xi, self)
    }
}

/// Closed-form constants of the continuation-region ODEs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedConstants {
    /// Exponent of the power-law branch `-C (x + S)^gamma`.
    pub gamma: f64,
    /// Positive root of `sigma^2/2 rho^2 + mu rho - r = 0`.
    pub rho1: f64,
    /// Magnitude of the negative root.
    pub rho2: f64,
    /// Ratio of the two exponential coefficients forced by smooth fit at the
    /// switching point.
    pub beta: f64,
    /// Proportionality between the power and exponential coefficients.
    #[serde(rename = "lambda")]
    pub lambda_const: f64,
    /// Switching point of the rate control for the unshifted problem.
    pub x_tilde0: f64,
}

/// Computes `gamma`, `rho1`, `rho2`, `beta`, `lambda` and `x_tilde0`.
pub fn derive_constants(p: &ModelParams) -> DerivedConstants {
    let (mu, s2, r) = (p.mu, p.sigma * p.sigma, p.r);
    let disc = (mu * mu + 2.0 * r * s2).sqrt();
    let q = mu * mu / (2.0 * r * s2);
    let gamma = 1.0 / (1.0 + q);
    let one_minus_gamma = q / (1.0 + q);
    // disc - mu rewritten without cancellation
    let rho1 = 2.0 * r / (disc + mu);
    let rho2 = (disc + mu) / s2;
    let k = mu / (2.0 * r);
    let beta = (-disc / (disc + mu)) / (rho2 * k + 1.0);
    let x_tilde0 = s2 * one_minus_gamma / mu;
    let lambda_const = -(1.0 + beta) * (-gamma * x_tilde0.ln()).exp();
    DerivedConstants {
        gamma,
        rho1,
        rho2,
        beta,
        lambda_const,
        x_tilde0,
    }
}

/// Cost of an intervention of signed size `xi`.
///
/// `xi > 0` is a call for funds, `xi < 0` a refund. Refunds can have negative
/// cost (a net inflow to the members). `xi = 0` is not an intervention.
pub fn cost_g(xi: f64, p: &ModelParams) -> Result<f64> {
    if xi > 0.0 {
        Ok(p.k_plus + p.c_plus * xi)
    } else if xi < 0.0 {
        Ok(p.k_minus - p.c_minus * (-xi))
    } else {
        Err(Error::ZeroJump)
    }
}
