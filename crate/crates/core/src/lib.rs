//! Optimal band control of a mutual reserve with proportional reinsurance.
//!
//! The reserve follows a controlled diffusion: a retention fraction `u`
//! scales drift and volatility, calls for funds raise the reserve at a cost
//! `K+ + c+ xi` and refunds lower it at a cost `K- - c- |xi|`. The optimal
//! policy is a band `(0, A; B, b)` plus a feedback retention rule, or a
//! refund-only band `(0, 0; B, b)` with ruin at zero once the fixed call cost
//! exceeds a finite threshold.
//!
//! - [`model`]: parameters, closed-form constants, intervention cost.
//! - [`auxiliary`]: the refund-only problem that generates the solution.
//! - [`policy`]: the shifted construction, band policy and value function.
//! - [`qvi`]: pointwise certification of the quasi-variational inequalities.
//! - [`simulate`]: Monte Carlo of the controlled reserve.
//! - [`fd_oracle`]: an independent finite-difference solver.

// `!(x > 0.0)` is used on purpose so NaN lands in the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auxiliary;
pub mod error;
pub mod fd_oracle;
pub mod model;
pub mod policy;
pub mod qvi;
pub mod roots;
pub mod simulate;

pub use error::{Error, Result};
