//! Neural-network robustness certification over axis-aligned perturbation boxes.
//!
//! * [`nn`]: ReLU networks, reverse-mode input gradients, training, JSON IO.
//! * [`attack`]: projected gradient descent counterexample search.
//! * [`verifier`]: interval and CROWN-style linear bound propagation with
//!   optimized relaxation slopes, split multipliers and branch and bound.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! usual `f64` instantiation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
mod error;
pub mod linalg;
pub mod nn;
mod scalar;
pub mod testing;
pub mod verifier;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Network64 = nn::Network<f64>;
pub type Network32 = nn::Network<f32>;
pub type Ball64 = attack::PerturbationBall<f64>;
pub type Ball32 = attack::PerturbationBall<f32>;
pub type Outcome64 = verifier::VerifyOutcome<f64>;
