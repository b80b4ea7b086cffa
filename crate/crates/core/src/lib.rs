//! Data-driven min-max model predictive control for unknown linear systems.
//!
//! The crate builds the set of system matrices consistent with noisy
//! input-state data, solves the per-step semidefinite program for a robust
//! state-feedback gain, runs the robust and adaptive dual-mode controllers in
//! closed loop, and audits the resulting certificates.

pub mod analysis;
pub mod cli;
pub mod consistency;
pub mod controller;
pub mod error;
pub mod numerics;
pub mod plant;
pub mod sdp;

pub use error::{Error, Result};
