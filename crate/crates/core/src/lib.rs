//! Gated speculative sampling between an on-device draft policy and a
//! server-side target policy over residual-quantized discrete actions.
//!
//! The device drafts every action. A deviation gate compares the drafted
//! action with an exponential moving average of executed actions and only
//! sends the draft for server verification when the normalized deviation
//! exceeds a calibrated threshold.

pub mod calibrate;
pub mod env;
pub mod error;
pub mod gate;
pub mod harness;
pub mod policy;
pub mod proto;
pub mod quantizer;
pub mod rng;
pub mod specsamp;

pub use error::{Error, Result};
