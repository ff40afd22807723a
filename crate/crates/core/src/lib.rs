//! Desk-scale laboratory for studying why prompt tuning a frozen text encoder
//! resists label noise.
//!
//! The crate builds a synthetic "pre-trained" world (a small frozen encoder,
//! class vocabulary and a recoverable ground-truth prompt), corrupts few-shot
//! labels, trains several adaptation strategies with momentum SGD and measures
//! accuracy, gradient suppression and pseudo-labeling behaviour.

// NaN-rejecting guards are written as negated comparisons on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod instrumentation;
pub mod losses;
pub mod methods;
pub mod numeric;
pub mod upl;
pub mod world;

pub use error::{Error, Result};
