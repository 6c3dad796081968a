//! Synchronization-phase models for two-pass (plug-and-play) quantum key
//! distribution links.
//!
//! The crate covers the physical layer of the calibration stage only:
//!
//! * [`units`]: constants, dB arithmetic, photon energy and round-trip timing.
//! * [`link_budget`]: mean photons per synchronization pulse versus fiber length.
//! * [`detector`]: a gated Geiger-mode avalanche photodiode.
//! * [`sync_scan`]: Monte-Carlo simulation of the sequential interval scan.
//! * [`analytics`]: closed-form detection and false-detection probabilities.
//! * [`attack`]: in-line couplers, attacker timing and interference scenarios.
//! * [`presets`]: named configurations with the published hardware constants.
//! * [`validate`]: the self-check suite behind `qkdsync validate`.
//!
//! Everything random takes an explicit seed; there is no global state.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod attack;
pub mod detector;
pub mod error;
pub mod link_budget;
pub mod presets;
pub mod stats;
pub mod sync_scan;
pub mod units;
pub mod validate;

pub use error::{Error, Result};
