//! Desk-scale laboratory for confidence calibration under binary supervision.
//!
//! The crate trains a small dual-head network (class probabilities plus a
//! scalar confidence) on synthetic two-moons data under several objectives,
//! applies post-hoc calibrators, and measures calibration/diversity metrics
//! and discrete information quantities. Everything is seeded and
//! deterministic; the experiment harness regenerates result tables as CSV
//! and JSON.

pub mod data;
pub mod ensemble;
pub mod error;
pub mod harness;
pub mod info;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod posthoc;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tape::{grad_check, GradientMap, Tape, Var};
pub use tensor::Tensor;
