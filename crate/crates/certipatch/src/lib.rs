//! Certifiable defense against square patch adversarial attacks via
//! structured-ablation smoothing.
//!
//! A small base classifier is trained on ablated images; enumerating every
//! ablation position yields exact per-class vote counts and deterministic
//! robustness certificates. Randomized baselines and an empirical patch
//! attack cross-check the certificates.

pub mod ablation;
pub mod attack;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod model;
pub mod parallel;
pub mod randomized;
pub mod smoothing;
pub mod synth;

pub use error::{Error, Result};
