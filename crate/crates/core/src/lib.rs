//! Adaptive compression-based lifelong learning.
//!
//! A single network learns a sequence of classification tasks. After each
//! task the pruning rate is chosen by minimizing the retained weight count
//! subject to a bounded increase in validation risk; the constrained problem
//! is relaxed with a Lagrange multiplier, each relaxed subproblem is solved by
//! Gaussian-process Bayesian optimization, and the multiplier is found by
//! bisection. Evaluations are cached and re-weighted across multipliers.
//! Retained weights are frozen and owned by their task, so earlier tasks are
//! never disturbed by later training.

pub mod boopt;
pub mod compressor;
pub mod config;
pub mod datagen;
pub mod dual;
pub mod error;
pub mod lifelong;
pub mod net;
pub mod risk;
pub mod surrogate;
pub mod taskmask;

/// One-based task identifier. `0` is reserved for "unowned" in ownership maps.
pub type TaskId = u32;

pub use error::{AcllError, Result};
