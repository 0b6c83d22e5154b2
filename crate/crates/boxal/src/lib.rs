//! Box-level active learning for object detection.
//!
//! Annotation budgets are counted in boxes, not images: each acquisition
//! cycle scores individual candidate boxes, sends the top ones to the
//! oracle, and turns the confident remainder into soft pseudo labels so
//! that unlabelled objects are not treated as background.
//!
//! The crate has three layers:
//!
//! * scoring primitives ([`scoring`], [`acquisition`]): consistency-based
//!   box uncertainty over augmented views and the class-balanced
//!   acquisition score that exponentially down-weights over-represented
//!   classes;
//! * supervision assembly ([`pseudolabel`], [`loss`]): task-aware soft
//!   weights for pseudo-label classification and regression branches, and
//!   the weighted two-branch detection loss they plug into;
//! * an experiment harness ([`simulator`], [`interface`]): a deterministic
//!   skill-based detector surrogate that reproduces class-imbalance
//!   dynamics at desk scale, plus config/checkpoint/report plumbing and
//!   the `boxal` CLI.

pub mod acquisition;
pub mod error;
pub mod interface;
pub mod loss;
pub mod pseudolabel;
pub mod rng;
pub mod scoring;
pub mod simulator;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
