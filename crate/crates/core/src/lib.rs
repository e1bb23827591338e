//! Grouped head attention training laboratory.
//!
//! Heads of every attention layer are pushed into `C` groups during training
//! (group-constrained training driven by K-means hidden units), then a
//! frozen voting epoch keeps one representative head per group and the
//! pruned network is finetuned.

pub mod error;
pub mod grouping;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod v2s;

pub use error::{Error, Result};
