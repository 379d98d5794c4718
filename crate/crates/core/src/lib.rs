//! Correlation-based model fingerprinting.
//!
//! A source model and a suspect are queried on the same probe images; each
//! model's outputs are turned into a probe-by-probe correlation matrix and the
//! mean absolute difference between the two matrices decides whether the
//! suspect was derived from the source.

mod binfmt;
pub mod cli;
pub mod correlation;
pub mod digest;
pub mod error;
pub mod fri;
pub mod metrics;
pub mod pipeline;
pub mod probekit;
pub mod verdict;
pub mod zoo;

pub use digest::Digest;
pub use error::{Error, Result};
