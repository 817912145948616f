//! Generative-prior image restoration at desk scale.
//!
//! A restoration network produces a faithful but blurry estimate, a
//! style-based encoder/generator pair synthesizes a realistic counterpart
//! from it, and a fusion network combines their features.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod degrade;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
mod nets;
pub mod restoration;
pub mod synthesis;
pub mod trainer;

pub use error::{Result, UgpError};

/// Library version, reported by the command-line tool.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
