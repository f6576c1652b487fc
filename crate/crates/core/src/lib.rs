//! Structure/text representation alignment for text-attributed graphs.
//!
//! Nodes carry a structural embedding and a set of token embeddings. The crate
//! measures how well text and structure agree on a graph ([`metrics`]), builds
//! cross-modal similarity matrices ([`similarity`]), couples the two modalities
//! with entropic optimal transport ([`transport`]), and trains both embedding
//! tables against transport-weighted contrastive objectives ([`losses`],
//! [`trainer`]). [`synth`] generates graphs with known ground truth.

// `!(x > 0.0)` style checks are used on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod numeric;
pub mod similarity;
pub mod synth;
pub mod trainer;
pub mod transport;

pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
