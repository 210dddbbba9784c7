//! A small CPU transformer runtime with head-wise KV-cache compression.
//!
//! Retrieval heads keep their whole cache; every other head keeps a few sink
//! tokens, a recent buffer and a single compensation token summarizing what
//! was dropped. The crate also carries the probe that finds retrieval heads
//! and the ALiBi vision-scope calculator.

pub mod error;
pub mod math;
pub mod embeddings;
pub mod kvcache;
pub mod identify;
pub mod rng;
pub mod model;
pub mod scope;
pub mod bench;
pub mod cli;

pub use error::{Error, Result};
