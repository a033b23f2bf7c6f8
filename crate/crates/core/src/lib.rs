//! Interactive token-based world model on a synthetic tile world.
//!
//! Frames are tokenized by a k-means patch codec, actions by a fixed
//! 11-token codec, and a decoder-only transformer learns the interleaved
//! stream. Frames can be generated in raster order or one anti-diagonal
//! wavefront at a time.

pub mod action_codec;
pub mod decoding;
pub mod error;
pub mod eval;
pub mod gridcraft;
pub mod harness;
pub mod model;
pub mod sequence;
pub mod visual_codec;

pub use error::{Error, Result};
