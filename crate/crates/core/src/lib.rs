//! Occlusion-robust metric embeddings.
//!
//! A small convolutional backbone feeds two branches: global average
//! pooling, and a row-pooled sequence encoded by an LSTM. The fused
//! embedding is trained with softmax cross-entropy plus an adaptive
//! nearest-neighbour hinge whose neighbourhood size grows with the
//! anchor's classification entropy.

pub mod data;
pub mod diffcore;
pub mod encoder;
pub mod engine;
pub mod error;
pub mod eval;
pub mod losses;
pub mod seeding;

pub use error::{Error, Result};
