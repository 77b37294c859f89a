//! Item co-occurrence graphs, self-supervised graph embeddings and
//! session-based recommenders that consume them.

pub mod diffcore;
pub mod bgrl;
pub mod cograph;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod knnrec;
pub mod nextitem;
pub mod pipeline;
pub mod sessiondata;
pub mod synth;

pub use error::{Error, Result};
