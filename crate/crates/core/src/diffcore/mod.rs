//! Reverse-mode differentiation, parameter storage, optimizers and
//! checkpoints.

pub mod checkpoint;
pub mod optim;
pub mod params;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use tape::{Matrix, Segments, Tape, Var};

#[cfg(test)]
mod tests;
