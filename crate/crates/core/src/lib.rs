//! Core of the reconstruction-and-alignment laboratory.
//!
//! Everything here is pure computation over `alloc` containers: a small
//! reverse-mode autodiff engine, the synthetic compositional world, the toy
//! dual encoders with a frozen decoder, the composite training objective,
//! the optimizer loop and the ranking metrics. File formats, the CLI and
//! experiment orchestration live in the `read-lab` companion crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod error;
pub mod eval;
pub mod losses;
pub mod models;
pub mod tensor;
pub mod train;
pub mod world;

pub use error::{Error, Result};
