//! Sketch-to-face synthesis: sketch synthesis and deformation, spatial
//! attention pooling, dual generators with a multi-scale discriminator, the
//! staged training loop, and evaluation metrics.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod evaluator;
pub mod gradcheck;
pub mod losses;
pub mod networks;
pub mod nn;
pub mod optim;
pub mod sap;
pub mod seed;
pub mod sketch;
pub mod trainer;

pub use error::{Error, Result};
