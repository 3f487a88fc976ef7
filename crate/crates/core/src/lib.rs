//! Latent-class proportional-odds item response models with L1-penalized
//! detection of uniform and non-uniform differential item functioning.

pub mod em;
pub mod error;
pub mod io;
pub mod likelihood;
pub mod model;
pub mod selection;
pub mod simulation;

pub use error::{Error, Result};
