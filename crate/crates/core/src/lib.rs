//! Decoder-only low-rank test-time optimization for sparse-to-dense depth
//! completion, at desk scale.

pub mod alignment;
pub mod analysis;
pub mod cli;
pub mod autodiff;
pub mod error;
pub mod experiments;
pub mod io;
pub mod model;
pub mod spatial;
pub mod tensor;
pub mod theory;
pub mod tto;
pub mod world;

pub use error::{Error, Result};
