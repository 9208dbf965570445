//! Voxel SIMP topology optimization, process instrumentation, and a
//! convolutional encoder-decoder that predicts converged designs from early
//! iterates.

pub mod dataset;
pub mod domain;
pub mod error;
pub mod fea;
pub mod field;
pub mod filter;
pub mod eval;
pub mod io;
pub mod net;
pub mod process;
pub mod sampler;
pub mod simp;

pub use error::{Error, Result};
