//! Decoupled graph triple attention (DeGTA) library.
//!
//! Builds graph representations from three decoupled views — positional,
//! structural and attribute — with separate local (neighborhood) and global
//! (sampled long-range) attention channels and an adaptive integration of
//! the two. Includes the dense autograd tape the training loop runs on,
//! encoding strategies, dataset I/O, synthetic generators and the
//! interpretability export.

pub mod attention;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod encodings;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod report;
pub mod train;
pub mod verify;

pub use error::{DegtaError, Result};
