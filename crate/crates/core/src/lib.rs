//! Convergent graph solvers.
//!
//! A graph network encodes an input graph into per-head transition weights
//! and biases that define contracting linear maps on node states. The unique
//! fixed points of those maps are computed by LU or by iteration, decoded
//! into node predictions, and differentiated implicitly for training.

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod problems;
pub mod rng;
pub mod solver;
pub mod tensor;
pub mod train;

pub use error::{CgsError, Result};
pub use tensor::Tensor;
