//! Compact crowd-counting CNN: density-map ground truth from head
//! annotations, a small three-branch network trained with a Euclidean
//! density loss, MAE/MSE evaluation and an inference benchmark.

pub mod adam;
pub mod bench;
pub mod conv;
pub mod data;
pub mod density;
pub mod error;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
