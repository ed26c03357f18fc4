//! Multi-kernel and stacked max pooling inside a small trainable CNN stack
//! for crowd density estimation.

pub mod bench;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod networks;
pub mod pooling;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use pooling::{PoolSpec, PoolVariant};
pub use tensor::{DType, Element, Gradients, Tensor};
