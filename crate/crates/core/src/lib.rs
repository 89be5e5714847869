//! Neural epitome search: compact weight epitomes that expand into
//! convolution and fully-connected weights through learned starting indices,
//! with a fast inference path that reuses products across overlapping
//! sub-tensors.

pub mod autograd;
pub mod bytes;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod epitome;
pub mod error;
pub mod infer;
pub mod learner;
pub mod model;
pub mod routing;
pub mod tensor;
pub mod train;

pub use error::{NesError, Result};
