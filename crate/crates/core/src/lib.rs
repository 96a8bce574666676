//! Multi-branch vision transformer with branch joining and structural
//! re-parameterization into a single-branch deployment model.

pub mod analysis;
pub mod autograd;
pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod reparam;
pub mod schedule;
pub mod tensor;
pub mod train;
pub mod vit;

pub use error::{Error, Result};
pub use tensor::Tensor;
