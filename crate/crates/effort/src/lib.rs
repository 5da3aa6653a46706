//! Orthogonal-subspace fine-tuning: split each weight matrix by SVD into a frozen principal
//! part and a trainable residual, regularize the residual to stay orthogonal and energy
//! preserving, and compare against LoRA and full fine-tuning on a synthetic real/fake task.

pub mod adapter;
pub mod analysis;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
