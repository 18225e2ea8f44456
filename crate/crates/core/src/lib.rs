//! Contrastive self-supervised and semi-supervised representation learning
//! for multichannel time series.

pub mod augment;
pub mod data;
pub mod error;
pub mod losses;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
