pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod patch_decoder;
pub mod seed;
pub mod tensor;
pub mod text_decoder;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
