pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod selftest;
pub mod spatial;
pub mod tensor;
pub mod train;

pub use error::{CsaError, Result};
pub use tensor::Tensor;
