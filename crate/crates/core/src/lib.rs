pub mod admm;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod plot;
pub mod quantizer;
pub mod tensor;
pub mod trainer;
pub mod validation;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
