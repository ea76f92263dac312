pub mod autodiff;
pub mod cam;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gcr;
pub mod lir;
pub mod metrics;
pub mod netpbm;
pub mod params;
pub mod synthdata;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
