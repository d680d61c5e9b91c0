pub mod attack;
pub mod autodiff;
pub mod defense;
pub mod error;
pub mod fl_sim;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod par;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
