pub mod aggregation;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod param;
pub mod recurrent;
pub mod suite;
pub mod synth;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use param::{Module, Param};
pub use tensor::{DType, Scalar, Tensor};
