//! Convolutional networks whose kernels are switched on and off per input by
//! learned gate modules.
//!
//! Gates are trained jointly with the task under an L1 penalty, applied as
//! hard switches at inference time (optionally skipping the switched-off
//! kernels entirely), and analysed across a dataset to prune kernels that
//! never fire. See the crate README for an end-to-end walkthrough.

pub mod analysis;
pub mod autograd;
pub mod config_file;
pub mod data;
pub mod error;
pub mod lkam;
pub mod network;
pub mod ops;
pub mod pruner;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use lkam::{ExecutionMode, GateParams, GateVector, LkamModule};
pub use network::{Model, NetworkConfig};
pub use scalar::{Precision, Scalar};
pub use tensor::{Shape, Tensor};
