//! Hi-Mamba single-image super-resolution on the CPU.
//!
//! The network is written once against [`backend::Backend`]; [`backend::Eager`] runs
//! inference and [`grad::GradTape`] records the same graph for training.

pub mod backend;
pub mod blocks;
pub mod data;
mod error;
pub mod grad;
pub mod imaging;
pub mod network;
pub mod parallel;
pub mod scan;
pub mod serialize;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use network::{count_flops, count_params, himamba_forward, HiMambaConfig, ModelWeights};
pub use scan::DirectionOrder;
pub use tensor::Tensor;
