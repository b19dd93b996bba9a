//! Axial Transformer: axial self-attention, an autoregressive model over
//! `H × W × C` symbol tensors built from it, maximum-likelihood training, and
//! naive and semi-parallel samplers.

pub mod attention;
pub mod audit;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod format;
pub mod layers;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod tensor;
pub mod trainer;

pub use config::{ModelConfig, RunConfig, TrainConfig};
pub use data::{DataTensor, Dataset};
pub use error::{Error, Result};
pub use model::Model;
pub use rng::Rng;
pub use tensor::Tensor;
