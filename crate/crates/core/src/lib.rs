//! PPO with programmed rewards for small autoregressive token policies.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64` for
//! finite-difference checks); the aliases below fix the training precision.

pub mod arithmetic;
pub mod env;
pub mod error;
pub mod experiment;
pub mod game;
pub mod gradcheck;
pub mod params;
pub mod policy;
pub mod ppo;
pub mod scalar;
pub mod stats;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{AdamConfig, ParamId, ParameterStore};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tape32 = Tape<f32>;
pub type ParameterStore32 = ParameterStore<f32>;
pub type Transformer32 = policy::TransformerPolicy<f32>;
pub type Transformer64 = policy::TransformerPolicy<f64>;
