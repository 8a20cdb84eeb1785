pub mod autograd;
pub mod container;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod prune;
pub mod scalar;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type ParamSet32 = models::ParamSet<f32>;
pub type ParamSet64 = models::ParamSet<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
