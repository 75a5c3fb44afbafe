pub mod autograd;
pub mod checkpoint;
pub mod damsm;
pub mod discriminator;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod losses;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod scene;
pub mod text;
pub mod tensor;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use autograd::{Grads, Graph, Var};
pub use error::{DtcError, Result};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use trainer::TrainConfig;

pub type Tensor32 = Tensor<f32>;
pub type Model32 = model::Model<f32>;
pub type GanTrainer32 = trainer::GanTrainer<f32>;
pub type MetricsReport = evaluator::MetricsReport;
