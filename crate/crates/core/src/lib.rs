pub mod ablation;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod interest;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod sequence;
pub mod tensor;
pub mod trainer;

pub use config::{ExperimentConfig, TrainConfig, Variant};
pub use corpus::PreparedCorpus;
pub use error::{Result, SigmaError};
pub use model::SigmaModel;
pub use scalar::Scalar;
pub use tensor::Matrix;
pub use trainer::Trainer;

/// Single-precision model, the default.
pub type Sigma = SigmaModel<f32>;
pub type Sigma64 = SigmaModel<f64>;
pub type SigmaTrainer = Trainer<f32>;
pub type SigmaTrainer64 = Trainer<f64>;
