pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod types;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{DatasetSpec, Sample, Split};
pub use error::{Error, Result};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use loss::LossWeights;
pub use metrics::Metrics;
pub use model::{Input, Model, ModelConfig, Prediction};
pub use prompt::{CorrelationReport, PromptBank, PromptSelection};
pub use tensor::Tensor;
pub use train::{Ablation, TrainConfig};
pub use types::{Cell, Domain, Task};
