pub mod autograd;
pub mod conditioning;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod params;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use autograd::{Graph, Var};
pub use config::RunConfig;
pub use data::{Batch, Corpus, Tokenizer, TokenizerMode};
pub use error::{Error, Result};
pub use model::{LoopedModel, ModelConfig, TokenBatch, Variant};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
pub use training::{EeMode, TrainConfig};
pub use trajectory::{ScheduleGrid, Trajectory};
