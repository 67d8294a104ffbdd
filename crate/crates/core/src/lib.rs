pub mod config;
pub mod distill;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod task;
pub mod teacher;
pub mod tensor;
pub mod training;

pub use config::{FusionMode, ModelConfig, RunConfig, Stage, TrainConfig};
pub use error::{GladError, Result};
pub use model::Model;
pub use tensor::{Tape, Tensor, Var};
