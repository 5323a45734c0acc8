pub mod dataset;
pub mod edf;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{BatchNormConfig, Gradients, Graph, Mode, PoolMode, RunningStats, Var};
pub use tensor::{Real, Shape, Tensor};
