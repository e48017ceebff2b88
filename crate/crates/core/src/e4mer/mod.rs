//! The E4mer encoder with a small reverse-mode autodiff engine underneath.

pub mod checkpoint;
pub mod config;
pub mod graph;
pub mod model;
pub mod tensor;

pub use config::{E4merConfig, HeadKind};
pub use model::{BnUpdate, E4mer, Mode, Param, ParamGroup, StepResult, Target};
pub use tensor::Tensor;
