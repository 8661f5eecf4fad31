//! Data-free neural architecture search at desk scale.
//!
//! A pre-trained classifier is inverted into a labeled synthetic dataset
//! ([`synthesis`]), which then stands in for the real data in supernet,
//! differentiable and policy-gradient architecture search ([`nas`]). The
//! [`consistency`] module measures how well architecture rankings on
//! synthetic data agree with rankings on real data, and [`transfer`] distills
//! a fresh student from the synthetic set.

pub mod consistency;
pub mod data;
pub mod error;
mod kernels;
pub mod model;
pub mod nas;
pub mod optim;
pub mod par;
pub mod rng;
pub mod synthesis;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
pub use model::{ActShape, Architecture, Block, BnStats, LayerSpec, Model};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState, Param};
pub use tape::{BnMode, Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{ModelCheckpoint, TargetKind, TrainConfig};
