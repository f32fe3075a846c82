//! Coarse-to-fine refinement networks for dense labeling: a small tensor
//! library with reverse-mode autodiff, the LRN and G-FRNet architectures,
//! deep supervision, SGD, synthetic data, evaluation and a CLI.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod labels;
pub mod optim;
pub mod params;
pub mod rng;
pub mod supervision;
pub mod tensor;
pub mod train;

pub use arch::{ArchConfig, Mode, Model, Variant};
pub use config::RunConfig;
pub use autodiff::{GateMode, Graph, NodeId, OpKind};
pub use error::{Error, Result};
pub use labels::GroundTruth;
pub use tensor::{Real, Shape, Tensor};
