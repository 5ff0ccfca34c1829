//! Supervised and self-supervised pretraining pipelines for 2D medical image
//! segmentation, with an experiment harness measuring downstream convergence
//! speed and data efficiency.

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod byol;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pipeline;
pub mod seeding;
pub mod seg;
pub mod tensor;

pub use error::{Error, Result};
