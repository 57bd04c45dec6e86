//! Two-stage score regression on top of a denoising-diffusion-pretrained
//! transformer.
//!
//! Phase one trains a small Diffusion Transformer to predict the noise added
//! to unlabeled images. Phase two freezes it, reads a feature vector off its
//! final block, and fits a two-layer regression head. Everything, including
//! the autodiff engine, lives in this crate.

pub mod autodiff;
pub mod config;
pub mod container;
pub mod data;
pub mod diffusion;
pub mod dit;
pub mod downstream;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, Graph, Var};
pub use diffusion::{build_schedule, Denoiser, NoiseSchedule, ScheduleConfig};
pub use dit::{ConditioningVector, DiTConfig, DiTModel, Pooling};
pub use container::Container;
pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use rng::DiffusionRng;
pub use tensor::{Real, Tensor};
pub use train::{pretrain, Checkpoint, LossRecord, TrainConfig, Trainer};
