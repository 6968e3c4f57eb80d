//! Few-shot adaptation of a pretrained generator by paired image
//! reconstruction: a target generator cloned from the source generator is
//! fine-tuned on a handful of images while a jointly trained translator checks
//! that every `(G_S(z), G_T(z))` pair shares its content.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
mod nn;
pub mod perceptual;
pub mod pretrain;
pub mod probe;
pub mod toy;
pub mod trainer;
pub mod translator;

pub use config::{ArchConfig, LossConfig, ReconDirection, ReconMetric, TrainingConfig};
pub use error::{PirError, Result};
pub use pir_tensor::{Float, Graph, ParamSet, Tensor};
