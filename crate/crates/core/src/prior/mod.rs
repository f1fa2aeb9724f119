//! Denoisers implementing the [`Denoiser`](crate::diffusion::Denoiser) contract.

mod analytic;
mod checkpoint;
mod toy;
mod train;

pub use analytic::{analytic_predict, AnalyticGaussianDenoiser};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC};
pub use toy::{Tensor, ToyArchitecture, ToyDenoiser};
pub use train::{train_toy_denoiser, TrainConfig, TrainReport, ValidationSet};
