//! Task-guided diffusion over class prototypes for few-shot classification.
//!
//! A small transformer denoiser is meta-trained to turn the vanilla
//! (support-mean) prototypes of an episode into prototypes that fit the task
//! much more tightly. At test time a diffusion sampler starts from noise in
//! residual space and walks back to a prototype update that is added to the
//! vanilla prototypes before the usual distance-softmax classification.
//!
//! Module map:
//! - [`numerics`]: tensors, reverse-mode tape, seeded RNG
//! - [`data`]: embedding datasets, synthetic generator, episodes, file formats
//! - [`protonet`]: vanilla prototypes and the distance-softmax head
//! - [`overfit`]: per-task prototype fitting that supplies training targets
//! - [`diffusion`]: noise schedule, forward noising and samplers
//! - [`denoiser`]: the transformer and its checkpoints
//! - [`training`]: the meta-training loop
//! - [`harness`]: evaluation, baselines, ablations, reports

pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod overfit;
pub mod protonet;
pub mod training;

pub use error::{Error, FormatError, Result};
