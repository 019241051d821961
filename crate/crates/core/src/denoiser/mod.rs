//! Transformer denoiser over class prototypes.
//!
//! Input tokens are `[N noised updates][N conditioning rows][1 timestep]`,
//! each projected to the model width with its own position slot. The output
//! is read from the first `N` slots through a linear head that starts at
//! zero, so a fresh model leaves the vanilla prototypes untouched.

mod checkpoint;
mod config;
mod model;
mod time;

pub use checkpoint::{
    decode_tensors, encode_tensors, load_tensors, pack_limbs, save_tensors, unpack_limbs, CLASS_IDS, MAGIC, VERSION,
};
pub use config::{CondMode, DenoiserConfig};
pub use model::{Conditioning, DenoiserModel, EpisodeDenoiser, TokenSequence};
pub use time::{encode_time, n_freq};
