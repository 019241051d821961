//! Embedding datasets, the synthetic benchmark and episode sampling.

mod dataset;
mod episode;
pub mod io;
mod synthetic;

pub use dataset::EmbeddingDataset;
pub use episode::{sample_episode, Episode};
pub use io::{load_embeddings, save_embeddings};
pub use synthetic::{class_mean, generate_synthetic, synthetic_split, SyntheticConfig};
