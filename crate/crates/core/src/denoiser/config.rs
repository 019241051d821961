use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What fills the middle block of tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CondMode {
    /// The episode's vanilla prototypes.
    VanillaPrototype,
    /// One trainable vector per meta-train class.
    LearnedClassEmbedding,
    /// Zeros. The model sees nothing about the task, so it also predicts
    /// prototypes directly instead of an update to the vanilla ones.
    None,
}

impl fmt::Display for CondMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CondMode::VanillaPrototype => "vanilla",
            CondMode::LearnedClassEmbedding => "learned",
            CondMode::None => "none",
        })
    }
}

impl FromStr for CondMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" | "vanilla_prototype" => Ok(CondMode::VanillaPrototype),
            "learned" | "learned_class_embedding" => Ok(CondMode::LearnedClassEmbedding),
            "none" => Ok(CondMode::None),
            _ => Err(Error::Config(format!("unknown cond_mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub cond_mode: CondMode,
    pub proto_dim: usize,
    pub max_ways: usize,
    /// Diffusion length the time encoding is normalized by.
    pub steps: usize,
    /// Predict an update added to the vanilla prototypes (true) or the
    /// prototypes themselves (false).
    pub residual: bool,
    /// Rows of the class-embedding table (learned mode only).
    pub n_classes: usize,
    pub init_seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            mlp_hidden: 128,
            cond_mode: CondMode::VanillaPrototype,
            proto_dim: 32,
            max_ways: 5,
            steps: 100,
            residual: true,
            n_classes: 0,
            init_seed: 0,
        }
    }
}

impl DenoiserConfig {
    /// 12 layers, width 512, 16 heads, MLP 512.
    pub fn paper_scale(proto_dim: usize) -> Self {
        DenoiserConfig {
            n_layers: 12,
            d_model: 512,
            n_heads: 16,
            mlp_hidden: 512,
            proto_dim,
            ..Default::default()
        }
    }

    /// Smallest configuration used for finite-difference checks.
    pub fn tiny(proto_dim: usize, max_ways: usize) -> Self {
        DenoiserConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            mlp_hidden: 32,
            proto_dim,
            max_ways,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.proto_dim == 0 || self.max_ways == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "proto_dim, max_ways and mlp_hidden must be positive".into(),
            ));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("steps must be at least 2, got {}", self.steps)));
        }
        if self.cond_mode == CondMode::LearnedClassEmbedding && self.n_classes == 0 {
            return Err(Error::Config("learned class embeddings need n_classes > 0".into()));
        }
        Ok(())
    }

    /// Whether sampled states are updates to the vanilla prototypes.
    pub fn recombines(&self) -> bool {
        self.residual && self.cond_mode != CondMode::None
    }

    pub fn n_freq(&self) -> usize {
        super::time::n_freq(self.steps)
    }
}
