//! Flat `key = value` run configuration.
//!
//! A config file is a TOML document with top-level keys only. Every key has
//! a default, so an empty file is a valid config; unknown keys are errors.
//! `--set key=value` overrides are applied on top, parsed as TOML values
//! and falling back to a bare string.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EvalConfig;
use crate::data::{load_embeddings, synthetic_split, EmbeddingDataset, SyntheticConfig};
use crate::denoiser::{CondMode, DenoiserConfig};
use crate::diffusion::{Aggregate, SamplerConfig, SamplerMode};
use crate::error::{Error, Result};
use crate::overfit::OverfitConfig;
use crate::protonet::Metric;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // data
    pub dim: usize,
    pub train_classes: usize,
    pub test_classes: usize,
    pub samples_per_class: usize,
    pub scale: f64,
    pub std: f64,
    pub data_seed: u64,
    /// Embedding files; when empty the synthetic split is generated.
    pub train_data: String,
    pub test_data: String,
    // episodes
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub metric: String,
    // meta-training
    pub beta: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub task_batch_size: usize,
    pub total_episodes: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub parallel: bool,
    // prototype fitting
    pub overfit_lr: f64,
    pub overfit_iters: usize,
    pub overfit_tol: f64,
    pub overfit_include_query: bool,
    // denoiser
    pub steps: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub mlp_hidden: usize,
    pub cond_mode: String,
    pub residual: bool,
    pub max_ways: usize,
    pub init_seed: u64,
    // meta-test
    pub n_tasks: usize,
    pub eval_seed: u64,
    pub sample_seed: u64,
    pub mode: String,
    pub stride: usize,
    pub mc_samples: usize,
    pub aggregate: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let syn = SyntheticConfig::default();
        let tr = TrainConfig::default();
        let den = DenoiserConfig::default();
        let ov = OverfitConfig::default();
        let ev = EvalConfig::default();
        RunConfig {
            dim: syn.dim,
            train_classes: 20,
            test_classes: 20,
            samples_per_class: syn.samples_per_class,
            scale: syn.scale,
            std: syn.std,
            data_seed: syn.seed,
            train_data: String::new(),
            test_data: String::new(),
            n_way: tr.n_way,
            k_shot: tr.k_shot,
            q_query: tr.q_query,
            metric: tr.metric.name(),
            beta: tr.beta,
            learning_rate: tr.learning_rate,
            momentum: tr.momentum,
            task_batch_size: tr.task_batch_size,
            total_episodes: tr.total_episodes,
            seed: tr.seed,
            grad_clip: tr.grad_clip.unwrap_or(0.0),
            parallel: tr.parallel,
            overfit_lr: ov.learning_rate,
            overfit_iters: ov.max_iters,
            overfit_tol: ov.loss_tolerance,
            overfit_include_query: ov.include_query,
            steps: den.steps,
            n_layers: den.n_layers,
            d_model: den.d_model,
            n_heads: den.n_heads,
            mlp_hidden: den.mlp_hidden,
            cond_mode: den.cond_mode.to_string(),
            residual: den.residual,
            max_ways: den.max_ways,
            init_seed: den.init_seed,
            n_tasks: ev.n_tasks,
            eval_seed: 1,
            sample_seed: ev.sample_seed,
            mode: ev.sampler.mode.to_string(),
            stride: ev.sampler.stride,
            mc_samples: ev.sampler.mc_samples,
            aggregate: ev.sampler.aggregate.to_string(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parses a config document and applies `key=value` overrides.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Applies one override to an existing config.
    pub fn with(&self, key: &str, value: &str) -> Result<Self> {
        Self::from_toml(&self.to_toml(), &[format!("{key}={value}")])
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config()?.validate()?;
        self.eval_config()?.sampler.validate(self.steps)?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn metric(&self) -> Result<Metric> {
        Metric::parse(&self.metric)
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        Ok(DenoiserConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            mlp_hidden: self.mlp_hidden,
            cond_mode: self.cond_mode.parse::<CondMode>()?,
            proto_dim: self.dim,
            max_ways: self.max_ways,
            steps: self.steps,
            residual: self.residual,
            n_classes: self.train_classes,
            init_seed: self.init_seed,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        Ok(TrainConfig {
            beta: self.beta,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            task_batch_size: self.task_batch_size,
            total_episodes: self.total_episodes,
            seed: self.seed,
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_query: self.q_query,
            metric: self.metric()?,
            overfit: OverfitConfig {
                learning_rate: self.overfit_lr,
                max_iters: self.overfit_iters,
                loss_tolerance: self.overfit_tol,
                include_query: self.overfit_include_query,
            },
            denoiser: self.denoiser_config()?,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            parallel: self.parallel,
            ..TrainConfig::default()
        })
    }

    pub fn sampler_config(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig {
            mode: self.mode.parse::<SamplerMode>()?,
            stride: self.stride,
            mc_samples: self.mc_samples,
            aggregate: self.aggregate.parse::<Aggregate>()?,
        })
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_query: self.q_query,
            n_tasks: self.n_tasks,
            seed: self.eval_seed,
            metric: self.metric()?,
            sampler: self.sampler_config()?,
            sample_seed: self.sample_seed,
            parallel: self.parallel,
        })
    }

    pub fn synthetic_config(&self) -> SyntheticConfig {
        SyntheticConfig {
            dim: self.dim,
            samples_per_class: self.samples_per_class,
            scale: self.scale,
            std: self.std,
            seed: self.data_seed,
            ..SyntheticConfig::default()
        }
    }

    /// Meta-train and meta-test datasets: the configured files, or the
    /// synthetic split when no files are given.
    pub fn datasets(&self) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
        match (self.train_data.is_empty(), self.test_data.is_empty()) {
            (true, true) => synthetic_split(&self.synthetic_config(), self.train_classes, self.test_classes),
            (false, false) => Ok((load_embeddings(&self.train_data)?, load_embeddings(&self.test_data)?)),
            _ => Err(Error::Config("set both train_data and test_data, or neither".into())),
        }
    }
}

/// Sidecar path holding the config a checkpoint was trained with.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(RunConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn overrides_win_and_parse_types() {
        let c = RunConfig::from_toml(
            "beta = 2.0\nmode = \"ddim\"\n",
            &["beta=0.5".into(), "cond_mode=none".into(), "stride = 5".into()],
        )
        .unwrap();
        assert_eq!(c.beta, 0.5);
        assert_eq!(c.mode, "ddim");
        assert_eq!(c.cond_mode, "none");
        assert_eq!(c.stride, 5);
        assert_eq!(c.denoiser_config().unwrap().cond_mode, CondMode::None);
    }

    #[test]
    fn bad_keys_and_values_are_rejected() {
        assert!(RunConfig::from_toml("betta = 1.0", &[]).is_err());
        assert!(RunConfig::from_toml("", &["mode=sideways".into()]).is_err());
        assert!(RunConfig::from_toml("", &["stride=1000".into()]).is_err());
        assert!(RunConfig::from_toml("", &["noequals".into()]).is_err());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = RunConfig::default();
        let h = base.hash();
        assert_eq!(h.len(), 16);
        assert_eq!(h, RunConfig::default().hash());
        for (k, v) in [
            ("beta", "1.5"),
            ("seed", "9"),
            ("mode", "ddim"),
            ("residual", "false"),
            ("train_data", "\"x\""),
        ] {
            assert_ne!(base.with(k, v).unwrap().hash(), h, "{k}");
        }
    }
}
