use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, EmbeddingDataset, Episode};
use crate::denoiser::DenoiserModel;
use crate::diffusion::{sample_prototypes, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::numerics::derive_seed;
use crate::protonet::{classify_batch, predict, vanilla_prototypes, Metric};

/// Task stream and sampler settings of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub metric: Metric,
    pub sampler: SamplerConfig,
    /// Salt for the sampling chains. Changing it redraws the chains while
    /// keeping the task stream.
    pub sample_seed: u64,
    /// Evaluate tasks on the rayon pool. Results are keyed by task index.
    pub parallel: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_way: 5,
            k_shot: 1,
            q_query: 15,
            n_tasks: 600,
            seed: 0,
            metric: Metric::SquaredEuclidean,
            sampler: SamplerConfig::default(),
            sample_seed: 0,
            parallel: true,
        }
    }
}

/// Seed of evaluation task `index`.
pub fn task_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, index as u64)
}

/// Seed of the sampler chains of a task.
pub fn chain_seed(task_seed: u64, salt: u64) -> u64 {
    derive_seed(derive_seed(task_seed, 0xc4a1), salt)
}

/// Mean and half-width `1.96·s/√n` of the 95% interval, with `s` the
/// sample standard deviation. A single value has zero width.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_tasks: usize,
    pub per_task_accuracy: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
    pub ms_per_task: f64,
    /// Fingerprint of each task's episode, for checking pairing.
    pub fingerprints: Vec<String>,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn from_tasks(
        per_task: Vec<f64>,
        fingerprints: Vec<String>,
        ms_per_task: f64,
        config: serde_json::Value,
    ) -> Self {
        let (mean, ci95) = mean_ci95(&per_task);
        EvalReport {
            n_tasks: per_task.len(),
            per_task_accuracy: per_task,
            mean,
            ci95,
            ms_per_task,
            fingerprints,
            config,
        }
    }

    /// Checks that mean and interval follow from the per-task list.
    pub fn check_consistency(&self) -> Result<()> {
        let (mean, ci) = mean_ci95(&self.per_task_accuracy);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(1.0) || (a.is_nan() && b.is_nan());
        if self.n_tasks != self.per_task_accuracy.len() || !close(mean, self.mean) || !close(ci, self.ci95) {
            return Err(Error::InvalidArgument(format!(
                "report summary (n={}, mean={}, ci95={}) does not match its {} per-task values",
                self.n_tasks,
                self.mean,
                self.ci95,
                self.per_task_accuracy.len()
            )));
        }
        Ok(())
    }

    /// Whether this report's interval lies strictly above `other`'s.
    pub fn beats(&self, other: &EvalReport) -> bool {
        self.mean - self.ci95 > other.mean + other.ci95
    }
}

/// Runs `task` over the seeded task stream and assembles a report.
fn run_tasks<F>(ds: &EmbeddingDataset, cfg: &EvalConfig, config: serde_json::Value, task: F) -> Result<EvalReport>
where
    F: Fn(&Episode, u64) -> Result<Vec<usize>> + Sync,
{
    let one = |i: usize| -> Result<(f64, String, f64)> {
        let seed = task_seed(cfg.seed, i);
        let ep = sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, seed)?;
        let start = Instant::now();
        let predictions = task(&ep, seed)?;
        let ms = start.elapsed().as_secs_f64() * 1e3;
        // Predictions must be fixed before any query label is looked at.
        if ep.label_reads() != 0 {
            return Err(Error::InvalidArgument(format!(
                "task {i} read query labels {} times before scoring",
                ep.label_reads()
            )));
        }
        Ok((ep.score(&predictions)?, ep.fingerprint(), ms))
    };
    let results: Vec<Result<(f64, String, f64)>> = if cfg.parallel {
        (0..cfg.n_tasks).into_par_iter().map(one).collect()
    } else {
        (0..cfg.n_tasks).map(one).collect()
    };
    let mut acc = Vec::with_capacity(cfg.n_tasks);
    let mut prints = Vec::with_capacity(cfg.n_tasks);
    let mut total_ms = 0.0;
    for r in results {
        let (a, f, ms) = r?;
        acc.push(a);
        prints.push(f);
        total_ms += ms;
    }
    let ms = if cfg.n_tasks == 0 {
        0.0
    } else {
        total_ms / cfg.n_tasks as f64
    };
    Ok(EvalReport::from_tasks(acc, prints, ms, config))
}

/// Accuracy of denoised prototypes on a seeded task stream. Never fits
/// prototypes to the query set and never reads query labels before the
/// predictions are made.
pub fn meta_test(model: &DenoiserModel<f32>, ds: &EmbeddingDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let sched = NoiseSchedule::linear(model.config().steps)?;
    cfg.sampler.validate(sched.steps())?;
    let snapshot = serde_json::json!({ "eval": cfg, "denoiser": model.config() });
    run_tasks(ds, cfg, snapshot, |ep, seed| {
        let vanilla = vanilla_prototypes::<f32>(ep)?;
        let den = model.for_episode(&ep.class_ids);
        let out = sample_prototypes(
            &den,
            &vanilla,
            &sched,
            &cfg.sampler,
            chain_seed(seed, cfg.sample_seed),
            false,
        )?;
        let probs = out.class_probs(&ep.query_as::<f32>(), cfg.metric, cfg.sampler.aggregate)?;
        Ok(predict(&probs))
    })
}

/// Vanilla prototype accuracy on the same task stream as [`meta_test`].
pub fn run_baseline(ds: &EmbeddingDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    let snapshot = serde_json::json!({ "eval": cfg, "baseline": true });
    run_tasks(ds, cfg, snapshot, |ep, _| {
        let vanilla = vanilla_prototypes::<f32>(ep)?;
        Ok(predict(&classify_batch(&ep.query_as::<f32>(), &vanilla, cfg.metric)?))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::denoiser::DenoiserConfig;

    #[test]
    fn ci_of_two_level_sample() {
        let v: Vec<f64> = std::iter::repeat(0.6)
            .take(300)
            .chain(std::iter::repeat(0.8).take(300))
            .collect();
        let (m, ci) = mean_ci95(&v);
        assert!((m - 0.7).abs() < 1e-12);
        // s = 0.1·√(600/599)
        let s = 0.1 * (600.0f64 / 599.0).sqrt();
        assert!((ci - 1.96 * s / 600f64.sqrt()).abs() < 1e-15);
        assert!((ci - 0.0080).abs() < 5e-5);
        assert!(mean_ci95(&[0.4; 10]).1 < 1e-15);
    }

    #[test]
    fn consistency_check_catches_edits() {
        let mut r = EvalReport::from_tasks(vec![0.2, 0.4, 0.9], vec![], 1.0, serde_json::Value::Null);
        r.check_consistency().unwrap();
        r.mean += 0.01;
        assert!(r.check_consistency().is_err());
    }

    #[test]
    fn identity_model_matches_baseline_per_task() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_classes: 8,
            samples_per_class: 20,
            dim: 8,
            ..Default::default()
        })
        .unwrap();
        let model = DenoiserModel::<f32>::identity(DenoiserConfig::tiny(8, 5), vec![]).unwrap();
        let cfg = EvalConfig {
            n_tasks: 20,
            q_query: 5,
            ..Default::default()
        };
        let a = meta_test(&model, &ds, &cfg).unwrap();
        let b = run_baseline(&ds, &cfg).unwrap();
        assert_eq!(a.per_task_accuracy, b.per_task_accuracy);
        assert_eq!(a.fingerprints, b.fingerprints);
        a.check_consistency().unwrap();
    }

    #[test]
    fn separable_data_is_perfect() {
        let ds = generate_synthetic(&SyntheticConfig {
            n_classes: 8,
            samples_per_class: 20,
            std: 0.0,
            ..Default::default()
        })
        .unwrap();
        let r = run_baseline(
            &ds,
            &EvalConfig {
                n_tasks: 30,
                q_query: 5,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.ci95, 0.0);
    }
}
