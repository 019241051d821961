//! Meta-training of the denoiser.
//!
//! Every episode contributes the query cross-entropy of the prototypes the
//! denoiser reconstructs from a noised target, plus `β` times the
//! reconstruction error itself. Updates are SGD with momentum on the loss
//! averaged over a small batch of episodes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, EmbeddingDataset, Episode};
use crate::denoiser::{
    load_tensors, pack_limbs, save_tensors, unpack_limbs, Conditioning, DenoiserConfig, DenoiserModel,
};
use crate::diffusion::{forward_diffuse, NoiseSchedule};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{derive_seed, Real, RngStream, Tape, Tensor, Var};
use crate::overfit::{OverfitCache, OverfitConfig};
use crate::protonet::{logits_var, prototypes_from_support, Metric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the reconstruction term.
    pub beta: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub task_batch_size: usize,
    pub total_episodes: usize,
    pub seed: u64,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub metric: Metric,
    pub overfit: OverfitConfig,
    pub denoiser: DenoiserConfig,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    /// Abort once an episode's total loss exceeds this.
    pub divergence_threshold: f64,
    /// Where the loss history goes when training diverges.
    pub divergence_dump: Option<PathBuf>,
    /// Evaluate the episodes of a batch on the rayon pool. Results are
    /// reduced in episode order, so this never changes the outcome.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1.0,
            learning_rate: 1e-3,
            momentum: 0.9,
            task_batch_size: 4,
            total_episodes: 10_000,
            seed: 0,
            n_way: 5,
            k_shot: 1,
            q_query: 15,
            metric: Metric::SquaredEuclidean,
            overfit: OverfitConfig::default(),
            denoiser: DenoiserConfig::default(),
            grad_clip: Some(1.0),
            divergence_threshold: 1e6,
            divergence_dump: None,
            parallel: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.task_batch_size == 0 {
            return Err(Error::Config("task_batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need learning_rate > 0 and momentum in [0, 1), got {} and {}",
                self.learning_rate, self.momentum
            )));
        }
        if self.n_way > self.denoiser.max_ways {
            return Err(Error::Config(format!(
                "n_way {} exceeds the denoiser's max_ways {}",
                self.n_way, self.denoiser.max_ways
            )));
        }
        self.metric.validate()?;
        self.overfit.validate()?;
        self.denoiser.validate()
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.denoiser.steps)
    }
}

/// Seed of meta-training episode `index`. The low 32 bits are the index,
/// which is what the overfit cache keys on.
pub fn episode_seed(run_seed: u64, index: usize) -> u64 {
    (derive_seed(run_seed, 0x7a11) << 32) | (index as u64 & 0xffff_ffff)
}

/// Timestep and noise for one episode, drawn from its own stream.
#[derive(Clone, Debug)]
pub struct NoiseDraw<T> {
    pub t: usize,
    pub eps: Tensor<T>,
}

pub fn draw_noise<T: Real>(episode_seed: u64, steps: usize, n_way: usize, dim: usize) -> NoiseDraw<T> {
    let mut rng = RngStream::new(derive_seed(episode_seed, 0xd1ff));
    let t = rng.range_inclusive(1, steps);
    NoiseDraw {
        t,
        eps: rng.gaussian(&[n_way, dim]),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub ce: f64,
    pub diff: f64,
    pub total: f64,
}

/// Loss terms of one episode on a tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub ce: Var,
    pub diff: Var,
    /// Prototypes used for the classification term.
    pub prototypes: Var,
}

/// Mean squared error between the target and the denoiser's reconstruction
/// of it from the noised version at step `t`. Returns `(prediction, loss)`.
#[allow(clippy::too_many_arguments)]
pub fn diffusion_loss_var<T: Real>(
    tape: &mut Tape<T>,
    model: &DenoiserModel<T>,
    params: &[Var],
    target: &Tensor<T>,
    vanilla: &Tensor<T>,
    draw: &NoiseDraw<T>,
    sched: &NoiseSchedule,
    cond: &Conditioning,
) -> Result<(Var, Var)> {
    let noised = forward_diffuse(target, draw.t, &draw.eps, sched)?;
    let state = tape.constant(noised);
    let v = tape.constant(vanilla.clone());
    let pred = model.forward(tape, params, state, v, draw.t, cond)?;
    let tgt = tape.constant(target.clone());
    let loss = tape.mse(pred, tgt)?;
    Ok((pred, loss))
}

/// Value-only form of [`diffusion_loss_var`].
pub fn diffusion_loss<T: Real>(
    model: &DenoiserModel<T>,
    target: &Tensor<T>,
    vanilla: &Tensor<T>,
    draw: &NoiseDraw<T>,
    sched: &NoiseSchedule,
    cond: &Conditioning,
) -> Result<T> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, false);
    let (_, loss) = diffusion_loss_var(&mut tape, model, &p, target, vanilla, draw, sched, cond)?;
    Ok(tape.value(loss).item())
}

/// Everything an episode's loss depends on besides the parameters.
#[derive(Clone, Debug)]
pub struct EpisodeInputs<T> {
    pub vanilla: Tensor<T>,
    pub z_star: Tensor<T>,
    pub queries: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub class_ids: Vec<u32>,
    pub draw: NoiseDraw<T>,
}

impl<T: Real> EpisodeInputs<T> {
    pub fn new(episode: &Episode, z_star: &Tensor<f32>, steps: usize) -> Result<Self> {
        let vanilla = prototypes_from_support(&episode.support_as::<T>(), episode.n_way, episode.k_shot)?;
        Ok(EpisodeInputs {
            draw: draw_noise(episode.seed, steps, episode.n_way, episode.dim()),
            vanilla,
            z_star: z_star.cast(),
            queries: episode.query_as(),
            query_labels: episode.query_labels(),
            class_ids: episode.class_ids.clone(),
        })
    }
}

/// Query cross-entropy (summed over the query set) plus `β` times the
/// reconstruction error.
pub fn episode_loss_var<T: Real>(
    tape: &mut Tape<T>,
    model: &DenoiserModel<T>,
    params: &[Var],
    inputs: &EpisodeInputs<T>,
    sched: &NoiseSchedule,
    beta: f64,
    metric: Metric,
) -> Result<LossVars> {
    let recombine = model.config().recombines();
    let target = if recombine {
        inputs.z_star.sub(&inputs.vanilla)?
    } else {
        inputs.z_star.clone()
    };
    let cond = model.conditioning_for(&inputs.class_ids);
    let (pred, diff) = diffusion_loss_var(
        tape,
        model,
        params,
        &target,
        &inputs.vanilla,
        &inputs.draw,
        sched,
        &cond,
    )?;
    let prototypes = if recombine {
        let v = tape.constant(inputs.vanilla.clone());
        tape.add(v, pred)?
    } else {
        pred
    };
    let q = tape.constant(inputs.queries.clone());
    let logits = logits_var(tape, q, prototypes, metric)?;
    let ce = tape.cross_entropy(logits, &inputs.query_labels)?;
    let weighted = tape.scale(diff, T::from_f64(beta));
    let total = tape.add(ce, weighted)?;
    Ok(LossVars {
        total,
        ce,
        diff,
        prototypes,
    })
}

/// Loss values and parameter gradients of one episode.
pub fn episode_gradients<T: Real>(
    model: &DenoiserModel<T>,
    inputs: &EpisodeInputs<T>,
    sched: &NoiseSchedule,
    beta: f64,
    metric: Metric,
) -> Result<(LossRecord, Vec<Tensor<T>>)> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let l = episode_loss_var(&mut tape, model, &p, inputs, sched, beta, metric)?;
    let record = LossRecord {
        ce: tape.value(l.ce).item().as_f64(),
        diff: tape.value(l.diff).item().as_f64(),
        total: tape.value(l.total).item().as_f64(),
    };
    let mut g = tape.backward(l.total)?;
    let grads = p
        .iter()
        .zip(model.params())
        .map(|(&v, (_, t))| g.take(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    Ok((record, grads))
}

/// Parameters, optimizer buffers and progress of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DenoiserModel<f32>,
    pub momentum: Vec<Tensor<f32>>,
    pub episodes: usize,
    pub history: Vec<LossRecord>,
    pub seed: u64,
}

const META_EPISODES: &str = "meta.episodes";
const META_SEED: &str = "meta.seed";
const META_HISTORY: &str = "meta.history";
const MOMENTUM_PREFIX: &str = "opt.momentum.";

/// Denoiser config with the class table sized to the training classes.
pub fn denoiser_config_for(cfg: &TrainConfig, ds: &EmbeddingDataset) -> DenoiserConfig {
    let mut d = cfg.denoiser.clone();
    d.proto_dim = ds.dim();
    d.n_classes = ds.n_classes();
    d
}

impl TrainState {
    /// Identity-initialized model with zero momentum.
    pub fn new(cfg: &TrainConfig, ds: &EmbeddingDataset) -> Result<Self> {
        let dcfg = denoiser_config_for(cfg, ds);
        let model = DenoiserModel::identity(dcfg, ds.classes())?;
        let momentum = model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Ok(TrainState {
            model,
            momentum,
            episodes: 0,
            history: Vec::new(),
            seed: cfg.seed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut named = self.model.named_tensors();
        for ((name, _), m) in self.model.params().iter().zip(&self.momentum) {
            named.push((format!("{MOMENTUM_PREFIX}{name}"), m.clone()));
        }
        named.push((META_EPISODES.into(), pack_limbs(&[self.episodes as u64], 4)));
        named.push((META_SEED.into(), pack_limbs(&[self.seed], 4)));
        let hist: Vec<f32> = self
            .history
            .iter()
            .flat_map(|r| [r.ce as f32, r.diff as f32, r.total as f32])
            .collect();
        named.push((META_HISTORY.into(), Tensor::new(vec![self.history.len(), 3], hist)?));
        save_tensors(path, named.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Loads a state saved by [`Self::save`], checking every parameter
    /// against `dcfg`.
    pub fn load(path: impl AsRef<Path>, dcfg: DenoiserConfig) -> Result<Self> {
        let tensors = load_tensors(path)?;
        let model = DenoiserModel::from_tensors(dcfg, &tensors)?;
        let momentum = model
            .params()
            .iter()
            .map(|(name, t)| {
                let key = format!("{MOMENTUM_PREFIX}{name}");
                let m = tensors.get(&key).ok_or_else(|| Error::MissingParameter(key.clone()))?;
                if m.shape() != t.shape() {
                    return Err(Error::ParameterShape {
                        name: key,
                        expected: t.shape().to_vec(),
                        found: m.shape().to_vec(),
                    });
                }
                Ok(m.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        let scalar = |name: &str| -> Result<u64> {
            let t = tensors.get(name).ok_or_else(|| Error::MissingParameter(name.into()))?;
            unpack_limbs(t, name)?
                .first()
                .copied()
                .ok_or_else(|| FormatError::Invalid(format!("{name} is empty")).into())
        };
        let episodes = scalar(META_EPISODES)? as usize;
        let seed = scalar(META_SEED)?;
        let hist = tensors
            .get(META_HISTORY)
            .ok_or_else(|| Error::MissingParameter(META_HISTORY.into()))?;
        let history: Vec<LossRecord> = hist
            .data()
            .chunks(3)
            .map(|c| LossRecord {
                ce: c[0] as f64,
                diff: c[1] as f64,
                total: c[2] as f64,
            })
            .collect();
        if history.len() != episodes {
            return Err(FormatError::Invalid(format!("{} loss records for {episodes} episodes", history.len())).into());
        }
        Ok(TrainState {
            model,
            momentum,
            episodes,
            history,
            seed,
        })
    }

    /// `v ← μ·v + g`, `θ ← θ − lr·v`.
    fn apply_update(&mut self, grads: &[Tensor<f32>], lr: f64, mu: f64) -> Result<()> {
        let (lr, mu) = (lr as f32, mu as f32);
        let mut next = Vec::with_capacity(grads.len());
        for ((v, g), (_, p)) in self.momentum.iter_mut().zip(grads).zip(self.model.params()) {
            *v = v.zip_map(g, "momentum", |v, g| mu * v + g)?;
            next.push(p.zip_map(v, "sgd", |p, v| p - lr * v)?);
        }
        self.model.set_params(next)
    }
}

/// Writes `episode\tce\tdiff\ttotal` rows.
pub fn history_tsv(history: &[LossRecord]) -> String {
    let mut out = String::from("episode\tce\tdiff\ttotal\n");
    for (i, r) in history.iter().enumerate() {
        writeln!(out, "{i}\t{}\t{}\t{}", r.ce, r.diff, r.total).unwrap();
    }
    out
}

pub fn write_history(history: &[LossRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, history_tsv(history)).map_err(|e| Error::io(path, e))
}

/// Episodes, overfit targets and noise draws for one batch.
fn batch_inputs(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    cache: &mut OverfitCache,
    range: std::ops::Range<usize>,
) -> Result<Vec<EpisodeInputs<f32>>> {
    let episodes = range
        .map(|i| sample_episode(ds, cfg.n_way, cfg.k_shot, cfg.q_query, episode_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let missing: Vec<&Episode> = episodes.iter().filter(|e| cache.get(e.seed).is_none()).collect();
    let fit = |e: &&Episode| -> Result<(u64, Tensor<f32>)> {
        let mut local = OverfitCache::new();
        Ok((e.seed, local.get_or_fit(e, &cfg.overfit, cfg.metric)?))
    };
    let fitted: Vec<Result<(u64, Tensor<f32>)>> = if cfg.parallel {
        missing.par_iter().map(fit).collect()
    } else {
        missing.iter().map(fit).collect()
    };
    for r in fitted {
        let (seed, z) = r?;
        cache.insert(seed, z);
    }
    episodes
        .iter()
        .map(|e| EpisodeInputs::new(e, cache.get(e.seed).expect("just fitted"), cfg.denoiser.steps))
        .collect()
}

fn diverged(cfg: &TrainConfig, state: &TrainState, episode: usize, loss: f64) -> Error {
    let dump = cfg
        .divergence_dump
        .clone()
        .and_then(|p| write_history(&state.history, &p).ok().map(|_| p));
    Error::Diverged { episode, loss, dump }
}

/// Trains `state` until it has seen `cfg.total_episodes` episodes. Updates
/// cover episodes `[k·B, (k+1)·B)`, so a run stopped at a multiple of the
/// batch size `B` and resumed is identical to one that never stopped. Targets
/// are fitted on demand and kept in `cache`, which must only be shared
/// between runs that use the same dataset, run seed, overfit settings and
/// metric.
pub fn train_until(
    ds: &EmbeddingDataset,
    cfg: &TrainConfig,
    state: &mut TrainState,
    cache: &mut OverfitCache,
) -> Result<()> {
    cfg.validate()?;
    if state.seed != cfg.seed {
        return Err(Error::Config(format!(
            "state was trained with seed {}, config has {}",
            state.seed, cfg.seed
        )));
    }
    let sched = cfg.schedule()?;
    while state.episodes < cfg.total_episodes {
        let end = (state.episodes + cfg.task_batch_size).min(cfg.total_episodes);
        let inputs = batch_inputs(ds, cfg, cache, state.episodes..end)?;
        let model = &state.model;
        let run = |x: &EpisodeInputs<f32>| episode_gradients(model, x, &sched, cfg.beta, cfg.metric);
        let results: Vec<Result<(LossRecord, Vec<Tensor<f32>>)>> = if cfg.parallel {
            inputs.par_iter().map(run).collect()
        } else {
            inputs.iter().map(run).collect()
        };
        let mut sum: Option<Vec<Tensor<f32>>> = None;
        for (k, r) in results.into_iter().enumerate() {
            let episode = state.episodes + k;
            let (rec, grads) = match r {
                Ok(x) => x,
                Err(e) if e.is_numerical() => return Err(diverged(cfg, state, episode, f64::NAN)),
                Err(e) => return Err(e),
            };
            state.history.push(rec);
            if !rec.total.is_finite() || rec.total > cfg.divergence_threshold {
                return Err(diverged(cfg, state, episode, rec.total));
            }
            sum = Some(match sum {
                None => grads,
                Some(acc) => acc.iter().zip(&grads).map(|(a, g)| a.add(g)).collect::<Result<_>>()?,
            });
        }
        let n = (end - state.episodes) as f32;
        let mut mean: Vec<Tensor<f32>> = sum
            .expect("non-empty batch")
            .into_iter()
            .map(|g| g.map(|x| x / n))
            .collect();
        if let Some(c) = cfg.grad_clip {
            clip_global_norm(&mut mean, c);
        }
        state.apply_update(&mean, cfg.learning_rate, cfg.momentum)?;
        state.episodes = end;
    }
    Ok(())
}

/// Scales `grads` down so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g = g.map(|x| x * s);
        }
    }
    norm
}

/// Full training run from the identity-initialized model.
pub fn meta_train(ds: &EmbeddingDataset, cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg, ds)?;
    train_until(ds, cfg, &mut state, &mut OverfitCache::new())?;
    Ok(state)
}

/// First episode whose total loss is at most `fraction` of the first
/// episode's, smoothed over a trailing `window`.
pub fn episodes_to_threshold(history: &[LossRecord], fraction: f64, window: usize) -> Option<usize> {
    let w = window.max(1);
    if history.len() < w {
        return None;
    }
    let avg = |s: &[LossRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    let start = avg(&history[..w]);
    (w..=history.len())
        .find(|&end| avg(&history[end - w..end]) <= fraction * start)
        .map(|end| end - 1)
}
