//! Per-task prototype fitting.
//!
//! Starting from the vanilla prototypes, plain gradient descent minimizes the
//! episode's cross-entropy with the prototypes as the only free variables.
//! The result is the target the denoiser learns to reach.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{io as embio, EmbeddingDataset, Episode};
use crate::error::{Error, FormatError, Result};
use crate::numerics::{Real, Tape, Tensor};
use crate::protonet::{cross_entropy, logits, logits_var, Metric, PrototypeKind, PrototypeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Stop once the mean cross-entropy drops below this.
    pub loss_tolerance: f64,
    pub include_query: bool,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        OverfitConfig {
            learning_rate: 0.5,
            max_iters: 200,
            loss_tolerance: 1e-3,
            include_query: true,
        }
    }
}

impl OverfitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "overfit learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct OverfitResult<T> {
    pub z_star: PrototypeSet<T>,
    /// Mean cross-entropy before the first step and after every step.
    pub loss_trace: Vec<f64>,
    pub iterations_used: usize,
    /// Iteration whose prototypes were returned (0 means the start point).
    pub best_iteration: usize,
}

/// The points the fitting loss is measured on: support, then query if asked.
fn fit_points<T: Real>(episode: &Episode, include_query: bool) -> Result<(Tensor<T>, Vec<usize>)> {
    let support = episode.support_as::<T>();
    let mut labels = episode.support_labels();
    if !include_query {
        return Ok((support, labels));
    }
    let query = episode.query_as::<T>();
    labels.extend(episode.query_labels());
    let d = support.last_dim();
    let mut data = support.into_vec();
    data.extend_from_slice(query.data());
    let rows = labels.len();
    Ok((Tensor::new(vec![rows, d], data)?, labels))
}

fn mean_ce<T: Real>(points: &Tensor<T>, labels: &[usize], z: &Tensor<T>, metric: Metric) -> Result<f64> {
    let l = logits(points, z, metric)?;
    let n = l.last_dim();
    let mut total = 0.0;
    for (row, &y) in l.data().chunks(n).zip(labels) {
        total += cross_entropy(row, y)?.as_f64();
    }
    Ok(total / labels.len().max(1) as f64)
}

/// Gradient of the mean cross-entropy with respect to the prototypes.
fn mean_ce_grad<T: Real>(points: &Tensor<T>, labels: &[usize], z: &Tensor<T>, metric: Metric) -> Result<Tensor<T>> {
    let m = labels.len().max(1);
    if metric == Metric::SquaredEuclidean {
        // logit_ic = −‖q_i − z_c‖²  ⇒  ∂/∂z_c = (2/M) Σ_i (p_ic − y_ic)(q_i − z_c)
        let (n, d) = z.dims2()?;
        let l = logits(points, z, metric)?;
        let mut probs = vec![T::zero(); n];
        let mut g = vec![T::zero(); n * d];
        let two_over_m = T::from_f64(2.0 / m as f64);
        for (i, &y) in labels.iter().enumerate() {
            let row = &l.data()[i * n..(i + 1) * n];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut s = T::zero();
            for (p, &v) in probs.iter_mut().zip(row) {
                *p = (v - max).exp();
                s = s + *p;
            }
            let q = points.row(i);
            for c in 0..n {
                let mut w = probs[c] / s;
                if c == y {
                    w = w - T::one();
                }
                let w = w * two_over_m;
                let zc = z.row(c);
                for k in 0..d {
                    g[c * d + k] = g[c * d + k] + w * (q[k] - zc[k]);
                }
            }
        }
        return Tensor::new(vec![n, d], g);
    }
    let mut tape = Tape::new();
    let zv = tape.param(z.clone());
    let pv = tape.constant(points.clone());
    let lv = logits_var(&mut tape, pv, zv, metric)?;
    let ce = tape.cross_entropy(lv, labels)?;
    let loss = tape.scale(ce, T::one() / T::from_usize(m));
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(zv).expect("prototype gradient"))
}

/// Fits prototypes to `episode` starting from `init`.
///
/// Returns the best iterate seen: lowest mean fitting loss among iterates
/// whose query cross-entropy is no worse than the starting point's, so the
/// result never classifies the query set less confidently than `init`.
pub fn overfit_prototypes<T: Real>(
    episode: &Episode,
    init: &PrototypeSet<T>,
    cfg: &OverfitConfig,
    metric: Metric,
) -> Result<OverfitResult<T>> {
    cfg.validate()?;
    let (points, labels) = fit_points::<T>(episode, cfg.include_query)?;
    let query = episode.query_as::<T>();
    let query_labels: Vec<usize> = if cfg.include_query {
        labels[labels.len() - query.shape()[0]..].to_vec()
    } else {
        Vec::new()
    };
    let check_query = !query_labels.is_empty();

    let mut z = init.vectors.clone();
    let mut loss = mean_ce(&points, &labels, &z, metric)?;
    if loss.is_nan() {
        return Err(Error::NanLoss { iteration: 0 });
    }
    let query_ce0 = if check_query {
        mean_ce(&query, &query_labels, &z, metric)?
    } else {
        0.0
    };
    let mut trace = vec![loss];
    let mut best = (loss, 0usize, z.clone());
    let eta = T::from_f64(cfg.learning_rate);
    let mut iters = 0;
    while iters < cfg.max_iters && loss >= cfg.loss_tolerance {
        let g = mean_ce_grad(&points, &labels, &z, metric)?;
        z = z.zip_map(&g, "overfit step", |a, b| a - eta * b)?;
        iters += 1;
        loss = mean_ce(&points, &labels, &z, metric)?;
        if loss.is_nan() {
            return Err(Error::NanLoss { iteration: iters });
        }
        trace.push(loss);
        if loss < best.0 {
            let ok = !check_query || mean_ce(&query, &query_labels, &z, metric)? <= query_ce0;
            if ok {
                best = (loss, iters, z.clone());
            }
        }
    }
    Ok(OverfitResult {
        z_star: PrototypeSet::new(PrototypeKind::Overfitted, best.2)?,
        loss_trace: trace,
        iterations_used: iters,
        best_iteration: best.1,
    })
}

/// Fitted prototypes keyed by the low 32 bits of the episode seed.
#[derive(Clone, Debug, Default)]
pub struct OverfitCache {
    entries: BTreeMap<u32, Tensor<f32>>,
}

impl OverfitCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn key(episode_seed: u64) -> u32 {
        episode_seed as u32
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, episode_seed: u64) -> Option<&Tensor<f32>> {
        self.entries.get(&Self::key(episode_seed))
    }

    pub fn insert(&mut self, episode_seed: u64, z_star: Tensor<f32>) {
        self.entries.insert(Self::key(episode_seed), z_star);
    }

    /// Cached prototypes for `episode`, fitting them on first request.
    pub fn get_or_fit(&mut self, episode: &Episode, cfg: &OverfitConfig, metric: Metric) -> Result<Tensor<f32>> {
        if let Some(z) = self.get(episode.seed) {
            return Ok(z.clone());
        }
        let init = crate::protonet::vanilla_prototypes::<f64>(episode)?;
        let z = overfit_prototypes(episode, &init, cfg, metric)?
            .z_star
            .vectors
            .cast::<f32>();
        self.insert(episode.seed, z.clone());
        Ok(z)
    }

    /// Writes one embedding-format record per prototype row.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let dim = self.entries.values().next().map_or(0, |t| t.last_dim());
        let mut ds = EmbeddingDataset::empty(dim);
        for (&k, z) in &self.entries {
            for r in 0..z.shape()[0] {
                ds.push(k, z.row(r))?;
            }
        }
        embio::save_embeddings(&ds, path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ds = embio::load_embeddings(path)?;
        let mut entries = BTreeMap::new();
        for k in ds.classes() {
            let recs = ds.records_of(k);
            if recs.windows(2).any(|w| w[1] != w[0] + 1) {
                return Err(FormatError::Invalid(format!("cache rows for key {k} are not contiguous")).into());
            }
            let mut data = Vec::with_capacity(recs.len() * ds.dim());
            for &r in recs {
                data.extend_from_slice(ds.vector(r));
            }
            entries.insert(k, Tensor::new(vec![recs.len(), ds.dim()], data)?);
        }
        Ok(OverfitCache { entries })
    }
}
