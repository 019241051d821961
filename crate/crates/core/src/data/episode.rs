use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{Real, RngStream, Tensor};

/// One N-way K-shot task. Rows are class-major: support row `c·K + k` is the
/// `k`-th shot of episode label `c`, and likewise for the query set.
#[derive(Debug)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub seed: u64,
    /// Dataset class id behind each episode label.
    pub class_ids: Vec<u32>,
    support: Tensor<f32>,
    query: Tensor<f32>,
    support_records: Vec<usize>,
    query_records: Vec<usize>,
    query_label_reads: AtomicUsize,
}

impl Clone for Episode {
    fn clone(&self) -> Self {
        Episode {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_query: self.q_query,
            seed: self.seed,
            class_ids: self.class_ids.clone(),
            support: self.support.clone(),
            query: self.query.clone(),
            support_records: self.support_records.clone(),
            query_records: self.query_records.clone(),
            query_label_reads: AtomicUsize::new(self.label_reads()),
        }
    }
}

impl Episode {
    /// Builds an episode from explicit class-major rows.
    pub fn from_rows(
        n_way: usize,
        k_shot: usize,
        q_query: usize,
        support: Tensor<f32>,
        query: Tensor<f32>,
    ) -> Result<Self> {
        let d = support.last_dim();
        if support.shape() != [n_way * k_shot, d] || query.shape() != [n_way * q_query, d] {
            return Err(Error::InvalidShape {
                op: "episode",
                detail: format!(
                    "support {:?} / query {:?} for {n_way}-way {k_shot}-shot {q_query}-query",
                    support.shape(),
                    query.shape()
                ),
            });
        }
        Ok(Episode {
            n_way,
            k_shot,
            q_query,
            seed: 0,
            class_ids: (0..n_way as u32).collect(),
            support_records: (0..n_way * k_shot).collect(),
            query_records: (n_way * k_shot..n_way * (k_shot + q_query)).collect(),
            support,
            query,
            query_label_reads: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.support.last_dim()
    }

    pub fn support(&self) -> &Tensor<f32> {
        &self.support
    }

    pub fn query(&self) -> &Tensor<f32> {
        &self.query
    }

    pub fn support_as<T: Real>(&self) -> Tensor<T> {
        self.support.cast()
    }

    pub fn query_as<T: Real>(&self) -> Tensor<T> {
        self.query.cast()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.n_way)
            .flat_map(|c| std::iter::repeat(c).take(self.k_shot))
            .collect()
    }

    /// Query labels. Every call is counted, so evaluation code can prove it
    /// never looked at them before predicting.
    pub fn query_labels(&self) -> Vec<usize> {
        self.query_label_reads.fetch_add(1, Ordering::SeqCst);
        self.query_labels_uncounted()
    }

    fn query_labels_uncounted(&self) -> Vec<usize> {
        (0..self.n_way)
            .flat_map(|c| std::iter::repeat(c).take(self.q_query))
            .collect()
    }

    pub fn label_reads(&self) -> usize {
        self.query_label_reads.load(Ordering::SeqCst)
    }

    /// Fraction of `predictions` that match the query labels. Scoring is the
    /// one sanctioned use of the labels after predictions are fixed, so it
    /// does not count as a read.
    pub fn score(&self, predictions: &[usize]) -> Result<f64> {
        let labels = self.query_labels_uncounted();
        if predictions.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} predictions for {} queries",
                predictions.len(),
                labels.len()
            )));
        }
        let hits = predictions.iter().zip(&labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }

    pub fn support_records(&self) -> &[usize] {
        &self.support_records
    }

    pub fn query_records(&self) -> &[usize] {
        &self.query_records
    }

    /// Hex digest identifying the sampled classes and records.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for &c in &self.class_ids {
            h.update(c.to_le_bytes());
        }
        for &r in self.support_records.iter().chain(&self.query_records) {
            h.update((r as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..16])
    }
}

/// Samples a task: `n_way` classes without replacement, then `k_shot +
/// q_query` records per class without replacement.
pub fn sample_episode(
    ds: &EmbeddingDataset,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    seed: u64,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::InvalidArgument(
            "episodes need at least one way and one shot".into(),
        ));
    }
    let classes = ds.classes();
    if classes.len() < n_way {
        return Err(Error::InsufficientData(format!(
            "{n_way}-way episodes need {n_way} classes, dataset has {}",
            classes.len()
        )));
    }
    let need = k_shot + q_query;
    if let Some(c) = classes.iter().find(|&&c| ds.records_of(c).len() < need) {
        return Err(Error::InsufficientData(format!(
            "class {c} has {} records, episodes need {need}",
            ds.records_of(*c).len()
        )));
    }

    let mut rng = RngStream::new(seed);
    let chosen = rng.choose(&classes, n_way);
    let d = ds.dim();
    let mut support = Vec::with_capacity(n_way * k_shot * d);
    let mut query = Vec::with_capacity(n_way * q_query * d);
    let mut support_records = Vec::with_capacity(n_way * k_shot);
    let mut query_records = Vec::with_capacity(n_way * q_query);
    for &c in &chosen {
        let picked = rng.choose(ds.records_of(c), need);
        for (i, &r) in picked.iter().enumerate() {
            if i < k_shot {
                support.extend_from_slice(ds.vector(r));
                support_records.push(r);
            } else {
                query.extend_from_slice(ds.vector(r));
                query_records.push(r);
            }
        }
    }
    Ok(Episode {
        n_way,
        k_shot,
        q_query,
        seed,
        class_ids: chosen,
        support: Tensor::new(vec![n_way * k_shot, d], support)?,
        query: Tensor::new(vec![n_way * q_query, d], query)?,
        support_records,
        query_records,
        query_label_reads: AtomicUsize::new(0),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use std::collections::HashSet;

    fn ds(classes: usize, per_class: usize) -> EmbeddingDataset {
        generate_synthetic(&SyntheticConfig {
            dim: 4,
            n_classes: classes,
            samples_per_class: per_class,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_episode() {
        let d = ds(10, 20);
        let a = sample_episode(&d, 5, 2, 3, 99).unwrap();
        let b = sample_episode(&d, 5, 2, 3, 99).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.support(), b.support());
        assert_eq!(a.query(), b.query());
    }

    #[test]
    fn exhausting_a_class_covers_it_disjointly() {
        let d = ds(5, 6);
        let e = sample_episode(&d, 5, 2, 4, 1).unwrap();
        for (label, &c) in e.class_ids.iter().enumerate() {
            let mut got: Vec<usize> = e.support_records()[label * 2..label * 2 + 2].to_vec();
            got.extend_from_slice(&e.query_records()[label * 4..label * 4 + 4]);
            got.sort();
            assert_eq!(got, d.records_of(c));
        }
    }

    #[test]
    fn support_and_query_are_disjoint() {
        let d = ds(8, 10);
        for seed in 0..50 {
            let e = sample_episode(&d, 4, 3, 5, seed).unwrap();
            let s: HashSet<_> = e.support_records().iter().collect();
            assert!(e.query_records().iter().all(|r| !s.contains(r)));
        }
    }

    #[test]
    fn class_frequency_is_uniform() {
        let d = ds(20, 2);
        let mut counts = [0usize; 20];
        let n = 10_000;
        for seed in 0..n {
            let e = sample_episode(&d, 5, 1, 1, seed).unwrap();
            for &c in &e.class_ids {
                counts[c as usize] += 1;
            }
        }
        for &c in &counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }

    #[test]
    fn deficient_class_is_named() {
        let mut d = ds(5, 6);
        d.push(77, &[0.0; 4]).unwrap();
        let err = sample_episode(&d, 5, 2, 2, 0).unwrap_err().to_string();
        assert!(err.contains("class 77"), "{err}");
        assert!(sample_episode(&ds(3, 6), 5, 1, 1, 0).is_err());
    }

    #[test]
    fn label_reads_are_counted_but_scoring_is_not() {
        let e = sample_episode(&ds(5, 4), 5, 1, 2, 3).unwrap();
        assert_eq!(e.label_reads(), 0);
        let acc = e.score(&[0, 0, 1, 1, 2, 2, 3, 3, 4, 0]).unwrap();
        assert!((acc - 0.9).abs() < 1e-12);
        assert_eq!(e.label_reads(), 0);
        e.query_labels();
        assert_eq!(e.label_reads(), 1);
    }
}
