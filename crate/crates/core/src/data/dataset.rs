use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Precomputed embeddings with integer class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    labels: Vec<u32>,
    vectors: Vec<f32>,
    class_index: BTreeMap<u32, Vec<usize>>,
}

impl EmbeddingDataset {
    pub fn empty(dim: usize) -> Self {
        EmbeddingDataset {
            dim,
            labels: Vec::new(),
            vectors: Vec::new(),
            class_index: BTreeMap::new(),
        }
    }

    /// Builds a dataset from a label per record and a flat `len × dim` buffer.
    pub fn from_parts(dim: usize, labels: Vec<u32>, vectors: Vec<f32>) -> Result<Self> {
        if vectors.len() != labels.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} records of dimension {dim}",
                vectors.len(),
                labels.len()
            )));
        }
        let mut class_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &c) in labels.iter().enumerate() {
            class_index.entry(c).or_default().push(i);
        }
        Ok(EmbeddingDataset {
            dim,
            labels,
            vectors,
            class_index,
        })
    }

    pub fn push(&mut self, class_id: u32, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "vector of length {} in a dataset of dimension {}",
                vector.len(),
                self.dim
            )));
        }
        self.class_index.entry(class_id).or_default().push(self.labels.len());
        self.labels.push(class_id);
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, record: usize) -> u32 {
        self.labels[record]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn vector(&self, record: usize) -> &[f32] {
        &self.vectors[record * self.dim..(record + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    /// Class ids in ascending order.
    pub fn classes(&self) -> Vec<u32> {
        self.class_index.keys().copied().collect()
    }

    pub fn n_classes(&self) -> usize {
        self.class_index.len()
    }

    /// Record indices of `class_id`, in insertion order.
    pub fn records_of(&self, class_id: u32) -> &[usize] {
        self.class_index.get(&class_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Per-class centroid of every record, ordered by class id.
    pub fn class_means(&self) -> Vec<(u32, Vec<f64>)> {
        self.class_index
            .iter()
            .map(|(&c, recs)| {
                let mut m = vec![0.0; self.dim];
                for &r in recs {
                    for (a, &v) in m.iter_mut().zip(self.vector(r)) {
                        *a += v as f64;
                    }
                }
                m.iter_mut().for_each(|a| *a /= recs.len() as f64);
                (c, m)
            })
            .collect()
    }
}
