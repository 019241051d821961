use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Prototypes recorded at each visited timestep of one sampling chain.
/// Timesteps strictly decrease and the last entry is `t = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionTrace {
    n_way: usize,
    dim: usize,
    entries: Vec<(usize, Tensor<f64>)>,
}

impl DiffusionTrace {
    pub fn new(n_way: usize, dim: usize) -> Self {
        DiffusionTrace {
            n_way,
            dim,
            entries: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, t: usize, protos: &Tensor<T>) -> Result<()> {
        if protos.shape() != [self.n_way, self.dim] {
            return Err(Error::ShapeMismatch {
                op: "trace",
                lhs: vec![self.n_way, self.dim],
                rhs: protos.shape().to_vec(),
            });
        }
        if let Some(&(last, _)) = self.entries.last() {
            if t >= last {
                return Err(Error::InvalidArgument(format!("trace timestep {t} after {last}")));
            }
        }
        self.entries.push((t, protos.cast()));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, Tensor<f64>)] {
        &self.entries
    }

    pub fn timesteps(&self) -> Vec<usize> {
        self.entries.iter().map(|(t, _)| *t).collect()
    }

    pub fn final_prototypes(&self) -> Option<&Tensor<f64>> {
        self.entries.last().filter(|(t, _)| *t == 0).map(|(_, p)| p)
    }

    /// Tab-separated rows `t class coord value` under a header line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\tclass\tcoord\tvalue\n");
        for (t, p) in &self.entries {
            for c in 0..self.n_way {
                for (k, v) in p.row(c).iter().enumerate() {
                    let _ = writeln!(out, "{t}\t{c}\t{k}\t{v:?}");
                }
            }
        }
        out
    }

    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}
