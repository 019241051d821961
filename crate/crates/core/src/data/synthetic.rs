use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, RngStream};

/// Gaussian-mixture embeddings: class means uniform on a sphere of radius
/// `scale`, samples isotropic around them with standard deviation `std`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub scale: f64,
    pub std: f64,
    pub seed: u64,
    /// Id of the first generated class. Class `c` always draws from the
    /// same stream, so splits with different offsets never overlap and a
    /// class looks the same whichever split it lands in.
    pub first_class: u32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            dim: 32,
            n_classes: 20,
            samples_per_class: 300,
            scale: 2.0,
            std: 0.5,
            seed: 0,
            first_class: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::InvalidArgument("dim must be at least 1".into()));
        }
        if !(self.scale > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.std >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "std must be non-negative, got {}",
                self.std
            )));
        }
        Ok(())
    }
}

/// Mean vector of class `class_id` for a given seed.
pub fn class_mean(seed: u64, class_id: u32, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = RngStream::new(derive_seed(derive_seed(seed, 0), class_id as u64));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x * scale / norm).collect();
        }
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<EmbeddingDataset> {
    cfg.validate()?;
    let mut ds = EmbeddingDataset::empty(cfg.dim);
    let mut row = vec![0f32; cfg.dim];
    for c in 0..cfg.n_classes as u32 {
        let class_id = cfg.first_class + c;
        let mean = class_mean(cfg.seed, class_id, cfg.dim, cfg.scale);
        let mut rng = RngStream::new(derive_seed(derive_seed(cfg.seed, 1), class_id as u64));
        for _ in 0..cfg.samples_per_class {
            for (o, &m) in row.iter_mut().zip(&mean) {
                *o = if cfg.std == 0.0 {
                    m as f32
                } else {
                    (m + cfg.std * rng.standard_normal()) as f32
                };
            }
            ds.push(class_id, &row)?;
        }
    }
    Ok(ds)
}

/// Meta-train and meta-test datasets over disjoint class ranges.
pub fn synthetic_split(
    cfg: &SyntheticConfig,
    train_classes: usize,
    test_classes: usize,
) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    let train = generate_synthetic(&SyntheticConfig {
        n_classes: train_classes,
        first_class: cfg.first_class,
        ..cfg.clone()
    })?;
    let test = generate_synthetic(&SyntheticConfig {
        n_classes: test_classes,
        first_class: cfg.first_class + train_classes as u32,
        ..cfg.clone()
    })?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_std_repeats_the_mean() {
        let cfg = SyntheticConfig {
            std: 0.0,
            n_classes: 3,
            samples_per_class: 4,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        for c in ds.classes() {
            let mean = class_mean(cfg.seed, c, cfg.dim, cfg.scale);
            for &r in ds.records_of(c) {
                let expect: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
                assert_eq!(ds.vector(r), expect.as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SyntheticConfig {
            n_classes: 4,
            samples_per_class: 10,
            seed: 77,
            ..Default::default()
        };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
    }

    #[test]
    fn means_sit_on_the_sphere() {
        let m = class_mean(3, 11, 32, 2.5);
        let norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 2.5).abs() < 1e-12);
    }

    #[test]
    fn split_classes_are_disjoint() {
        let cfg = SyntheticConfig {
            samples_per_class: 2,
            ..Default::default()
        };
        let (a, b) = synthetic_split(&cfg, 20, 20).unwrap();
        let ca = a.classes();
        assert!(b.classes().iter().all(|c| !ca.contains(c)));
        assert_eq!(a.n_classes() + b.n_classes(), 40);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = SyntheticConfig {
            std: -1.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            scale: 0.0,
            ..Default::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
