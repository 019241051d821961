use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::{export_rows, ReportFormat, ReportRow};
use super::{meta_test, RunConfig};
use crate::data::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::overfit::OverfitCache;
use crate::training::{train_until, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationAxis {
    Steps,
    DdimStride,
    McSamples,
    CondMode,
    Residual,
    Metric,
    Beta,
    DenoiserSize,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 8] = [
        AblationAxis::Steps,
        AblationAxis::DdimStride,
        AblationAxis::McSamples,
        AblationAxis::CondMode,
        AblationAxis::Residual,
        AblationAxis::Metric,
        AblationAxis::Beta,
        AblationAxis::DenoiserSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Steps => "T",
            AblationAxis::DdimStride => "ddim_stride",
            AblationAxis::McSamples => "mc_samples",
            AblationAxis::CondMode => "cond_mode",
            AblationAxis::Residual => "residual",
            AblationAxis::Metric => "metric",
            AblationAxis::Beta => "beta",
            AblationAxis::DenoiserSize => "denoiser_size",
        }
    }

    /// Axes that only change sampling, so one trained model serves all values.
    pub fn inference_only(self) -> bool {
        matches!(self, AblationAxis::DdimStride | AblationAxis::McSamples)
    }

    /// Config overrides that realize `value` on this axis.
    pub fn overrides(self, value: &str) -> Result<Vec<(String, String)>> {
        let one = |k: &str| Ok(vec![(k.to_string(), value.to_string())]);
        match self {
            AblationAxis::Steps => one("steps"),
            AblationAxis::DdimStride => one("stride"),
            AblationAxis::McSamples => one("mc_samples"),
            AblationAxis::CondMode => Ok(vec![("cond_mode".into(), format!("{value:?}"))]),
            AblationAxis::Residual => {
                let on = match value {
                    "on" | "true" | "1" => "true",
                    "off" | "false" | "0" => "false",
                    _ => return Err(Error::Config(format!("residual value {value:?} is not on/off"))),
                };
                Ok(vec![("residual".into(), on.into())])
            }
            AblationAxis::Metric => Ok(vec![("metric".into(), format!("{value:?}"))]),
            AblationAxis::Beta => one("beta"),
            AblationAxis::DenoiserSize => {
                let dims: Vec<&str> = match value {
                    "tiny" => vec!["2", "16", "2", "32"],
                    "desk" => vec!["2", "64", "4", "128"],
                    "large" => vec!["12", "512", "16", "512"],
                    v => v.split('x').collect(),
                };
                if dims.len() != 4 {
                    return Err(Error::Config(format!(
                        "denoiser size {value:?} is not tiny, desk, large or LAYERSxWIDTHxHEADSxMLP"
                    )));
                }
                Ok(["n_layers", "d_model", "n_heads", "mlp_hidden"]
                    .iter()
                    .zip(dims)
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .collect())
            }
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        AblationAxis::ALL
            .into_iter()
            .find(|a| a.name() == s || (s == "steps" && *a == AblationAxis::Steps))
            .ok_or_else(|| Error::Config(format!("unknown ablation axis {s:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub axis: AblationAxis,
    pub values: Vec<String>,
    pub base: RunConfig,
}

impl AblationSpec {
    /// Config of every value, validated up front.
    pub fn configs(&self) -> Result<Vec<RunConfig>> {
        if self.values.is_empty() {
            return Err(Error::Config("ablation needs at least one value".into()));
        }
        self.values
            .iter()
            .map(|v| {
                let overrides: Vec<String> = self
                    .axis
                    .overrides(v)?
                    .into_iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect();
                RunConfig::from_toml(&self.base.to_toml(), &overrides)
            })
            .collect()
    }
}

/// Trains (once for inference-only axes) and evaluates every value on the
/// same task stream. With `flush` set, the table is rewritten after each
/// row, so a failure keeps the rows already finished.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &EmbeddingDataset,
    test: &EmbeddingDataset,
    flush: Option<(&Path, ReportFormat)>,
) -> Result<Vec<ReportRow>> {
    let configs = spec.configs()?;
    let mut rows = Vec::with_capacity(configs.len());
    // Targets depend only on episodes, fitting settings and metric, which
    // only the metric axis changes.
    let mut cache = OverfitCache::new();
    let mut shared: Option<TrainState> = None;
    for (value, cfg) in spec.values.iter().zip(&configs) {
        let tcfg = cfg.train_config()?;
        let state = match (&shared, spec.axis.inference_only()) {
            (Some(s), true) => s.clone(),
            _ => {
                let mut s = TrainState::new(&tcfg, train)?;
                if spec.axis == AblationAxis::Metric {
                    train_until(train, &tcfg, &mut s, &mut OverfitCache::new())?;
                } else {
                    train_until(train, &tcfg, &mut s, &mut cache)?;
                }
                if spec.axis.inference_only() {
                    shared = Some(s.clone());
                }
                s
            }
        };
        let report = meta_test(&state.model, test, &cfg.eval_config()?)?;
        rows.push(ReportRow::new(value.clone(), report, cfg));
        if let Some((path, format)) = flush {
            export_rows(&rows, path, format)?;
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_names_roundtrip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.name().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
    }

    #[test]
    fn values_become_configs() {
        let spec = AblationSpec {
            axis: AblationAxis::DenoiserSize,
            values: vec!["tiny".into(), "3x32x4x64".into()],
            base: RunConfig::default(),
        };
        let c = spec.configs().unwrap();
        assert_eq!(
            (c[0].n_layers, c[0].d_model, c[0].n_heads, c[0].mlp_hidden),
            (2, 16, 2, 32)
        );
        assert_eq!(
            (c[1].n_layers, c[1].d_model, c[1].n_heads, c[1].mlp_hidden),
            (3, 32, 4, 64)
        );
        let spec = AblationSpec {
            axis: AblationAxis::Residual,
            values: vec!["on".into(), "off".into()],
            base: RunConfig::default(),
        };
        let c = spec.configs().unwrap();
        assert!(c[0].residual && !c[1].residual);
        let bad = AblationSpec {
            axis: AblationAxis::DdimStride,
            values: vec!["0".into()],
            base: RunConfig::default(),
        };
        assert!(bad.configs().is_err());
        assert!(AblationSpec { values: vec![], ..bad }.configs().is_err());
    }
}
