use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{EvalReport, RunConfig};
use crate::error::{Error, FormatError, Result};

pub const CSV_COLUMNS: [&str; 6] = ["axis_value", "mean", "ci95", "n_tasks", "ms_per_task", "config_hash"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// `.json` paths get JSON, everything else CSV.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => ReportFormat::Json,
            _ => ReportFormat::Csv,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::Config(format!("unknown report format {s:?}"))),
        }
    }
}

/// One line of a report table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub axis_value: String,
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
    pub ms_per_task: f64,
    pub config_hash: String,
    pub per_task_accuracy: Vec<f64>,
    pub config: serde_json::Value,
}

impl ReportRow {
    pub fn new(axis_value: String, report: EvalReport, cfg: &RunConfig) -> Self {
        ReportRow {
            axis_value,
            mean: report.mean,
            ci95: report.ci95,
            n_tasks: report.n_tasks,
            ms_per_task: report.ms_per_task,
            config_hash: cfg.hash(),
            per_task_accuracy: report.per_task_accuracy,
            config: serde_json::to_value(cfg).expect("config serializes"),
        }
    }

    /// Summary fields recomputed from the per-task list must match.
    pub fn check_consistency(&self) -> Result<()> {
        EvalReport {
            n_tasks: self.n_tasks,
            per_task_accuracy: self.per_task_accuracy.clone(),
            mean: self.mean,
            ci95: self.ci95,
            ms_per_task: self.ms_per_task,
            fingerprints: vec![],
            config: serde_json::Value::Null,
        }
        .check_consistency()
        .map_err(|e| Error::InvalidArgument(format!("row {:?}: {e}", self.axis_value)))
    }
}

pub fn rows_to_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_COLUMNS).expect("in-memory write");
    for r in rows {
        w.write_record([
            r.axis_value.clone(),
            format!("{:?}", r.mean),
            format!("{:?}", r.ci95),
            r.n_tasks.to_string(),
            format!("{:?}", r.ms_per_task),
            r.config_hash.clone(),
        ])
        .expect("in-memory write");
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv"))
}

/// Summary columns of a CSV table written by [`rows_to_csv`].
#[derive(Clone, Debug, PartialEq, Deserialize)]
pub struct CsvRow {
    pub axis_value: String,
    pub mean: f64,
    pub ci95: f64,
    pub n_tasks: usize,
    pub ms_per_task: f64,
    pub config_hash: String,
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers().map_err(|e| FormatError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(FormatError::Invalid(format!("unexpected columns {headers:?}")).into());
    }
    r.deserialize()
        .enumerate()
        .map(|(i, row)| {
            row.map_err(|e| {
                FormatError::Parse {
                    line: i + 2,
                    message: e.to_string(),
                }
                .into()
            })
        })
        .collect()
}

pub fn rows_to_json(rows: &[ReportRow]) -> String {
    serde_json::to_string_pretty(rows).expect("rows serialize")
}

/// Writes `rows` after checking each one's summary against its tasks.
pub fn export_rows(rows: &[ReportRow], path: &Path, format: ReportFormat) -> Result<()> {
    for r in rows {
        r.check_consistency()?;
    }
    let text = match format {
        ReportFormat::Csv => rows_to_csv(rows)?,
        ReportFormat::Json => rows_to_json(rows),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a single report as a one-row table.
pub fn export_report(
    label: &str,
    report: &EvalReport,
    cfg: &RunConfig,
    path: &Path,
    format: ReportFormat,
) -> Result<()> {
    export_rows(&[ReportRow::new(label.to_string(), report.clone(), cfg)], path, format)
}
