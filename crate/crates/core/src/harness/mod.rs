//! Evaluation, run configuration, ablations and report tables.

mod ablation;
mod config;
mod eval;
mod report;

pub use ablation::{run_ablation, AblationAxis, AblationSpec};
pub use config::{sidecar_path, RunConfig};
pub use eval::{chain_seed, mean_ci95, meta_test, run_baseline, task_seed, EvalConfig, EvalReport};
pub use report::{
    export_report, export_rows, parse_csv, rows_to_csv, rows_to_json, CsvRow, ReportFormat, ReportRow, CSV_COLUMNS,
};
