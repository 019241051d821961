//! Trains one denoiser per conditioning mode and writes the table as CSV.

use std::path::Path;

use protodiff::harness::{run_ablation, AblationAxis, AblationSpec, ReportFormat, RunConfig};

fn main() -> protodiff::Result<()> {
    let base = RunConfig {
        total_episodes: 1000,
        n_tasks: 300,
        ..Default::default()
    };
    let (train, test) = base.datasets()?;
    let spec = AblationSpec {
        axis: AblationAxis::CondMode,
        values: ["vanilla", "learned", "none"].map(String::from).to_vec(),
        base,
    };
    let out = std::env::temp_dir().join("protodiff_cond_mode.csv");
    let rows = run_ablation(&spec, &train, &test, Some((Path::new(&out), ReportFormat::Csv)))?;
    for r in &rows {
        println!("{:<8} {:.4} ± {:.4}", r.axis_value, r.mean, r.ci95);
    }
    println!(
        "chance is {:.2}; table written to {}",
        1.0 / spec.base.n_way as f64,
        out.display()
    );
    Ok(())
}
