//! Accuracy and time per task against the sampling stride, with one
//! trained model shared by every stride.

use protodiff::harness::{run_ablation, AblationAxis, AblationSpec, RunConfig};

fn main() -> protodiff::Result<()> {
    let base = RunConfig {
        total_episodes: 1000,
        ..Default::default()
    };
    let (train, test) = base.datasets()?;
    let spec = AblationSpec {
        axis: AblationAxis::DdimStride,
        values: ["1", "10", "50", "100"].map(String::from).to_vec(),
        base,
    };
    for row in run_ablation(&spec, &train, &test, None)? {
        println!(
            "stride {:>3}: {:.4} ± {:.4}  {:.3} ms/task",
            row.axis_value, row.mean, row.ci95, row.ms_per_task
        );
    }
    Ok(())
}
