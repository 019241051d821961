//! Vanilla prototype accuracy on the default synthetic benchmark.

use protodiff::data::{synthetic_split, SyntheticConfig};
use protodiff::harness::{run_baseline, EvalConfig};

fn main() -> protodiff::Result<()> {
    let (_, test) = synthetic_split(&SyntheticConfig::default(), 20, 20)?;
    for k_shot in [1, 5] {
        let r = run_baseline(
            &test,
            &EvalConfig {
                k_shot,
                ..Default::default()
            },
        )?;
        println!(
            "5-way {k_shot}-shot: {:.4} ± {:.4} over {} tasks",
            r.mean, r.ci95, r.n_tasks
        );
    }
    Ok(())
}
