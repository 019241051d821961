//! Averaging class probabilities over several sampling chains.

use protodiff::diffusion::Aggregate;
use protodiff::harness::{meta_test, RunConfig};
use protodiff::training::meta_train;

fn main() -> protodiff::Result<()> {
    let cfg = RunConfig {
        total_episodes: 1000,
        n_tasks: 300,
        ..Default::default()
    };
    let (train, test) = cfg.datasets()?;
    let state = meta_train(&train, &cfg.train_config()?)?;
    for m in [1, 4, 16] {
        for aggregate in [Aggregate::MeanProbs, Aggregate::MeanPrototypes] {
            let mut eval = cfg.eval_config()?;
            eval.sampler.mc_samples = m;
            eval.sampler.aggregate = aggregate;
            let r = meta_test(&state.model, &test, &eval)?;
            println!("M={m:<2} {aggregate:<15} {:.4} ± {:.4}", r.mean, r.ci95);
        }
    }
    Ok(())
}
