//! Records the prototypes at every visited timestep of one sampling chain
//! and prints how far they sit from the support means along the way.

use protodiff::data::sample_episode;
use protodiff::diffusion::{sample_prototypes, NoiseSchedule, SamplerConfig};
use protodiff::harness::RunConfig;
use protodiff::protonet::vanilla_prototypes;
use protodiff::training::meta_train;

fn main() -> protodiff::Result<()> {
    let cfg = RunConfig {
        total_episodes: 500,
        ..Default::default()
    };
    let (train, test) = cfg.datasets()?;
    let state = meta_train(&train, &cfg.train_config()?)?;
    let ep = sample_episode(&test, 5, 1, 15, 11)?;
    let vanilla = vanilla_prototypes::<f32>(&ep)?;
    let sched = NoiseSchedule::linear(cfg.steps)?;
    let sampler = SamplerConfig {
        stride: 5,
        ..Default::default()
    };
    let out = sample_prototypes(
        &state.model.for_episode(&ep.class_ids),
        &vanilla,
        &sched,
        &sampler,
        0,
        true,
    )?;
    let trace = out.trace.expect("trace was requested");
    let v = vanilla.vectors.cast::<f64>();
    for (t, p) in trace.entries() {
        println!("t={t:<3} max |z - z~| = {:.4}", p.sub(&v)?.max_abs());
    }
    let path = std::env::temp_dir().join("protodiff_trace.tsv");
    trace.write_tsv(&path)?;
    println!("full table in {}", path.display());
    Ok(())
}
