//! Finite-difference check of the full training loss on a tiny denoiser.

use protodiff::data::{generate_synthetic, sample_episode, SyntheticConfig};
use protodiff::denoiser::{DenoiserConfig, DenoiserModel};
use protodiff::numerics::gradcheck::check_gradients;
use protodiff::numerics::Tensor;
use protodiff::overfit::OverfitCache;
use protodiff::training::{denoiser_config_for, episode_loss_var, episode_seed, EpisodeInputs, TrainConfig};

fn main() -> protodiff::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig {
        dim: 4,
        n_classes: 5,
        samples_per_class: 10,
        ..Default::default()
    })?;
    let cfg = TrainConfig {
        n_way: 3,
        q_query: 3,
        denoiser: DenoiserConfig::tiny(4, 3),
        ..Default::default()
    };
    let model = DenoiserModel::<f64>::new(denoiser_config_for(&cfg, &ds), ds.classes())?;
    let ep = sample_episode(&ds, cfg.n_way, cfg.k_shot, cfg.q_query, episode_seed(cfg.seed, 0))?;
    let z_star = OverfitCache::new().get_or_fit(&ep, &cfg.overfit, cfg.metric)?;
    let x = EpisodeInputs::new(&ep, &z_star, cfg.denoiser.steps)?;
    let sched = cfg.schedule()?;
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let report = check_gradients(&params, |tape, vars| {
        Ok(episode_loss_var(tape, &model, vars, &x, &sched, cfg.beta, cfg.metric)?.total)
    })?;
    let (p, i) = report.worst;
    println!(
        "{} parameters checked, max relative error {:.2e} (at {}[{i}]), max absolute error {:.2e}",
        report.n_checked,
        report.max_rel_error,
        model.params()[p].0,
        report.max_abs_error
    );
    Ok(())
}
