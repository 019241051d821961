//! Meta-trains the desk-scale denoiser on the synthetic split and compares
//! it with vanilla prototypes on the same 600 held-out tasks.
//!
//! Pass the number of training episodes as the first argument (default 2000).

use protodiff::harness::{meta_test, run_baseline, RunConfig};
use protodiff::training::{episodes_to_threshold, meta_train};

fn main() -> protodiff::Result<()> {
    let episodes = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2000);
    let cfg = RunConfig {
        total_episodes: episodes,
        ..Default::default()
    };
    let (train, test) = cfg.datasets()?;
    let state = meta_train(&train, &cfg.train_config()?)?;
    let h = &state.history;
    let head = h.iter().take(100).map(|r| r.total).sum::<f64>() / h.len().clamp(1, 100) as f64;
    let tail = h.iter().rev().take(100).map(|r| r.total).sum::<f64>() / h.len().clamp(1, 100) as f64;
    println!("total loss {head:.3} -> {tail:.3} over {} episodes", h.len());
    if let Some(e) = episodes_to_threshold(h, 0.5, 50) {
        println!("loss halved after {e} episodes");
    }
    let eval = cfg.eval_config()?;
    let model = meta_test(&state.model, &test, &eval)?;
    let base = run_baseline(&test, &eval)?;
    println!("protodiff {:.4} ± {:.4}", model.mean, model.ci95);
    println!("baseline  {:.4} ± {:.4}", base.mean, base.ci95);
    Ok(())
}
