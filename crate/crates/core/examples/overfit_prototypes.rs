//! Fits prototypes to one episode's support and query sets and shows how
//! far they move from the support means.

use protodiff::data::{generate_synthetic, sample_episode, SyntheticConfig};
use protodiff::overfit::{overfit_prototypes, OverfitConfig};
use protodiff::protonet::{evaluate_accuracy, vanilla_prototypes, Metric};

fn main() -> protodiff::Result<()> {
    let ds = generate_synthetic(&SyntheticConfig::default())?;
    let ep = sample_episode(&ds, 5, 1, 15, 3)?;
    let vanilla = vanilla_prototypes::<f64>(&ep)?;
    let fit = overfit_prototypes(&ep, &vanilla, &OverfitConfig::default(), Metric::SquaredEuclidean)?;
    let trace = &fit.loss_trace;
    println!(
        "mean CE {:.4} -> {:.4} in {} iterations",
        trace[0],
        trace[trace.len() - 1],
        fit.iterations_used
    );
    println!(
        "query accuracy: vanilla {:.3}, fitted {:.3}",
        evaluate_accuracy(&ep, &vanilla, Metric::SquaredEuclidean)?,
        evaluate_accuracy(&ep, &fit.z_star, Metric::SquaredEuclidean)?
    );
    let shift = fit.z_star.vectors.sub(&vanilla.vectors)?;
    for c in 0..5 {
        let norm = shift.row(c).iter().map(|x| x * x).sum::<f64>().sqrt();
        println!("class {c}: |z* - z~| = {norm:.4}");
    }
    Ok(())
}
