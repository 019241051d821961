//! The linear variance schedule and the forward noising of a residual.

use protodiff::diffusion::{forward_diffuse, predicted_eps, NoiseSchedule};
use protodiff::numerics::RngStream;

fn main() -> protodiff::Result<()> {
    let sched = NoiseSchedule::linear(100)?;
    println!("t\tbeta\talpha_bar");
    for t in [1, 10, 25, 50, 75, 100] {
        println!("{t}\t{:.6}\t{:.6}", sched.beta(t), sched.alpha_bar(t));
    }
    let mut rng = RngStream::new(1);
    let r0 = rng.gaussian::<f64>(&[5, 8]);
    let eps = rng.gaussian::<f64>(&[5, 8]);
    let r_t = forward_diffuse(&r0, 60, &eps, &sched)?;
    let back = predicted_eps(&r0, &r_t, 60, &sched)?;
    println!(
        "noise recovered from r_60 with the true signal: max error {:.2e}",
        back.sub(&eps)?.max_abs()
    );
    Ok(())
}
