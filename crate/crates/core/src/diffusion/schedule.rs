use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 1e-2;

/// Linear variance schedule. Arrays are indexed by timestep `0..=T`; index 0
/// is the clean state with `ᾱ_0 = 1` and `β_0 = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_t = (β_start·(T − t) + β_end·(t − 1)) / (T − 1)` for `t = 1..=T`.
    pub fn linear(steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::InvalidArgument(format!(
                "schedule needs at least 2 steps, got {steps}"
            )));
        }
        let tm1 = (steps - 1) as f64;
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            let b = (BETA_START * (steps - t) as f64 + BETA_END * (t - 1) as f64) / tm1;
            betas[t] = b;
            alphas[t] = 1.0 - b;
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        Ok(NoiseSchedule {
            steps,
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Standard deviation of the reverse-step noise, `σ_t = √β_t`.
    pub fn sigma(&self, t: usize) -> f64 {
        self.betas[t].sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize, op: &'static str) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!(
                "{op}: timestep {t} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// Noised state `√ᾱ_t·r0 + √(1 − ᾱ_t)·ε`.
pub fn forward_diffuse<T: Real>(r0: &Tensor<T>, t: usize, eps: &Tensor<T>, sched: &NoiseSchedule) -> Result<Tensor<T>> {
    sched.check_t(t, "forward_diffuse")?;
    same_shape("forward_diffuse", r0, eps)?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (T::from_f64(ab.sqrt()), T::from_f64((1.0 - ab).sqrt()));
    r0.zip_map(eps, "forward_diffuse", |x, e| a * x + b * e)
}

/// Noise implied by a clean estimate: `(z_t − √ᾱ_t·ẑ0) / √(1 − ᾱ_t)`.
pub fn predicted_eps<T: Real>(
    z_hat0: &Tensor<T>,
    z_t: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    if t == 0 {
        return Err(Error::InvalidArgument("noise is undefined at t = 0 where ᾱ = 1".into()));
    }
    sched.check_t(t, "predicted_eps")?;
    same_shape("predicted_eps", z_hat0, z_t)?;
    let ab = sched.alpha_bar(t);
    let (a, inv) = (T::from_f64(ab.sqrt()), T::from_f64(1.0 / (1.0 - ab).sqrt()));
    z_t.zip_map(z_hat0, "predicted_eps", |z, x| (z - a * x) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    #[test]
    fn endpoints_are_exact() {
        for steps in [10, 100, 1000] {
            let s = NoiseSchedule::linear(steps).unwrap();
            assert_eq!(s.beta(1), 1e-4);
            assert_eq!(s.beta(steps), 1e-2);
        }
    }

    #[test]
    fn midpoint_value() {
        let s = NoiseSchedule::linear(100).unwrap();
        // (1e-4·50 + 1e-2·49) / 99
        assert!((s.beta(50) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn too_short_is_rejected() {
        assert!(NoiseSchedule::linear(1).is_err());
        assert!(NoiseSchedule::linear(0).is_err());
    }

    #[test]
    fn alpha_bar_strictly_decreases() {
        let s = NoiseSchedule::linear(1000).unwrap();
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        for t in 1..=1000 {
            assert!((s.sigma(t).powi(2) - s.beta(t)).abs() <= 1e-15 * s.beta(t));
            assert_eq!(s.alpha(t), 1.0 - s.beta(t));
        }
    }

    #[test]
    fn zero_noise_and_zero_signal() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(1);
        let r0: Tensor<f64> = rng.gaussian(&[3, 4]);
        let eps: Tensor<f64> = rng.gaussian(&[3, 4]);
        let zero = Tensor::zeros(vec![3, 4]);
        let a = forward_diffuse(&r0, 40, &zero, &s).unwrap();
        assert_eq!(a, r0.scale(s.alpha_bar(40).sqrt()));
        let b = forward_diffuse(&zero, 40, &eps, &s).unwrap();
        assert_eq!(b, eps.scale((1.0 - s.alpha_bar(40)).sqrt()));
        assert!(forward_diffuse(&r0, 0, &eps, &s).is_err());
    }

    #[test]
    fn eps_inversion_cases() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(2);
        let r0: Tensor<f64> = rng.gaussian(&[2, 5]);
        let eps: Tensor<f64> = rng.gaussian(&[2, 5]);
        for t in [1, 17, 100] {
            let zt = forward_diffuse(&r0, t, &eps, &s).unwrap();
            let back = predicted_eps(&r0, &zt, t, &s).unwrap();
            assert!(back.sub(&eps).unwrap().max_abs() <= 1e-10);
            let consistent = zt.scale(1.0 / s.alpha_bar(t).sqrt());
            assert!(predicted_eps(&consistent, &zt, t, &s).unwrap().max_abs() <= 1e-12);
        }
        assert!(predicted_eps(&r0, &r0, 0, &s).is_err());
    }

    #[test]
    fn eps_matches_rearranged_formula() {
        let s = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(3);
        let x: Tensor<f64> = rng.gaussian(&[6]);
        let z: Tensor<f64> = rng.gaussian(&[6]);
        let got = predicted_eps(&x, &z, 33, &s).unwrap();
        // z = √ᾱ x + √(1−ᾱ) ε, solved for ε by hand
        let ab: f64 = (1..=33)
            .map(|t| 1.0 - (1e-4 * (100 - t) as f64 + 1e-2 * (t - 1) as f64) / 99.0)
            .product();
        for i in 0..6 {
            let e = (z.data()[i] - ab.sqrt() * x.data()[i]) / (1.0 - ab).sqrt();
            assert!((got.data()[i] - e).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn variance_budget_is_one(steps in 2usize..400, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::linear(steps).unwrap();
            let t = 1 + ((steps - 1) as f64 * frac) as usize;
            let ab = s.alpha_bar(t);
            prop_assert!((ab + (1.0 - ab) - 1.0).abs() <= 1e-15);
            prop_assert!(ab > 0.0 && ab < 1.0);
        }
    }
}
