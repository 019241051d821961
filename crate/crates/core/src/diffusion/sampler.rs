use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schedule::{predicted_eps, NoiseSchedule};
use super::trace::DiffusionTrace;
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, softmax, Real, RngStream, Tensor};
use crate::protonet::{logits, Metric, PrototypeKind, PrototypeSet};

/// Anything that maps a noised state, the vanilla prototypes and a timestep
/// to a clean estimate.
pub trait Denoise<T: Real>: Sync {
    fn denoise(&self, state: &Tensor<T>, vanilla: &Tensor<T>, t: usize) -> Result<Tensor<T>>;

    /// True when the state is an update to be added to the vanilla
    /// prototypes; false when it is the prototypes themselves.
    fn residual(&self) -> bool {
        true
    }
}

/// Adapter for closures, mostly for tests and stubs.
pub struct FnDenoiser<F>(pub F);

impl<T: Real, F> Denoise<T> for FnDenoiser<F>
where
    F: Fn(&Tensor<T>, &Tensor<T>, usize) -> Result<Tensor<T>> + Sync,
{
    fn denoise(&self, state: &Tensor<T>, vanilla: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        (self.0)(state, vanilla, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    /// Assign the model output as the next state.
    Direct,
    /// Stochastic posterior step with fixed variance `β`.
    Ancestral,
    /// Deterministic implicit step.
    Ddim,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregate {
    MeanProbs,
    MeanPrototypes,
}

macro_rules! str_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($ty::$variant => $name),+ })
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " {:?}"), s))),
                }
            }
        }
    };
}

str_enum!(SamplerMode { Direct => "direct", Ancestral => "ancestral", Ddim => "ddim" });
str_enum!(Aggregate { MeanProbs => "mean_probs", MeanPrototypes => "mean_prototypes" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub stride: usize,
    pub mc_samples: usize,
    pub aggregate: Aggregate,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            mode: SamplerMode::Direct,
            stride: 10,
            mc_samples: 1,
            aggregate: Aggregate::MeanProbs,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.stride == 0 || self.stride > steps {
            return Err(Error::InvalidArgument(format!(
                "stride {} outside 1..={steps}",
                self.stride
            )));
        }
        if self.mc_samples == 0 {
            return Err(Error::InvalidArgument("mc_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Decreasing timesteps from `T` to 1, evenly spread, `max(2, ⌈T/stride⌉)`
/// of them. Both endpoints are always present.
pub fn ddim_timesteps(steps: usize, stride: usize) -> Vec<usize> {
    let stride = stride.clamp(1, steps.max(1));
    let n = steps.div_ceil(stride).max(2).min(steps.max(2));
    if steps <= 1 {
        return vec![1];
    }
    let span = steps - 1;
    let den = n - 1;
    (0..n).map(|i| steps - (2 * i * span + den) / (2 * den)).collect()
}

/// One literal fixed-variance reverse step from `t` to `t − 1`:
/// `(z_t − β_t/√(1 − ᾱ_t)·ε̂) / √α_t + σ_t·noise`, with no noise at `t = 1`.
pub fn ancestral_step<T: Real>(
    z_t: &Tensor<T>,
    z_hat0: &Tensor<T>,
    t: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    let eps = predicted_eps(z_hat0, z_t, t, sched)?;
    let coef = T::from_f64(sched.beta(t) / (1.0 - sched.alpha_bar(t)).sqrt());
    let inv = T::from_f64(1.0 / sched.alpha(t).sqrt());
    let sigma = T::from_f64(if t == 1 { 0.0 } else { sched.sigma(t) });
    let mean = z_t.zip_map(&eps, "ancestral_step", |z, e| (z - coef * e) * inv)?;
    mean.zip_map(noise, "ancestral_step", |m, n| m + sigma * n)
}

/// Posterior reverse step from `t` to any earlier `t_prev`, written as
/// `c0·ẑ0 + ct·z_t + σ·noise` with the effective `β = 1 − ᾱ_t/ᾱ_{t_prev}`.
/// Equals [`ancestral_step`] when `t_prev = t − 1`, and returns exactly
/// `ẑ0` at `t_prev = 0`.
pub fn ancestral_step_to<T: Real>(
    z_t: &Tensor<T>,
    z_hat0: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
    noise: &Tensor<T>,
) -> Result<Tensor<T>> {
    if t_prev >= t {
        return Err(Error::InvalidArgument(format!(
            "step must go backwards, got {t} → {t_prev}"
        )));
    }
    let (ab, ab_prev) = (sched.alpha_bar(t), sched.alpha_bar(t_prev));
    let alpha_eff = ab / ab_prev;
    let beta_eff = 1.0 - alpha_eff;
    let c0 = T::from_f64(ab_prev.sqrt() * beta_eff / (1.0 - ab));
    let ct = T::from_f64(alpha_eff.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
    let sigma = T::from_f64(if t_prev == 0 { 0.0 } else { beta_eff.sqrt() });
    let mean = z_hat0.zip_map(z_t, "ancestral_step", |x, z| c0 * x + ct * z)?;
    mean.zip_map(noise, "ancestral_step", |m, n| m + sigma * n)
}

/// Deterministic implicit step: `√ᾱ_{t_prev}·ẑ0 + √(1 − ᾱ_{t_prev})·ε̂`.
pub fn ddim_step<T: Real>(
    z_t: &Tensor<T>,
    z_hat0: &Tensor<T>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor<T>> {
    let eps = predicted_eps(z_hat0, z_t, t, sched)?;
    let ab_prev = sched.alpha_bar(t_prev);
    let (a, b) = (T::from_f64(ab_prev.sqrt()), T::from_f64((1.0 - ab_prev).sqrt()));
    z_hat0.zip_map(&eps, "ddim_step", |x, e| a * x + b * e)
}

/// Next state is the model output itself.
pub fn direct_step<T: Real, D: Denoise<T> + ?Sized>(
    z_t: &Tensor<T>,
    vanilla: &Tensor<T>,
    t: usize,
    denoiser: &D,
) -> Result<Tensor<T>> {
    denoiser.denoise(z_t, vanilla, t)
}

/// Sampled prototypes from `M` independent chains.
#[derive(Clone, Debug)]
pub struct SampleOutput<T> {
    pub chains: Vec<PrototypeSet<T>>,
    pub trace: Option<DiffusionTrace>,
}

impl<T: Real> SampleOutput<T> {
    /// Element-wise mean of the chains' prototypes.
    pub fn mean_prototypes(&self) -> Result<PrototypeSet<T>> {
        let mut acc = self.chains[0].vectors.clone();
        for c in &self.chains[1..] {
            acc = acc.add(&c.vectors)?;
        }
        let m = T::from_usize(self.chains.len());
        let v = if self.chains.len() == 1 {
            acc
        } else {
            acc.map(|x| x / m)
        };
        PrototypeSet::new(PrototypeKind::Diffused, v)
    }

    /// Class probabilities for `queries`, aggregated across chains.
    pub fn class_probs(&self, queries: &Tensor<T>, metric: Metric, aggregate: Aggregate) -> Result<Tensor<T>> {
        match aggregate {
            Aggregate::MeanPrototypes => softmax(&logits(queries, &self.mean_prototypes()?.vectors, metric)?, 1),
            Aggregate::MeanProbs => {
                let mut acc: Option<Tensor<T>> = None;
                for c in &self.chains {
                    let p = softmax(&logits(queries, &c.vectors, metric)?, 1)?;
                    acc = Some(match acc {
                        None => p,
                        Some(a) => a.add(&p)?,
                    });
                }
                let acc = acc.expect("at least one chain");
                if self.chains.len() == 1 {
                    return Ok(acc);
                }
                let m = T::from_usize(self.chains.len());
                Ok(acc.map(|x| x / m))
            }
        }
    }
}

/// Runs one chain from `z_T ~ N(0, I)` over the strided timesteps.
fn run_chain<T: Real, D: Denoise<T> + ?Sized>(
    denoiser: &D,
    vanilla: &Tensor<T>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
    mut trace: Option<&mut DiffusionTrace>,
) -> Result<Tensor<T>> {
    let shape = vanilla.shape().to_vec();
    let steps = ddim_timesteps(sched.steps(), cfg.stride);
    let residual = denoiser.residual();
    let to_protos = |state: &Tensor<T>| -> Result<Tensor<T>> {
        if residual {
            vanilla.add(state)
        } else {
            Ok(state.clone())
        }
    };
    let mut z = rng.gaussian::<T>(&shape);
    for (i, &t) in steps.iter().enumerate() {
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(t, &to_protos(&z)?)?;
        }
        let t_prev = steps.get(i + 1).copied().unwrap_or(0);
        z = match cfg.mode {
            SamplerMode::Direct => direct_step(&z, vanilla, t, denoiser)?,
            SamplerMode::Ancestral => {
                let x0 = denoiser.denoise(&z, vanilla, t)?;
                let noise = rng.gaussian::<T>(&shape);
                ancestral_step_to(&z, &x0, t, t_prev, sched, &noise)?
            }
            SamplerMode::Ddim => {
                let x0 = denoiser.denoise(&z, vanilla, t)?;
                if t_prev == 0 {
                    x0
                } else {
                    ddim_step(&z, &x0, t, t_prev, sched)?
                }
            }
        };
        if !z.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t = {t}")));
        }
    }
    let out = to_protos(&z)?;
    if let Some(tr) = trace {
        tr.push(0, &out)?;
    }
    Ok(out)
}

/// Draws `cfg.mc_samples` chains. Chain `m` uses the stream
/// `derive_seed(seed, m)`, so chain 0 is the same whatever `M` is.
pub fn sample_prototypes<T: Real, D: Denoise<T> + ?Sized>(
    denoiser: &D,
    vanilla: &PrototypeSet<T>,
    sched: &NoiseSchedule,
    cfg: &SamplerConfig,
    seed: u64,
    record_trace: bool,
) -> Result<SampleOutput<T>> {
    cfg.validate(sched.steps())?;
    let mut trace = record_trace.then(|| DiffusionTrace::new(vanilla.n_way(), vanilla.dim()));
    let mut chains = Vec::with_capacity(cfg.mc_samples);
    for m in 0..cfg.mc_samples {
        let mut rng = RngStream::new(derive_seed(seed, m as u64));
        let tr = if m == 0 { trace.as_mut() } else { None };
        let v = run_chain(denoiser, &vanilla.vectors, sched, cfg, &mut rng, tr)?;
        chains.push(PrototypeSet::new(PrototypeKind::Diffused, v)?);
    }
    Ok(SampleOutput { chains, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::forward_diffuse;

    fn zero_model() -> FnDenoiser<impl Fn(&Tensor<f64>, &Tensor<f64>, usize) -> Result<Tensor<f64>> + Sync> {
        FnDenoiser(|s: &Tensor<f64>, _: &Tensor<f64>, _| Ok(Tensor::zeros(s.shape().to_vec())))
    }

    #[test]
    fn timestep_examples() {
        assert_eq!(ddim_timesteps(100, 10).len(), 10);
        assert_eq!(ddim_timesteps(100, 10), vec![100, 89, 78, 67, 56, 45, 34, 23, 12, 1]);
        assert_eq!(ddim_timesteps(100, 1), (1..=100).rev().collect::<Vec<_>>());
        assert_eq!(ddim_timesteps(100, 100), vec![100, 1]);
        assert_eq!(ddim_timesteps(2, 1), vec![2, 1]);
    }

    proptest::proptest! {
        #[test]
        fn timesteps_decrease_and_keep_endpoints(steps in 2usize..500, stride_frac in 0.0f64..1.0) {
            let stride = 1 + ((steps - 1) as f64 * stride_frac) as usize;
            let ts = ddim_timesteps(steps, stride);
            proptest::prop_assert_eq!(ts[0], steps);
            proptest::prop_assert_eq!(*ts.last().unwrap(), 1);
            proptest::prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
            proptest::prop_assert_eq!(ts.len(), steps.div_ceil(stride).max(2));
        }
    }

    #[test]
    fn zero_model_returns_vanilla_in_every_mode() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(5);
        let v = PrototypeSet::new(PrototypeKind::Vanilla, rng.gaussian::<f64>(&[5, 8])).unwrap();
        for mode in [SamplerMode::Direct, SamplerMode::Ancestral, SamplerMode::Ddim] {
            for stride in [1, 10, 100] {
                let cfg = SamplerConfig {
                    mode,
                    stride,
                    mc_samples: 3,
                    ..Default::default()
                };
                let out = sample_prototypes(&zero_model(), &v, &sched, &cfg, 9, false).unwrap();
                for c in &out.chains {
                    assert_eq!(c.vectors, v.vectors, "{mode} stride {stride}");
                }
            }
        }
    }

    #[test]
    fn eq7_closed_loop_recovers_signal() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(12);
        let r0: Tensor<f64> = rng.gaussian(&[5, 8]);
        let zero = Tensor::zeros(vec![5, 8]);
        let mut z: Tensor<f64> = rng.gaussian(&[5, 8]);
        for t in (1..=100).rev() {
            z = ancestral_step(&z, &r0, t, &sched, &zero).unwrap();
        }
        assert!(z.sub(&r0).unwrap().max_abs() <= 1e-6);
    }

    #[test]
    fn posterior_form_equals_eq7_for_unit_steps() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(13);
        for t in [1, 2, 50, 100] {
            let z: Tensor<f64> = rng.gaussian(&[3, 4]);
            let x0: Tensor<f64> = rng.gaussian(&[3, 4]);
            let n: Tensor<f64> = rng.gaussian(&[3, 4]);
            let a = ancestral_step(&z, &x0, t, &sched, &n).unwrap();
            let b = ancestral_step_to(&z, &x0, t, t - 1, &sched, &n).unwrap();
            assert!(a.sub(&b).unwrap().max_abs() < 1e-9, "t = {t}");
        }
    }

    #[test]
    fn first_step_ignores_noise() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(14);
        let z: Tensor<f64> = rng.gaussian(&[2, 3]);
        let x0: Tensor<f64> = rng.gaussian(&[2, 3]);
        let n1: Tensor<f64> = rng.gaussian(&[2, 3]);
        let n2: Tensor<f64> = rng.gaussian(&[2, 3]);
        assert_eq!(
            ancestral_step(&z, &x0, 1, &sched, &n1).unwrap(),
            ancestral_step(&z, &x0, 1, &sched, &n2).unwrap()
        );
        let zero = Tensor::<f64>::zeros(vec![2, 3]);
        assert_eq!(ancestral_step(&zero, &zero, 40, &sched, &zero).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn ddim_with_exact_estimate_follows_the_forward_path() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let mut rng = RngStream::new(15);
        let r0: Tensor<f64> = rng.gaussian(&[2, 3]);
        let eps: Tensor<f64> = rng.gaussian(&[2, 3]);
        let z = forward_diffuse(&r0, 80, &eps, &sched).unwrap();
        let next = ddim_step(&z, &r0, 80, 40, &sched).unwrap();
        let expect = forward_diffuse(&r0, 40, &eps, &sched).unwrap();
        assert!(next.sub(&expect).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn direct_mode_is_idempotent_at_a_fixed_point() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let c = Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]).unwrap();
        let stub = FnDenoiser(|_: &Tensor<f64>, _: &Tensor<f64>, _| Ok(c.clone()));
        let once = direct_step(&c, &c, 7, &stub).unwrap();
        let twice = direct_step(&once, &c, 6, &stub).unwrap();
        assert_eq!(once, twice);
        let v = PrototypeSet::new(PrototypeKind::Vanilla, Tensor::zeros(vec![2, 2])).unwrap();
        let out = sample_prototypes(&stub, &v, &sched, &SamplerConfig::default(), 1, false).unwrap();
        assert_eq!(out.chains[0].vectors, c);
    }

    #[test]
    fn sampling_is_deterministic_and_trace_matches_timesteps() {
        let sched = NoiseSchedule::linear(100).unwrap();
        let shrink = FnDenoiser(|s: &Tensor<f64>, _: &Tensor<f64>, _| Ok(s.scale(0.5)));
        let v = PrototypeSet::new(PrototypeKind::Vanilla, RngStream::new(3).gaussian(&[3, 4])).unwrap();
        let cfg = SamplerConfig {
            mode: SamplerMode::Ancestral,
            ..Default::default()
        };
        let a = sample_prototypes(&shrink, &v, &sched, &cfg, 77, true).unwrap();
        let b = sample_prototypes(&shrink, &v, &sched, &cfg, 77, true).unwrap();
        assert_eq!(a.chains[0].vectors, b.chains[0].vectors);
        let tr = a.trace.unwrap();
        let mut expect = ddim_timesteps(100, 10);
        expect.push(0);
        assert_eq!(tr.timesteps(), expect);
        assert_eq!(tr.final_prototypes().unwrap(), &a.chains[0].vectors.cast::<f64>());
    }

    #[test]
    fn mean_probs_average_chains() {
        let sched = NoiseSchedule::linear(10).unwrap();
        let noisy = FnDenoiser(|s: &Tensor<f64>, _: &Tensor<f64>, _| Ok(s.clone()));
        let v = PrototypeSet::new(PrototypeKind::Vanilla, Tensor::zeros(vec![2, 2])).unwrap();
        let cfg = SamplerConfig {
            mc_samples: 4,
            stride: 1,
            ..Default::default()
        };
        let out = sample_prototypes(&noisy, &v, &sched, &cfg, 5, false).unwrap();
        let q = Tensor::from_rows(&[vec![0.3, 0.1]]).unwrap();
        let p = out
            .class_probs(&q, Metric::SquaredEuclidean, Aggregate::MeanProbs)
            .unwrap();
        let mut expect = [0.0; 2];
        for c in &out.chains {
            let pc = softmax(&logits(&q, &c.vectors, Metric::SquaredEuclidean).unwrap(), 1).unwrap();
            expect[0] += pc.data()[0] / 4.0;
            expect[1] += pc.data()[1] / 4.0;
        }
        assert!((p.data()[0] - expect[0]).abs() < 1e-15);
        // chain 0 does not depend on how many chains are drawn
        let single = sample_prototypes(&noisy, &v, &sched, &SamplerConfig { mc_samples: 1, ..cfg }, 5, false).unwrap();
        assert_eq!(single.chains[0].vectors, out.chains[0].vectors);
    }
}
