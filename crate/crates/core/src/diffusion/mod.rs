//! Noise schedule, forward noising and the reverse samplers.
//!
//! Everything runs in residual space: the state is an update to the vanilla
//! prototypes, which are added back once sampling ends.

mod sampler;
mod schedule;
mod trace;

pub use sampler::{
    ancestral_step, ancestral_step_to, ddim_step, ddim_timesteps, direct_step, sample_prototypes, Aggregate, Denoise,
    FnDenoiser, SampleOutput, SamplerConfig, SamplerMode,
};
pub use schedule::{forward_diffuse, predicted_eps, NoiseSchedule, BETA_END, BETA_START};
pub use trace::DiffusionTrace;
