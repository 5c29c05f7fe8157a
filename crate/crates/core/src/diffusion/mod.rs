//! Forward process, training objective, guidance mixing and DDIM sampling.

mod loss;
mod sampler;
mod schedule;

pub use loss::{noise_mse, sample_training_noise, training_loss, training_loss_at};
pub use sampler::{
    ddim_sample, ddim_sample_from, ddim_step, ddim_timesteps, ddpm_sigma, clipped_epsilon, guided_epsilon, mix_guidance, predict_x0, NoisePredictor, SamplerConfig,
    SigmaMode,
};
pub use schedule::{forward_sample, forward_step, noised, NoiseSchedule};

pub use sampler::standard_normal;
