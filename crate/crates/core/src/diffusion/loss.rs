use alloc::vec::Vec;

use rand::Rng;

use crate::denoiser::{GuidanceSignal, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::sampler::{standard_normal, NoisePredictor};
use super::schedule::{forward_sample, NoiseSchedule};

/// Draws `t ~ Uniform{0..T-1}` per item and `eps ~ N(0, I)` for a batch.
pub fn sample_training_noise<F: Scalar, R: Rng + ?Sized>(shape: &[usize], schedule: &NoiseSchedule, rng: &mut R) -> (Vec<usize>, Tensor<F>) {
    let n = shape.first().copied().unwrap_or(0);
    let t = (0..n).map(|_| rng.random_range(0..schedule.num_timesteps())).collect();
    (t, standard_normal(shape, rng))
}

/// Mean squared error between predicted and true noise.
pub fn noise_mse<F: Scalar>(pred: &Tensor<F>, eps: &Tensor<F>) -> Result<f64> {
    if pred.shape() != eps.shape() {
        return Err(crate::error::shape_err(eps.shape(), pred.shape()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let sum: f64 = pred.data().iter().zip(eps.data()).map(|(&p, &e)| { let d = (p - e).as_f64(); d * d }).sum();
    Ok(sum / pred.len() as f64)
}

/// Denoising objective `||ε_θ(x_t, t; k) − ε||²`, averaged over elements.
pub fn training_loss<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    denoiser: &P,
    x0: &Tensor<F>,
    guidance: &[GuidanceSignal],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let (t, eps) = sample_training_noise::<F, _>(x0.shape(), schedule, rng);
    training_loss_at(denoiser, x0, guidance, &t, &eps, schedule)
}

/// [`training_loss`] at fixed timesteps and noise.
pub fn training_loss_at<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    denoiser: &P,
    x0: &Tensor<F>,
    guidance: &[GuidanceSignal],
    t: &[usize],
    eps: &Tensor<F>,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let x_t = forward_sample(x0, t, eps, schedule)?;
    let pred = denoiser.predict_noise(&x_t, t, guidance)?;
    noise_mse(&pred, eps)
}
