//! Classifier-free guidance mixing and the DDIM sampler.
//!
//! Guidance follows the convention `(1 − w)·ε(x_t) + w·ε(x_t; k)`: `w = 0`
//! is the unconditional model, `w = 1` the conditional one and `w > 1`
//! extrapolates toward the condition. This differs from the `(1 + w, −w)`
//! parameterisation used elsewhere.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{GuidanceSignal, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

use super::schedule::NoiseSchedule;

/// Anything that predicts the noise in a batch of noisy images.
pub trait NoisePredictor<F: Scalar> {
    /// `[C, H, W]` of the images this predictor works on.
    fn image_shape(&self) -> [usize; 3];

    /// ε_θ(x_t, t; k) for a batch; `t` and `guidance` hold one entry per item.
    fn predict_noise(&self, x_t: &Tensor<F>, t: &[usize], guidance: &[GuidanceSignal]) -> Result<Tensor<F>>;
}

impl<F: Scalar, P: NoisePredictor<F> + ?Sized> NoisePredictor<F> for &P {
    fn image_shape(&self) -> [usize; 3] {
        (**self).image_shape()
    }

    fn predict_noise(&self, x_t: &Tensor<F>, t: &[usize], guidance: &[GuidanceSignal]) -> Result<Tensor<F>> {
        (**self).predict_noise(x_t, t, guidance)
    }
}

/// How σ_t is chosen at each DDIM step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum SigmaMode {
    /// Deterministic sampling (σ_t = 0).
    Zero,
    /// σ_t matching the DDPM posterior variance on the strided sequence.
    DdpmEquivalent,
}

/// DDIM sampling settings.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub sigma_mode: SigmaMode,
    pub guidance_strength: f64,
    /// Clip the clean-image estimate to `[-1, 1]` at every step and step with
    /// the noise implied by the clipped estimate. Off by default: the chain
    /// is then left unbiased and only the final sample is clipped. Briefly
    /// trained models need it, because errors in ε̂ at large t are amplified
    /// by `1 / sqrt(ᾱ_t)` in the clean-image estimate.
    pub clip_denoised: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 250, sigma_mode: SigmaMode::Zero, guidance_strength: 1.0, clip_denoised: false }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.num_timesteps() {
            return Err(Error::InvalidConfig(alloc::format!(
                "num_steps {} must be in 1..={}",
                self.num_steps,
                schedule.num_timesteps()
            )));
        }
        if !(self.guidance_strength >= 0.0 && self.guidance_strength.is_finite()) {
            return Err(Error::InvalidConfig(alloc::format!("guidance strength {} must be finite and >= 0", self.guidance_strength)));
        }
        Ok(())
    }
}

/// Evenly spaced increasing timesteps `τ_0 = 0 < … < τ_{S−1} = T − 1`.
pub fn ddim_timesteps(num_steps: usize, num_timesteps: usize) -> Result<Vec<usize>> {
    if num_steps == 0 || num_steps > num_timesteps {
        return Err(Error::InvalidConfig(alloc::format!("num_steps {num_steps} must be in 1..={num_timesteps}")));
    }
    if num_steps == 1 {
        return Ok(alloc::vec![num_timesteps - 1]);
    }
    Ok((0..num_steps).map(|i| i * (num_timesteps - 1) / (num_steps - 1)).collect())
}

/// Mixes unconditional and conditional predictions with strength `w`.
///
/// Evaluated as `u + w·(c − u)`, which equals `(1 − w)·u + w·c`; the end
/// points `w = 0` and `w = 1` return `u` and `c` unchanged.
pub fn mix_guidance<F: Scalar>(uncond: &[F], cond: &[F], w: f64) -> Vec<F> {
    if w == 0.0 {
        return uncond.to_vec();
    }
    if w == 1.0 {
        return cond.to_vec();
    }
    let wf = F::lit(w);
    uncond.iter().zip(cond).map(|(&u, &c)| u + wf * (c - u)).collect()
}

/// Classifier-free guided noise estimate.
///
/// For `0 < w < ∞, w ≠ 1` the conditional and null signals are evaluated as
/// one batch of size `2N`; `w = 0` and `w = 1` need only one branch.
pub fn guided_epsilon<F: Scalar, P: NoisePredictor<F> + ?Sized>(
    denoiser: &P,
    x_t: &Tensor<F>,
    t: &[usize],
    guidance: &[GuidanceSignal],
    w: f64,
) -> Result<Tensor<F>> {
    let nulls: Vec<GuidanceSignal> = guidance.iter().map(GuidanceSignal::null).collect();
    if w == 0.0 {
        return denoiser.predict_noise(x_t, t, &nulls);
    }
    if w == 1.0 {
        return denoiser.predict_noise(x_t, t, guidance);
    }
    let n = x_t.batch();
    let x2 = Tensor::stack_batch(&[x_t, x_t])?;
    let t2: Vec<usize> = t.iter().chain(t).copied().collect();
    let g2: Vec<GuidanceSignal> = guidance.iter().cloned().chain(nulls).collect();
    let both = denoiser.predict_noise(&x2, &t2, &g2)?;
    if both.batch() != 2 * n {
        return Err(shape_err(&[2 * n], &[both.batch()]));
    }
    let half = both.len() / 2;
    let (cond, uncond) = both.data().split_at(half);
    Tensor::new(x_t.shape(), mix_guidance(uncond, cond, w))
}

/// σ_t for the DDPM-equivalent setting (η = 1).
pub fn ddpm_sigma(alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    libm::sqrt((1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * (1.0 - alpha_bar_t / alpha_bar_prev)).max(0.0)
}

/// One DDIM update from `t` to `t_prev` (`None` is the clean-image boundary, `ᾱ = 1`).
///
/// `noise` is only read when `sigma_t > 0`.
#[allow(clippy::too_many_arguments)]
pub fn ddim_step<F: Scalar>(
    x_t: &Tensor<F>,
    eps_hat: &Tensor<F>,
    t: usize,
    t_prev: Option<usize>,
    sigma_t: f64,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor<F>>,
) -> Result<Tensor<F>> {
    if x_t.shape() != eps_hat.shape() {
        return Err(shape_err(x_t.shape(), eps_hat.shape()));
    }
    schedule.check_t(t)?;
    if let Some(tp) = t_prev {
        if tp >= t {
            return Err(Error::InvalidConfig(alloc::format!("t_prev {tp} must be < t {t}")));
        }
    }
    if !(sigma_t >= 0.0) {
        return Err(Error::InvalidConfig(alloc::format!("sigma_t {sigma_t} must be >= 0")));
    }
    let ab = schedule.alpha_bar(Some(t))?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let sigma_sq = sigma_t * sigma_t;
    let limit = 1.0 - ab_prev;
    if sigma_sq > limit + 1e-12 {
        return Err(Error::ImaginaryCoefficient { sigma_sq, limit });
    }
    debug_assert!(ab > 0.0 && ab < 1.0);
    let dir_coef = libm::sqrt((limit - sigma_sq).max(0.0));
    let (sqrt_ab, sqrt_1m_ab, sqrt_ab_prev) = (F::lit(libm::sqrt(ab)), F::lit(libm::sqrt(1.0 - ab)), F::lit(libm::sqrt(ab_prev)));
    let dir = F::lit(dir_coef);
    let mut out: Vec<F> = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| {
            let x0_hat = (x - sqrt_1m_ab * e) / sqrt_ab;
            sqrt_ab_prev * x0_hat + dir * e
        })
        .collect();
    if sigma_t > 0.0 {
        let noise = noise.ok_or_else(|| Error::InvalidConfig("sigma_t > 0 requires a noise tensor".into()))?;
        if noise.shape() != x_t.shape() {
            return Err(shape_err(x_t.shape(), noise.shape()));
        }
        let s = F::lit(sigma_t);
        out.iter_mut().zip(noise.data()).for_each(|(o, &z)| *o += s * z);
    }
    Tensor::new(x_t.shape(), out)
}

/// The clean-image estimate `x̂0 = (x_t − sqrt(1 − ᾱ_t)·ε̂) / sqrt(ᾱ_t)`.
pub fn predict_x0<F: Scalar>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(shape_err(x_t.shape(), eps_hat.shape()));
    }
    let ab = schedule.alpha_bars()[t];
    let (a, b) = (F::lit(libm::sqrt(1.0 - ab)), F::lit(libm::sqrt(ab)));
    Tensor::new(x_t.shape(), x_t.data().iter().zip(eps_hat.data()).map(|(&x, &e)| (x - a * e) / b).collect())
}

/// Noise consistent with `x_t` and the clipped clean-image estimate:
/// `(x_t − sqrt(ᾱ_t)·clip(x̂0)) / sqrt(1 − ᾱ_t)`.
pub fn clipped_epsilon<F: Scalar>(x_t: &Tensor<F>, eps_hat: &Tensor<F>, t: usize, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    let x0 = predict_x0(x_t, eps_hat, t, schedule)?;
    let ab = schedule.alpha_bars()[t];
    let (a, b) = (F::lit(libm::sqrt(ab)), F::lit(libm::sqrt(1.0 - ab)));
    let (lo, hi) = (F::lit(-1.0), F::lit(1.0));
    let data = x_t.data().iter().zip(x0.data()).map(|(&x, &x0)| (x - a * x0.max(lo).min(hi)) / b).collect();
    Tensor::new(x_t.shape(), data)
}

pub fn standard_normal<F: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<F> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::lit(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Generates one image per guidance signal with guided DDIM.
///
/// Starts from standard normal `x_T`, walks the strided timestep sequence
/// downward and clips the result to `[-1, 1]` only after the final step.
pub fn ddim_sample<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    denoiser: &P,
    guidance: &[GuidanceSignal],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<F>> {
    let x_t = {
        let [c, h, w] = denoiser.image_shape();
        standard_normal(&[guidance.len(), c, h, w], rng)
    };
    ddim_sample_from(denoiser, x_t, guidance, sampler, schedule, rng)
}

/// [`ddim_sample`] from a caller-provided `x_T`.
pub fn ddim_sample_from<F: Scalar, P: NoisePredictor<F> + ?Sized, R: Rng + ?Sized>(
    denoiser: &P,
    x_start: Tensor<F>,
    guidance: &[GuidanceSignal],
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor<F>> {
    sampler.validate(schedule)?;
    let n = x_start.batch();
    if guidance.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: guidance.len() });
    }
    let steps = ddim_timesteps(sampler.num_steps, schedule.num_timesteps())?;
    let mut x = x_start;
    for (i, &t) in steps.iter().enumerate().rev() {
        let t_prev = if i == 0 { None } else { Some(steps[i - 1]) };
        let ts = alloc::vec![t; n];
        let mut eps = guided_epsilon(denoiser, &x, &ts, guidance, sampler.guidance_strength)?;
        if sampler.clip_denoised {
            eps = clipped_epsilon(&x, &eps, t, schedule)?;
        }
        let sigma = match sampler.sigma_mode {
            SigmaMode::Zero => 0.0,
            SigmaMode::DdpmEquivalent => ddpm_sigma(schedule.alpha_bars()[t], schedule.alpha_bar(t_prev)?),
        };
        let noise = (sigma > 0.0).then(|| standard_normal::<F, _>(x.shape(), rng));
        x = ddim_step(&x, &eps, t, t_prev, sigma, schedule, noise.as_ref())?;
    }
    let (lo, hi) = (F::lit(-1.0), F::lit(1.0));
    Ok(x.map(|v| v.max(lo).min(hi)))
}
