use alloc::format;
use alloc::vec::Vec;

use crate::denoiser::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Fixed variance schedule of the forward process.
///
/// Timesteps are zero-based: `alpha_bars[t] = Π_{s ≤ t} (1 − betas[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit betas, each in `(0, 1)`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidSchedule("schedule needs at least one timestep".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, &a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alphas, alpha_bars })
    }

    /// Linearly spaced betas from `beta_start` to `beta_end`.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidSchedule("T must be positive".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!("need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}")));
        }
        let betas = if steps == 1 {
            alloc::vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps).map(|t| beta_start + t as f64 * span).collect()
        };
        Self::from_betas(betas)
    }

    pub fn num_timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    /// `ᾱ_t`, with the boundary convention `ᾱ_{-1} = 1` for `None`.
    pub fn alpha_bar(&self, t: Option<usize>) -> Result<f64> {
        match t {
            None => Ok(1.0),
            Some(t) => self.alpha_bars.get(t).copied().ok_or(Error::TimestepOutOfRange { t, steps: self.num_timesteps() }),
        }
    }

    pub(crate) fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.num_timesteps() {
            return Err(Error::TimestepOutOfRange { t, steps: self.num_timesteps() });
        }
        Ok(())
    }
}

impl Default for NoiseSchedule {
    /// `T = 1000`, betas linear from `1e-4` to `0.02`.
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid default schedule")
    }
}

/// Closed-form draw from `q(x_t | x_0)`: `sqrt(ᾱ_t)·x0 + sqrt(1 − ᾱ_t)·eps`.
///
/// `t` holds one timestep per batch item (leading axis of `x0`).
pub fn forward_sample<F: Scalar>(x0: &Tensor<F>, t: &[usize], eps: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    if x0.shape() != eps.shape() {
        return Err(shape_err(x0.shape(), eps.shape()));
    }
    let n = x0.batch();
    if t.len() != n {
        return Err(Error::DimensionMismatch { expected: n, actual: t.len() });
    }
    let per = if n == 0 { 0 } else { x0.len() / n };
    let mut out = Vec::with_capacity(x0.len());
    for (i, &ti) in t.iter().enumerate() {
        schedule.check_t(ti)?;
        let xs = &x0.data()[i * per..(i + 1) * per];
        let es = &eps.data()[i * per..(i + 1) * per];
        out.extend(noised(xs, es, schedule.alpha_bars[ti]));
    }
    Tensor::new(x0.shape(), out)
}

/// `sqrt(ᾱ)·x0 + sqrt(1 − ᾱ)·eps` for an explicit `ᾱ ∈ [0, 1]`.
pub fn noised<'a, F: Scalar>(x0: &'a [F], eps: &'a [F], alpha_bar: f64) -> impl Iterator<Item = F> + 'a {
    let (a, b) = (F::lit(libm::sqrt(alpha_bar)), F::lit(libm::sqrt(1.0 - alpha_bar)));
    x0.iter().zip(eps).map(move |(&x, &e)| a * x + b * e)
}

/// One step of the Markov chain `q(x_t | x_{t-1})`:
/// `sqrt(1 − β_t)·x_prev + sqrt(β_t)·noise`.
pub fn forward_step<F: Scalar>(x_prev: &Tensor<F>, t: usize, noise: &Tensor<F>, schedule: &NoiseSchedule) -> Result<Tensor<F>> {
    schedule.check_t(t)?;
    if x_prev.shape() != noise.shape() {
        return Err(shape_err(x_prev.shape(), noise.shape()));
    }
    let beta = schedule.betas[t];
    let (a, b) = (F::lit(libm::sqrt(1.0 - beta)), F::lit(libm::sqrt(beta)));
    let data = x_prev.data().iter().zip(noise.data()).map(|(&x, &e)| a * x + b * e).collect();
    Tensor::new(x_prev.shape(), data)
}
