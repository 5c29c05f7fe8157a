use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Inception-style score over `splits` contiguous chunks of `probs`.
///
/// Returns the mean and (population) standard deviation of
/// `exp(E_x KL(p(y|x) ‖ p(y)))` across splits, with `p(y)` the split marginal.
pub fn inception_score<R: AsRef<[f64]>>(probs: &[R], splits: usize) -> Result<(f64, f64)> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if splits == 0 || splits > probs.len() {
        return Err(Error::InvalidConfig("splits must lie in 1..=number of samples".into()));
    }
    let k = probs[0].as_ref().len();
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_ref();
        if p.len() != k {
            return Err(Error::DimensionMismatch { expected: k, actual: p.len() });
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::NotNormalized { index: i, sum });
        }
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let chunk = &probs[s * n / splits..(s + 1) * n / splits];
        let mut marginal = vec![0.0; k];
        for p in chunk {
            marginal.iter_mut().zip(p.as_ref()).for_each(|(m, v)| *m += v);
        }
        marginal.iter_mut().for_each(|m| *m /= chunk.len() as f64);
        let mut kl = 0.0;
        for p in chunk {
            for (&pv, &m) in p.as_ref().iter().zip(&marginal) {
                if pv > 0.0 {
                    kl += pv * libm::log(pv / m);
                }
            }
        }
        scores.push(libm::exp(kl / chunk.len() as f64));
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / splits as f64;
    Ok((mean, libm::sqrt(var)))
}
