//! Finite-difference verification of the hand-written backward pass.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::Rng;

use super::guidance::GuidanceSignal;
use super::tensor::Tensor;
use super::unet::UNet;
use crate::error::Result;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compares analytic parameter gradients of the noise-prediction loss with
/// central differences of step `h`, on up to `per_group` random coordinates
/// of every parameter tensor.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients<R: Rng + ?Sized>(
    net: &mut UNet<f64>,
    x_t: &Tensor<f64>,
    t: &[usize],
    guidance: &[GuidanceSignal],
    eps: &Tensor<f64>,
    per_group: usize,
    h: f64,
    rng: &mut R,
) -> Result<Vec<GroupCheck>> {
    let (_, grads) = net.loss_and_grad(x_t, t, guidance, eps, None)?;
    let mut report = Vec::new();
    for p in 0..net.params().len() {
        let len = net.params()[p].len();
        let coords = sample(rng, len, per_group.min(len)).into_vec();
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let analytic = grads.grads[p].as_ref().map_or(0.0, |g| g.data()[i]);
            let orig = net.params()[p].data()[i];
            net.params_mut()[p].data_mut()[i] = orig + h;
            let plus = net.loss_and_grad(x_t, t, guidance, eps, None)?.0;
            net.params_mut()[p].data_mut()[i] = orig - h;
            let minus = net.loss_and_grad(x_t, t, guidance, eps, None)?.0;
            net.params_mut()[p].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic.abs().max(numeric.abs()).max(GRADIENT_FLOOR);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
        report.push(GroupCheck { name: net.param_names()[p].clone(), checked: coords.len(), max_rel_err: worst });
    }
    Ok(report)
}
