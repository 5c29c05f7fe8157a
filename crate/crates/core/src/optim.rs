//! Parameter updates: AdamW with decoupled weight decay, and EMA shadowing.

use alloc::vec::Vec;

use crate::denoiser::{Gradients, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Adam with decoupled weight decay and a constant learning rate.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// First and second moment estimates, one vector per parameter tensor
    /// (empty before the first step).
    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// Restores a saved optimizer state.
    pub fn restore(&mut self, step: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) -> Result<()> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::DimensionMismatch { expected: m.len(), actual: v.len() });
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// Applies one update. Parameters without a gradient only decay.
    pub fn step<F: Scalar>(&mut self, params: &mut [Tensor<F>], grads: &Gradients<F>) -> Result<()> {
        if grads.grads.len() != params.len() {
            return Err(Error::DimensionMismatch { expected: params.len(), actual: grads.grads.len() });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads.grads[i] {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(shape_err(p.shape(), g.shape()));
                    }
                    for (((w, &gr), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let gr = gr.as_f64();
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                        let update = (*mi / bc1) / (libm::sqrt(*vi / bc2) + self.eps);
                        *w = F::lit(w.as_f64() * decay - self.lr * update);
                    }
                }
                None => {
                    for w in p.data_mut() {
                        *w = F::lit(w.as_f64() * decay);
                    }
                }
            }
        }
        Ok(())
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`, elementwise.
pub fn ema_update<F: Scalar>(shadow: &mut [Tensor<F>], params: &[Tensor<F>], decay: f64) -> Result<()> {
    if shadow.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: shadow.len(), actual: params.len() });
    }
    if let Some((s, p)) = shadow.iter().zip(params).find(|(s, p)| s.shape() != p.shape()) {
        return Err(shape_err(s.shape(), p.shape()));
    }
    let (d, rest) = (F::lit(decay), F::lit(1.0 - decay));
    for (s, p) in shadow.iter_mut().zip(params) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + rest * pv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::new(&[1], alloc::vec![v]).unwrap()
    }

    #[test]
    fn ema_endpoints() {
        let mut shadow = [scalar(0.3)];
        ema_update(&mut shadow, &[scalar(1.0)], 0.0).unwrap();
        assert_eq!(shadow[0].data(), &[1.0]);
        ema_update(&mut shadow, &[scalar(5.0)], 1.0).unwrap();
        assert_eq!(shadow[0].data(), &[1.0]);
    }

    #[test]
    fn ema_two_updates() {
        let mut shadow = [scalar(0.0)];
        ema_update(&mut shadow, &[scalar(1.0)], 0.9).unwrap();
        ema_update(&mut shadow, &[scalar(1.0)], 0.9).unwrap();
        assert!((shadow[0].data()[0] - 0.19).abs() < 1e-15);
    }

    #[test]
    fn ema_geometric_convergence() {
        // |shadow_n - p| = decay^n |shadow_0 - p|; dyadic values keep this exact.
        let (p, decay) = (1.0, 0.5);
        let mut shadow = [scalar(0.0)];
        for n in 1..=20 {
            ema_update(&mut shadow, &[scalar(p)], decay).unwrap();
            assert_eq!((shadow[0].data()[0] - p).abs(), libm::pow(decay, n as f64));
        }
    }

    #[test]
    fn ema_shape_mismatch() {
        let mut shadow = [Tensor::<f64>::zeros(&[2])];
        assert!(ema_update(&mut shadow, &[Tensor::zeros(&[3])], 0.5).is_err());
        assert!(ema_update(&mut shadow, &[], 0.5).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // With bias correction the first update is lr·sign(g) (up to eps),
        // after the decoupled decay.
        let mut p = [scalar(1.0)];
        let g = Gradients { grads: alloc::vec![Some(scalar(0.5))] };
        let mut opt = AdamW::new(0.1, 0.01);
        opt.step(&mut p, &g).unwrap();
        let expected = 1.0 * (1.0 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - expected).abs() < 1e-12);
        assert_eq!(opt.steps_taken(), 1);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut p = [scalar(3.0)];
        let mut opt = AdamW::new(0.05, 0.0);
        for _ in 0..500 {
            let g = Gradients { grads: alloc::vec![Some(scalar(2.0 * (p[0].data()[0] - 1.0)))] };
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }
}
