use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamMoments<S> {
    pub first: Vec<S>,
    pub second: Vec<S>,
}

/// Adam with bias correction. Moments are created lazily on the first step and
/// matched to parameters by position.
#[derive(Clone, Debug)]
pub struct Adam<S> {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<ParamMoments<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &[ParamMoments<S>] {
        &self.moments
    }

    pub fn restore(&mut self, step: u64, moments: Vec<ParamMoments<S>>) {
        self.step = step;
        self.moments = moments;
    }

    /// Applies one update to every parameter from its accumulated gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>]) {
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| ParamMoments { first: vec![S::zero(); p.numel()], second: vec![S::zero(); p.numel()] })
                .collect();
        }
        assert_eq!(self.moments.len(), params.len(), "optimizer/parameter count");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = S::lit(1.0 - beta1.powi(t));
        let c2 = S::lit(1.0 - beta2.powi(t));
        let (lr, b1, b2, eps) = (S::lit(lr), S::lit(beta1), S::lit(beta2), S::lit(eps));
        for (p, mom) in params.iter_mut().zip(self.moments.iter_mut()) {
            assert_eq!(mom.first.len(), p.numel(), "moment shape");
            let Some(grad) = p.grad().map(<[S]>::to_vec) else { continue };
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                mom.first[i] = b1 * mom.first[i] + (S::one() - b1) * g;
                mom.second[i] = b2 * mom.second[i] + (S::one() - b2) * g * g;
                let m_hat = mom.first[i] / c1;
                let v_hat = mom.second[i] / c2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
