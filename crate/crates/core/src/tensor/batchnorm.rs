//! Per-channel batch normalization over `[N, C, spatial...]` inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{debug_assert_finite, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics; running statistics updated.
    Train,
    /// Batch statistics; running statistics left untouched.
    Batch,
    /// Running statistics.
    Eval,
}

#[derive(Clone, Debug)]
struct BnCache<S> {
    xhat: Vec<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
    spatial: usize,
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<S> {
    pub gamma: Tensor<S>,
    pub beta: Tensor<S>,
    running_mean: Vec<S>,
    running_var: Vec<S>,
    initialized: bool,
    momentum: S,
    eps: S,
    cache: Option<BnCache<S>>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize) -> Self {
        let mut gamma = Tensor::full(&[channels], S::one());
        gamma.set_requires_grad(true);
        let mut beta = Tensor::zeros(&[channels]);
        beta.set_requires_grad(true);
        Self {
            gamma,
            beta,
            running_mean: vec![S::zero(); channels],
            running_var: vec![S::one(); channels],
            initialized: false,
            momentum: S::lit(BN_MOMENTUM),
            eps: S::lit(BN_EPS),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn running_mean(&self) -> &[S] {
        &self.running_mean
    }

    pub fn running_var(&self) -> &[S] {
        &self.running_var
    }

    pub fn set_running_stats(&mut self, mean: Vec<S>, var: Vec<S>, initialized: bool) {
        assert_eq!(mean.len(), self.channels());
        assert_eq!(var.len(), self.channels());
        self.running_mean = mean;
        self.running_var = var;
        self.initialized = initialized;
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Normalizes `x` laid out as `[rows, C, spatial]`.
    pub fn forward(&mut self, x: &[S], rows: usize, spatial: usize, mode: BnMode, cache: bool) -> Result<Vec<S>> {
        let c = self.channels();
        if x.len() != rows * c * spatial {
            return Err(Error::dim("batchnorm", "channel axis", rows * c * spatial, x.len()));
        }
        if rows == 0 {
            return Err(Error::dim("batchnorm", "batch axis", 1, 0));
        }
        let count = rows * spatial;
        let (mean, var) = match mode {
            BnMode::Eval => {
                if !self.initialized {
                    return Err(Error::UninitializedStatistics);
                }
                (self.running_mean.clone(), self.running_var.clone())
            }
            BnMode::Train | BnMode::Batch => channel_stats(x, rows, c, spatial),
        };
        if mode == BnMode::Train {
            let m = self.momentum;
            let unbias = if count > 1 { S::lit(count as f64 / (count - 1) as f64) } else { S::one() };
            for ch in 0..c {
                self.running_mean[ch] = (S::one() - m) * self.running_mean[ch] + m * mean[ch];
                self.running_var[ch] = (S::one() - m) * self.running_var[ch] + m * var[ch] * unbias;
            }
            self.initialized = true;
        }
        let inv_std: Vec<S> = var.iter().map(|v| S::one() / (*v + self.eps).sqrt()).collect();
        let gamma = self.gamma.data();
        let beta = self.beta.data();
        let mut out = vec![S::zero(); x.len()];
        let mut xhat = if cache { vec![S::zero(); x.len()] } else { Vec::new() };
        for r in 0..rows {
            for ch in 0..c {
                let off = (r * c + ch) * spatial;
                for i in off..off + spatial {
                    let h = (x[i] - mean[ch]) * inv_std[ch];
                    out[i] = gamma[ch] * h + beta[ch];
                    if cache {
                        xhat[i] = h;
                    }
                }
            }
        }
        debug_assert_finite("batchnorm", &out);
        self.cache = cache.then(|| BnCache { xhat, inv_std, batch_stats: mode != BnMode::Eval, spatial });
        Ok(out)
    }

    /// Accumulates gamma/beta gradients and returns the input gradient for the
    /// most recent cached forward pass.
    pub fn backward(&mut self, grad_out: &[S]) -> Vec<S> {
        let cache = self.cache.take().expect("batchnorm backward without cached forward");
        let c = self.channels();
        let spatial = cache.spatial;
        let rows = grad_out.len() / (c * spatial);
        let count = S::lit((rows * spatial) as f64);
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xhat = vec![S::zero(); c];
        for r in 0..rows {
            for ch in 0..c {
                let off = (r * c + ch) * spatial;
                for i in off..off + spatial {
                    sum_dy[ch] += grad_out[i];
                    sum_dy_xhat[ch] += grad_out[i] * cache.xhat[i];
                }
            }
        }
        self.gamma.accumulate_grad(&sum_dy_xhat);
        self.beta.accumulate_grad(&sum_dy);
        let gamma = self.gamma.data();
        let mut gx = vec![S::zero(); grad_out.len()];
        for r in 0..rows {
            for ch in 0..c {
                let off = (r * c + ch) * spatial;
                let scale = gamma[ch] * cache.inv_std[ch];
                for i in off..off + spatial {
                    gx[i] = if cache.batch_stats {
                        scale * (grad_out[i] - sum_dy[ch] / count - cache.xhat[i] * sum_dy_xhat[ch] / count)
                    } else {
                        scale * grad_out[i]
                    };
                }
            }
        }
        gx
    }

    /// Tensor-level entry point for an NCHW (or `[N, C]`) input.
    pub fn forward_tensor(&mut self, input: &Tensor<S>, mode: BnMode) -> Result<Tensor<S>> {
        let shape = input.shape();
        if shape.len() < 2 {
            return Err(Error::dim("batchnorm", "input rank", 4, shape.len()));
        }
        if shape[1] != self.channels() {
            return Err(Error::dim("batchnorm", "channel axis", self.channels(), shape[1]));
        }
        let spatial = shape[2..].iter().product();
        let out = self.forward(input.data(), shape[0], spatial, mode, true)?;
        Tensor::new(shape, out)
    }
}

fn channel_stats<S: Scalar>(x: &[S], rows: usize, c: usize, spatial: usize) -> (Vec<S>, Vec<S>) {
    let count = S::lit((rows * spatial) as f64);
    let mut mean = vec![S::zero(); c];
    for r in 0..rows {
        for ch in 0..c {
            let off = (r * c + ch) * spatial;
            mean[ch] += x[off..off + spatial].iter().copied().sum::<S>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![S::zero(); c];
    for r in 0..rows {
        for ch in 0..c {
            let off = (r * c + ch) * spatial;
            var[ch] += x[off..off + spatial].iter().map(|v| (*v - mean[ch]) * (*v - mean[ch])).sum::<S>();
        }
    }
    var.iter_mut().for_each(|v| *v /= count);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_maps_to_beta() {
        let mut bn = BatchNorm2d::<f64>::new(2);
        bn.beta.data_mut().copy_from_slice(&[0.5, -1.5]);
        // [rows=2, C=2, spatial=4]; channel 0 holds 3.0, channel 1 holds -7.0
        let mut x = vec![3.0; 2 * 2 * 4];
        x[4..8].fill(-7.0);
        x[12..16].fill(-7.0);
        let y = bn.forward(&x, 2, 4, BnMode::Train, false).unwrap();
        for r in 0..2 {
            assert_eq!(&y[r * 8..r * 8 + 4], &[0.5; 4]);
            assert_eq!(&y[r * 8 + 4..r * 8 + 8], &[-1.5; 4]);
        }
    }

    #[test]
    fn standardized_input_passes_through() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        let x = vec![-1.0, 1.0, -1.0, 1.0];
        let y = bn.forward(&x, 1, 4, BnMode::Train, false).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn eval_requires_running_stats() {
        let mut bn = BatchNorm2d::<f32>::new(3);
        let x = vec![1.0; 3 * 4];
        assert!(matches!(bn.forward(&x, 1, 4, BnMode::Eval, false), Err(Error::UninitializedStatistics)));
        bn.forward(&x, 1, 4, BnMode::Batch, false).unwrap();
        assert!(!bn.is_initialized());
        bn.forward(&x, 1, 4, BnMode::Train, false).unwrap();
        assert!(bn.forward(&x, 1, 4, BnMode::Eval, false).is_ok());
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut bn = BatchNorm2d::<f64>::new(1);
        bn.forward(&[1.0, 3.0], 2, 1, BnMode::Train, false).unwrap();
        // mean 2, unbiased variance 2
        assert!((bn.running_mean()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var()[0] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn trainable_parameters_two_per_channel() {
        let total: usize = [32, 64, 64].iter().map(|&c| {
            let bn = BatchNorm2d::<f32>::new(c);
            bn.gamma.numel() + bn.beta.numel()
        }).sum();
        assert_eq!(total, 320);
    }
}
