//! Heaviside spike nonlinearity with a configurable surrogate derivative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stand-in derivative of the spike step, evaluated at `v - v_th`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Surrogate {
    /// `height` inside `|x| < width / 2`, zero elsewhere.
    Rectangular { width: f64, height: f64 },
    /// `(alpha / 2) / (1 + (pi/2 · alpha · x)^2)`.
    ArcTan { alpha: f64 },
}

impl Default for Surrogate {
    fn default() -> Self {
        Surrogate::Rectangular { width: 1.0, height: 1.0 }
    }
}

impl Surrogate {
    pub fn derivative<S: Scalar>(&self, x: S) -> S {
        match *self {
            Surrogate::Rectangular { width, height } => {
                if x.abs() < S::lit(width / 2.0) {
                    S::lit(height)
                } else {
                    S::zero()
                }
            }
            Surrogate::ArcTan { alpha } => {
                let z = S::lit(std::f64::consts::FRAC_PI_2 * alpha) * x;
                S::lit(alpha / 2.0) / (S::one() + z * z)
            }
        }
    }

    /// Smooth relaxation of the step whose derivative is [`Self::derivative`].
    pub fn primitive<S: Scalar>(&self, x: S) -> S {
        match *self {
            Surrogate::Rectangular { width, height } => {
                let half = S::lit(width / 2.0);
                if x <= -half {
                    S::zero()
                } else if x >= half {
                    S::lit(width * height)
                } else {
                    S::lit(height) * (x + half)
                }
            }
            Surrogate::ArcTan { alpha } => {
                let z = S::lit(std::f64::consts::FRAC_PI_2 * alpha) * x;
                z.atan() / S::lit(std::f64::consts::PI) + S::lit(0.5)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Surrogate::Rectangular { width, height } => width > 0.0 && height > 0.0,
            Surrogate::ArcTan { alpha } => alpha > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid surrogate {self:?}")))
        }
    }
}

#[inline]
pub(crate) fn heaviside<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one()
    } else {
        S::zero()
    }
}

/// Elementwise `step(v - v_th)`.
pub fn surrogate_spike<S: Scalar>(v: &Tensor<S>, v_th: S) -> Result<Tensor<S>> {
    if v_th <= S::zero() {
        return Err(Error::Config(format!("spike threshold must be positive, got {v_th}")));
    }
    Tensor::new(v.shape(), v.data().iter().map(|&x| heaviside(x - v_th)).collect())
}

/// Backward of [`surrogate_spike`] under the given surrogate.
pub fn surrogate_spike_backward<S: Scalar>(v: &Tensor<S>, v_th: S, grad_out: &Tensor<S>, surrogate: Surrogate) -> Result<Tensor<S>> {
    if grad_out.numel() != v.numel() {
        return Err(Error::dim("surrogate_spike_backward", "grad_out length", v.numel(), grad_out.numel()));
    }
    let g = v
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| g * surrogate.derivative(x - v_th))
        .collect();
    Tensor::new(v.shape(), g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_crossings() {
        let v = Tensor::new(&[3], vec![1.2f64, 0.4, 1.0]).unwrap();
        let s = surrogate_spike(&v, 1.0).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn rectangular_passes_gradient_at_threshold() {
        let v = Tensor::new(&[1], vec![1.0f64]).unwrap();
        let g = Tensor::new(&[1], vec![1.0]).unwrap();
        let out = surrogate_spike_backward(&v, 1.0, &g, Surrogate::default()).unwrap();
        assert_eq!(out.data(), &[1.0]);
        let far = Tensor::new(&[1], vec![1.6f64]).unwrap();
        assert_eq!(surrogate_spike_backward(&far, 1.0, &g, Surrogate::default()).unwrap().data(), &[0.0]);
    }

    #[test]
    fn arctan_peak_is_half_alpha() {
        let s = Surrogate::ArcTan { alpha: 2.0 };
        assert!((s.derivative(0.0f64) - 1.0).abs() < 1e-15);
        assert!((s.primitive(0.0f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_positive_threshold_rejected() {
        let v = Tensor::<f32>::zeros(&[2]);
        assert!(surrogate_spike(&v, 0.0).is_err());
    }
}
