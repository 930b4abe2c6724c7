//! Non-spiking output neurons whose membrane potential encodes Q-values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// How the accumulated potential is turned into an output value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Maximum potential over the simulation steps.
    #[default]
    MaxPotential,
    /// Potential after the last step.
    FinalPotential,
}

/// Single-step accumulator state.
#[derive(Clone, Debug, PartialEq)]
pub struct NonSpikingAccumulator<S> {
    pub v: Vec<S>,
    pub v_max: Vec<S>,
    steps: usize,
}

impl<S: Scalar> NonSpikingAccumulator<S> {
    pub fn new(neurons: usize) -> Self {
        Self { v: vec![S::zero(); neurons], v_max: vec![S::neg_infinity(); neurons], steps: 0 }
    }

    pub fn reset(&mut self) {
        self.v.fill(S::zero());
        self.v_max.fill(S::neg_infinity());
        self.steps = 0;
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulate(&mut self, input: &[S]) -> Result<()> {
        if input.len() != self.v.len() {
            return Err(Error::dim("nonspiking_accumulate", "input length", self.v.len(), input.len()));
        }
        for ((v, m), x) in self.v.iter_mut().zip(self.v_max.iter_mut()).zip(input) {
            *v += *x;
            if *v > *m {
                *m = *v;
            }
        }
        self.steps += 1;
        Ok(())
    }

    pub fn read(&self, readout: Readout) -> Vec<S> {
        match readout {
            Readout::MaxPotential => self.v_max.clone(),
            Readout::FinalPotential => self.v.clone(),
        }
    }
}

/// Multi-step accumulator over a time-major `[T, M]` input.
#[derive(Clone, Debug, Default)]
pub struct AccumulatorLayer {
    pub readout: Readout,
    /// Step index holding the maximum, per element.
    argmax: Option<(Vec<usize>, usize)>,
}

impl AccumulatorLayer {
    pub fn new(readout: Readout) -> Self {
        Self { readout, argmax: None }
    }

    pub fn clear_cache(&mut self) {
        self.argmax = None;
    }

    pub fn forward<S: Scalar>(&mut self, input: &[S], steps: usize, cache: bool) -> Vec<S> {
        let m = input.len() / steps;
        let mut v = vec![S::zero(); m];
        let mut best = vec![S::neg_infinity(); m];
        let mut at = vec![0usize; m];
        for t in 0..steps {
            for i in 0..m {
                v[i] += input[t * m + i];
                if v[i] > best[i] {
                    best[i] = v[i];
                    at[i] = t;
                }
            }
        }
        let out = match self.readout {
            Readout::MaxPotential => best,
            Readout::FinalPotential => {
                at.fill(steps - 1);
                v
            }
        };
        self.argmax = cache.then_some((at, steps));
        out
    }

    /// Every step up to the selected one contributes to the readout.
    pub fn backward<S: Scalar>(&mut self, grad_out: &[S]) -> Vec<S> {
        let (at, steps) = self.argmax.take().expect("accumulator backward without cached forward");
        let m = at.len();
        let mut gx = vec![S::zero(); steps * m];
        for i in 0..m {
            for t in 0..=at[i] {
                gx[t * m + i] = grad_out[i];
            }
        }
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_trace() {
        let mut acc = NonSpikingAccumulator::<f64>::new(1);
        let mut trace = Vec::new();
        for x in [1.0, -2.0, 3.0] {
            acc.accumulate(&[x]).unwrap();
            trace.push(acc.v[0]);
        }
        assert_eq!(trace, vec![1.0, -1.0, 2.0]);
        assert_eq!(acc.v_max, vec![2.0]);
    }

    #[test]
    fn zero_input_max_is_zero() {
        let mut acc = NonSpikingAccumulator::<f32>::new(4);
        for _ in 0..5 {
            acc.accumulate(&[0.0; 4]).unwrap();
        }
        assert_eq!(acc.read(Readout::MaxPotential), vec![0.0; 4]);
    }

    #[test]
    fn single_step_max_equals_potential() {
        let mut acc = NonSpikingAccumulator::<f64>::new(2);
        acc.accumulate(&[-0.5, 0.25]).unwrap();
        assert_eq!(acc.v_max, acc.v);
    }

    #[test]
    fn layer_agrees_with_state() {
        let xs = [0.5f64, -1.0, 2.0, 0.25, -3.0, 1.0];
        let mut layer = AccumulatorLayer::new(Readout::MaxPotential);
        let out = layer.forward(&xs, 3, true);
        let mut acc = NonSpikingAccumulator::new(2);
        for t in 0..3 {
            acc.accumulate(&xs[t * 2..t * 2 + 2]).unwrap();
        }
        assert_eq!(out, acc.v_max);
        // element 0 peaks at t=1 (2.5), element 1 at t=2 (0.25)
        assert_eq!(out, vec![2.5, 0.25]);
        assert_eq!(layer.backward(&[1.0, 1.0]), vec![1.0, 1.0, 1.0, 1.0, 0.0, 1.0]);
    }
}
