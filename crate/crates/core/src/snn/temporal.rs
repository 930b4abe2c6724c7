//! Running spiking networks over simulation time with direct input coding.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::snn::{
    AccumulatorLayer, ContextSignal, DendriteBank, DendriteSharing, IfLayerState, IfNeurons, NonSpikingAccumulator,
    Readout, ResetMode,
};
use crate::tensor::{Linear, Surrogate};

/// A network stepped one simulation step at a time.
pub trait TemporalNetwork<S: Scalar> {
    /// Width of the current delivered to the output accumulator.
    fn output_width(&self) -> usize;

    /// Returns every neuron to resting potential.
    fn reset_state(&mut self);

    /// Advances one step with `obs` injected as constant current and returns
    /// the current reaching the output accumulator.
    fn step(&mut self, obs: &[S], ctx: &ContextSignal) -> Result<Vec<S>>;
}

/// Presents `obs` for `t_sim` steps and reads the output accumulator. The
/// network is reset before and after, so repeated calls are independent.
pub fn run_temporal<S: Scalar, N: TemporalNetwork<S> + ?Sized>(
    net: &mut N,
    obs: &[S],
    ctx: &ContextSignal,
    t_sim: usize,
    readout: Readout,
) -> Result<Vec<S>> {
    if t_sim == 0 {
        return Err(Error::Config("simulation length must be at least 1".into()));
    }
    net.reset_state();
    let mut acc = NonSpikingAccumulator::new(net.output_width());
    for _ in 0..t_sim {
        let current = net.step(obs, ctx)?;
        acc.accumulate(&current)?;
    }
    net.reset_state();
    Ok(acc.read(readout))
}

/// Two-layer spiking network: FC → [dendrites] → IF → FC → accumulator.
///
/// Supports both the step-by-step [`TemporalNetwork`] path and a batched
/// multi-step path with backpropagation through time.
#[derive(Clone, Debug)]
pub struct SpikingMlp<S> {
    pub hidden: Linear<S>,
    pub dendrites: Option<DendriteBank<S>>,
    pub neurons: IfNeurons<S>,
    pub output: Linear<S>,
    pub accumulator: AccumulatorLayer,
    state: IfLayerState<S>,
    steps_cached: usize,
}

impl<S: Scalar> SpikingMlp<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        inputs: usize,
        hidden: usize,
        outputs: usize,
        tasks: Option<(usize, DendriteSharing)>,
        v_th: S,
        reset: ResetMode,
        surrogate: Surrogate,
        readout: Readout,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(inputs, hidden, rng),
            dendrites: tasks.map(|(t, sharing)| DendriteBank::for_tasks(hidden, t, sharing, rng)),
            neurons: IfNeurons::new(v_th, reset, surrogate),
            output: Linear::new(hidden, outputs, rng),
            accumulator: AccumulatorLayer::new(readout),
            state: IfLayerState::new(hidden, v_th, reset),
            steps_cached: 0,
        }
    }

    /// Batched forward of `x [rows, inputs]` over `steps` steps; returns the
    /// readout `[rows, outputs]`.
    pub fn forward(&mut self, x: &[S], rows: usize, ctx: &ContextSignal, steps: usize, cache: bool) -> Result<Vec<S>> {
        let mut h = self.hidden.forward(x, rows, cache)?;
        if let Some(d) = self.dendrites.as_mut() {
            h = d.modulate(&h, ctx, cache)?;
        }
        let spikes = self.neurons.forward(&h, steps, true, cache);
        let out = self.output.forward(&spikes, steps * rows, cache)?;
        self.steps_cached = steps;
        Ok(self.accumulator.forward(&out, steps, cache))
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&mut self, grad_out: &[S]) -> Vec<S> {
        let g = self.accumulator.backward(grad_out);
        let g = self.output.backward(&g, true).expect("input gradient");
        let mut g = self.neurons.backward(&g);
        if let Some(d) = self.dendrites.as_mut() {
            g = d.backward(&g);
        }
        self.hidden.backward(&g, true).expect("input gradient")
    }
}

impl<S: Scalar> TemporalNetwork<S> for SpikingMlp<S> {
    fn output_width(&self) -> usize {
        self.output.out_features()
    }

    fn reset_state(&mut self) {
        self.state.reset_potentials();
    }

    fn step(&mut self, obs: &[S], ctx: &ContextSignal) -> Result<Vec<S>> {
        self.state.v_th = self.neurons.v_th;
        self.state.reset = self.neurons.reset;
        let h = self.hidden.forward(obs, 1, false)?;
        let gains = match &self.dendrites {
            Some(d) => Some(d.gains(ctx)?),
            None => None,
        };
        let spikes = self.state.step(&h, gains.as_deref())?;
        self.output.forward(&spikes, 1, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(v_th: f64) -> SpikingMlp<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        SpikingMlp::new(2, 2, 2, None, v_th, ResetMode::HardToZero, Surrogate::default(), Readout::MaxPotential, &mut rng)
    }

    #[test]
    fn two_neuron_manual_simulation() {
        let mut net = toy(1.0);
        net.hidden.weight.data_mut().copy_from_slice(&[0.5, 0.0, 0.25, 0.25]);
        net.hidden.bias.data_mut().copy_from_slice(&[0.0, 0.1]);
        net.output.weight.data_mut().copy_from_slice(&[1.0, -1.0, 0.5, 2.0]);
        net.output.bias.data_mut().copy_from_slice(&[-0.25, 0.0]);
        let ctx = ContextSignal::one_hot(0, 1).unwrap();
        let q = run_temporal(&mut net, &[1.2, 0.8], &ctx, 3, Readout::MaxPotential).unwrap();

        // hidden currents: n0 = 0.6, n1 = 0.6
        // t1: V = (0.6, 0.6) → no spikes; out = (-0.25, 0.0); acc = (-0.25, 0.0)
        // t2: V = (1.2, 1.2) → both spike, reset; out = (-0.25, 2.5); acc = (-0.5, 2.5)
        // t3: V = (0.6, 0.6) → no spikes; out = (-0.25, 0.0); acc = (-0.75, 2.5)
        assert_eq!(q.len(), 2);
        assert!((q[0] - -0.25).abs() < 1e-12);
        assert!((q[1] - 2.5).abs() < 1e-12);
        let last = run_temporal(&mut net, &[1.2, 0.8], &ctx, 3, Readout::FinalPotential).unwrap();
        assert!((last[0] - -0.75).abs() < 1e-12);
    }

    #[test]
    fn repeated_calls_are_stateless() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut net = SpikingMlp::<f64>::new(
            6,
            16,
            4,
            Some((3, DendriteSharing::PerNeuron)),
            1.0,
            ResetMode::HardToZero,
            Surrogate::default(),
            Readout::MaxPotential,
            &mut rng,
        );
        let obs = [0.3, -0.1, 0.9, 0.5, 0.0, 1.0];
        let ctx = ContextSignal::one_hot(1, 3).unwrap();
        let a = run_temporal(&mut net, &obs, &ctx, 4, Readout::MaxPotential).unwrap();
        let b = run_temporal(&mut net, &obs, &ctx, 4, Readout::MaxPotential).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_threshold_single_step_is_a_dense_pass() {
        let mut net = toy(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let obs: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ctx = ContextSignal::one_hot(0, 1).unwrap();
        let q = run_temporal(&mut net, &obs, &ctx, 1, Readout::MaxPotential).unwrap();

        let w1 = net.hidden.weight.data();
        let b1 = net.hidden.bias.data();
        let w2 = net.output.weight.data();
        let b2 = net.output.bias.data();
        let hidden: Vec<f64> = (0..2)
            .map(|i| {
                let z = w1[i * 2] * obs[0] + w1[i * 2 + 1] * obs[1] + b1[i];
                if z >= 0.0 { 1.0 } else { 0.0 }
            })
            .collect();
        for o in 0..2 {
            let expect = w2[o * 2] * hidden[0] + w2[o * 2 + 1] * hidden[1] + b2[o];
            assert!((q[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn batched_path_matches_stepwise_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut net = SpikingMlp::<f64>::new(
            5,
            12,
            3,
            Some((2, DendriteSharing::PerNeuron)),
            0.5,
            ResetMode::HardToZero,
            Surrogate::default(),
            Readout::MaxPotential,
            &mut rng,
        );
        let rows = 4;
        let x: Vec<f64> = (0..rows * 5).map(|_| rng.gen_range(0.0..1.0)).collect();
        let ctx = ContextSignal::one_hot(1, 2).unwrap();
        let batched = net.forward(&x, rows, &ctx, 4, false).unwrap();
        for r in 0..rows {
            let single = run_temporal(&mut net, &x[r * 5..(r + 1) * 5], &ctx, 4, Readout::MaxPotential).unwrap();
            for k in 0..3 {
                assert!((batched[r * 3 + k] - single[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_steps_rejected() {
        let mut net = toy(1.0);
        let ctx = ContextSignal::one_hot(0, 1).unwrap();
        assert!(run_temporal(&mut net, &[0.0, 0.0], &ctx, 0, Readout::MaxPotential).is_err());
    }
}
