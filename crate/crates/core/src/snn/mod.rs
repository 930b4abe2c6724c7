//! Spiking building blocks: IF neurons, active dendrites and the non-spiking
//! output accumulator.

mod accumulator;
mod dendrite;
mod neuron;
mod temporal;

pub use accumulator::{AccumulatorLayer, NonSpikingAccumulator, Readout};
pub use dendrite::{sigmoid, ContextSignal, DendriteBank, DendriteSharing};
pub use neuron::{IfLayerState, IfNeurons, ResetMode};
pub use temporal::{run_temporal, SpikingMlp, TemporalNetwork};
