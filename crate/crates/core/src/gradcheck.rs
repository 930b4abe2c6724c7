//! Central finite-difference checks of every hand-written backward pass, in
//! `f64`. Spiking layers are checked in relaxed mode, where the spike step is
//! replaced by the surrogate's primitive so that the forward pass is
//! differentiable and its true derivative is the surrogate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::models::{dueling_combine, dueling_combine_backward, ArchKind, ArchitectureSpec, QNetwork};
use crate::snn::{AccumulatorLayer, ContextSignal, DendriteBank, DendriteSharing, IfNeurons, Readout, ResetMode, SpikingMlp};
use crate::tensor::{
    cross_entropy, mse_selected, surrogate_spike, surrogate_spike_backward, BatchNorm2d, BnMode, Conv2d, Linear,
    Surrogate, Tensor,
};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;

const H: f64 = 1e-6;

/// Most coordinates perturbed per tensor in the whole-network checks.
const NETWORK_SAMPLE: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub instance: usize,
    /// Worst tensor-wise `|a - n| / max(|a|, |n|)` over the checked tensors.
    pub rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_error <= TOLERANCE
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Norm-wise relative error between analytic and numeric gradients.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    relative_error_floored(analytic, numeric, 1e-12)
}

/// Relative error whose denominator is at least `floor`. Needed for tensors
/// whose true gradient vanishes, e.g. a convolution bias followed by batch
/// normalization, where both sides are rounding noise.
pub fn relative_error_floored(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

/// Central differences of `loss` over the coordinates `idx` of `$data`.
macro_rules! numeric {
    ($data:expr, $idx:expr, $loss:expr) => {{
        let mut g = Vec::with_capacity($idx.len());
        for &i in $idx.iter() {
            let orig = $data[i];
            $data[i] = orig + H;
            let fp = $loss;
            $data[i] = orig - H;
            let fm = $loss;
            $data[i] = orig;
            g.push((fp - fm) / (2.0 * H));
        }
        g
    }};
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn pick(analytic: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| analytic[i]).collect()
}

fn sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, n, k.min(n)).into_vec()
}

/// Accumulates the worst error over the tensors of one instance.
struct Worst(f64);

impl Worst {
    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.0 = self.0.max(relative_error(analytic, numeric));
    }
}

fn linear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, n, m) = (3, 5, 4);
    let mut l = Linear::<f64>::new(n, m, rng);
    let mut x = uniform(rng, rows * n, -1.0, 1.0);
    let r = uniform(rng, rows * m, -1.0, 1.0);
    let loss = |l: &mut Linear<f64>, x: &[f64]| dot(&l.forward(x, rows, false).unwrap(), &r);
    l.forward(&x, rows, true)?;
    let gx = l.backward(&r, true).expect("input gradient");
    let mut w = Worst(0.0);
    w.add(&gx, &numeric!(x, all(x.len()), loss(&mut l, &x)));
    let gw = l.weight.grad().unwrap().to_vec();
    w.add(&gw, &numeric!(l.weight.data_mut(), all(gw.len()), loss(&mut l, &x)));
    let gb = l.bias.grad().unwrap().to_vec();
    w.add(&gb, &numeric!(l.bias.data_mut(), all(gb.len()), loss(&mut l, &x)));
    Ok(w.0)
}

fn conv(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (batch, c, size) = (2, 2, 7);
    let stride = rng.gen_range(1..=2);
    let mut l = Conv2d::<f64>::new(c, 3, 3, stride, rng);
    let g = l.geometry(batch, c, size, size)?;
    let mut x = uniform(rng, batch * c * size * size, -1.0, 1.0);
    let out_len = g.output_shape().iter().product();
    let r = uniform(rng, out_len, -1.0, 1.0);
    let loss = |l: &mut Conv2d<f64>, x: &[f64]| dot(&l.forward(x, g, false), &r);
    l.forward(&x, g, true);
    let gx = l.backward(&r, true).expect("input gradient");
    let mut w = Worst(0.0);
    w.add(&gx, &numeric!(x, all(x.len()), loss(&mut l, &x)));
    let gw = l.weight.grad().unwrap().to_vec();
    w.add(&gw, &numeric!(l.weight.data_mut(), all(gw.len()), loss(&mut l, &x)));
    let gb = l.bias.grad().unwrap().to_vec();
    w.add(&gb, &numeric!(l.bias.data_mut(), all(gb.len()), loss(&mut l, &x)));
    Ok(w.0)
}

fn batchnorm(rng: &mut ChaCha8Rng, mode: BnMode) -> Result<f64> {
    let (rows, c, spatial) = (4, 3, 5);
    let mut bn = BatchNorm2d::<f64>::new(c);
    bn.gamma.data_mut().copy_from_slice(&uniform(rng, c, 0.5, 1.5));
    bn.beta.data_mut().copy_from_slice(&uniform(rng, c, -0.5, 0.5));
    if mode == BnMode::Eval {
        let warm = uniform(rng, rows * c * spatial, -2.0, 2.0);
        bn.forward(&warm, rows, spatial, BnMode::Train, false)?;
    }
    let mut x = uniform(rng, rows * c * spatial, -2.0, 2.0);
    let r = uniform(rng, x.len(), -1.0, 1.0);
    let fwd_mode = if mode == BnMode::Train { BnMode::Batch } else { mode };
    let loss = |bn: &mut BatchNorm2d<f64>, x: &[f64]| dot(&bn.forward(x, rows, spatial, fwd_mode, false).unwrap(), &r);
    bn.forward(&x, rows, spatial, mode, true)?;
    let gx = bn.backward(&r);
    let mut w = Worst(0.0);
    w.add(&gx, &numeric!(x, all(x.len()), loss(&mut bn, &x)));
    let gg = bn.gamma.grad().unwrap().to_vec();
    w.add(&gg, &numeric!(bn.gamma.data_mut(), all(c), loss(&mut bn, &x)));
    let gb = bn.beta.grad().unwrap().to_vec();
    w.add(&gb, &numeric!(bn.beta.data_mut(), all(c), loss(&mut bn, &x)));
    Ok(w.0)
}

fn dendrites(rng: &mut ChaCha8Rng, sharing: DendriteSharing) -> Result<f64> {
    let (rows, neurons, tasks) = (2, 4, 3);
    let mut d = DendriteBank::<f64>::new(neurons, tasks, tasks, sharing, rng);
    let ctx = ContextSignal::one_hot(rng.gen_range(0..tasks), tasks)?;
    let mut x = uniform(rng, rows * neurons, -1.0, 1.0);
    let r = uniform(rng, x.len(), -1.0, 1.0);
    let loss = |d: &mut DendriteBank<f64>, x: &[f64]| dot(&d.modulate(x, &ctx, false).unwrap(), &r);
    d.modulate(&x, &ctx, true)?;
    let gx = d.backward(&r);
    let mut w = Worst(0.0);
    w.add(&gx, &numeric!(x, all(x.len()), loss(&mut d, &x)));
    let gw = d.weights.grad().unwrap().to_vec();
    w.add(&gw, &numeric!(d.weights.data_mut(), all(gw.len()), loss(&mut d, &x)));
    Ok(w.0)
}

fn if_neurons(rng: &mut ChaCha8Rng, reset: ResetMode, surrogate: Surrogate, constant: bool) -> Result<f64> {
    let (steps, m) = (4, 6);
    let mut n = IfNeurons::<f64>::new(1.0, reset, surrogate);
    n.relaxed = true;
    let len = if constant { m } else { steps * m };
    let mut x = uniform(rng, len, -0.2, 1.2);
    let r = uniform(rng, steps * m, -1.0, 1.0);
    let loss = |n: &mut IfNeurons<f64>, x: &[f64]| dot(&n.forward(x, steps, constant, false), &r);
    n.forward(&x, steps, constant, true);
    let gx = n.backward(&r);
    Ok(relative_error(&gx, &numeric!(x, all(x.len()), loss(&mut n, &x))))
}

/// The non-relaxed spike's backward is the surrogate derivative at
/// `v - v_th`; also checks that derivative against differences of the
/// primitive.
fn surrogate(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = if rng.gen_bool(0.5) {
        Surrogate::ArcTan { alpha: rng.gen_range(1.0..4.0) }
    } else {
        Surrogate::Rectangular { width: rng.gen_range(0.5..2.0), height: rng.gen_range(0.5..2.0) }
    };
    let v_th = rng.gen_range(0.5..1.5);
    let v = uniform(rng, 16, -1.0, 3.0);
    let g = uniform(rng, 16, -1.0, 1.0);
    let vt = Tensor::new(&[16], v.clone())?;
    let spikes = surrogate_spike(&vt, v_th)?;
    for (s_out, vi) in spikes.data().iter().zip(&v) {
        assert_eq!(*s_out, if *vi >= v_th { 1.0 } else { 0.0 });
    }
    let back = surrogate_spike_backward(&vt, v_th, &Tensor::new(&[16], g.clone())?, s)?;
    let expected: Vec<f64> = v.iter().zip(&g).map(|(vi, gi)| gi * s.derivative(vi - v_th)).collect();
    let mut w = Worst(relative_error(back.data(), &expected));
    let mut x = v.iter().map(|vi| vi - v_th).collect::<Vec<_>>();
    let analytic: Vec<f64> = x.iter().map(|xi| s.derivative(*xi)).collect();
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let d = numeric!(x, [i], s.primitive(x[i]));
            d[0]
        })
        .collect();
    w.add(&analytic, &numeric);
    Ok(w.0)
}

fn accumulator(rng: &mut ChaCha8Rng, readout: Readout) -> Result<f64> {
    let (steps, m) = (4, 5);
    let mut acc = AccumulatorLayer::new(readout);
    let mut x = uniform(rng, steps * m, -1.0, 1.0);
    let r = uniform(rng, m, -1.0, 1.0);
    let loss = |acc: &mut AccumulatorLayer, x: &[f64]| dot(&acc.forward(x, steps, false), &r);
    acc.forward(&x, steps, true);
    let gx = acc.backward(&r);
    Ok(relative_error(&gx, &numeric!(x, all(x.len()), loss(&mut acc, &x))))
}

fn dueling(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, a) = (3, 5);
    let mut v = uniform(rng, n, -1.0, 1.0);
    let mut adv = uniform(rng, n * a, -1.0, 1.0);
    let r = uniform(rng, n * a, -1.0, 1.0);
    let loss = |v: &[f64], adv: &[f64]| dot(&dueling_combine(v, adv, a).unwrap(), &r);
    let (gv, ga) = dueling_combine_backward(&r, a);
    let mut w = Worst(0.0);
    w.add(&gv, &numeric!(v, all(n), loss(&v, &adv)));
    w.add(&ga, &numeric!(adv, all(n * a), loss(&v, &adv)));
    Ok(w.0)
}

fn losses(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, k) = (4, 6);
    let mut q = uniform(rng, n * k, -2.0, 2.0);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let targets = uniform(rng, n, -1.0, 1.0);
    let mse = mse_selected(&q, k, &labels, &targets)?;
    let ce = cross_entropy(&q, k, &labels)?;
    let mut w = Worst(0.0);
    w.add(&mse.grad, &numeric!(q, all(q.len()), mse_selected(&q, k, &labels, &targets).unwrap().loss));
    w.add(&ce.grad, &numeric!(q, all(q.len()), cross_entropy(&q, k, &labels).unwrap().loss));
    Ok(w.0)
}

/// Two-layer spiking network with dendrites, unrolled over four steps.
fn spiking_mlp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (rows, inputs, hidden, outputs, tasks, steps) = (2, 5, 6, 3, 2, 4);
    let reset = if rng.gen_bool(0.5) { ResetMode::HardToZero } else { ResetMode::SubtractThreshold };
    let mut net = SpikingMlp::<f64>::new(
        inputs,
        hidden,
        outputs,
        Some((tasks, DendriteSharing::PerNeuron)),
        1.0,
        reset,
        Surrogate::ArcTan { alpha: 2.0 },
        Readout::MaxPotential,
        rng,
    );
    net.neurons.relaxed = true;
    let ctx = ContextSignal::one_hot(rng.gen_range(0..tasks), tasks)?;
    let mut x = uniform(rng, rows * inputs, 0.0, 1.5);
    let r = uniform(rng, rows * outputs, -1.0, 1.0);
    let loss = |net: &mut SpikingMlp<f64>, x: &[f64]| dot(&net.forward(x, rows, &ctx, steps, false).unwrap(), &r);
    net.forward(&x, rows, &ctx, steps, true)?;
    let gx = net.backward(&r);
    let mut w = Worst(0.0);
    w.add(&gx, &numeric!(x, all(x.len()), loss(&mut net, &x)));
    let g = net.hidden.weight.grad().unwrap().to_vec();
    w.add(&g, &numeric!(net.hidden.weight.data_mut(), all(g.len()), loss(&mut net, &x)));
    let g = net.hidden.bias.grad().unwrap().to_vec();
    w.add(&g, &numeric!(net.hidden.bias.data_mut(), all(g.len()), loss(&mut net, &x)));
    let g = net.dendrites.as_ref().unwrap().weights.grad().unwrap().to_vec();
    w.add(&g, &numeric!(net.dendrites.as_mut().unwrap().weights.data_mut(), all(g.len()), loss(&mut net, &x)));
    let g = net.output.weight.grad().unwrap().to_vec();
    w.add(&g, &numeric!(net.output.weight.data_mut(), all(g.len()), loss(&mut net, &x)));
    let g = net.output.bias.grad().unwrap().to_vec();
    w.add(&g, &numeric!(net.output.bias.data_mut(), all(g.len()), loss(&mut net, &x)));
    Ok(w.0)
}

/// A small full network: every parameter tensor is probed on a sample of
/// coordinates, plus the observation gradient.
fn network(rng: &mut ChaCha8Rng, kind: ArchKind) -> Result<f64> {
    let spec = ArchitectureSpec {
        action_count: 4,
        task_count: 2,
        input: [2, 36, 36],
        fc_width: 8,
        t_sim: 3,
        surrogate: Surrogate::ArcTan { alpha: 2.0 },
        ..ArchitectureSpec::new(kind)
    };
    let batch = 3;
    let mut net = QNetwork::<f64>::build(&spec, rng)?;
    net.set_relaxed(true);
    let ctx = ContextSignal::one_hot(rng.gen_range(0..2), 2)?;
    let mut obs = uniform(rng, batch * spec.input_len(), 0.0, 1.0);
    let r = uniform(rng, batch * spec.action_count, -1.0, 1.0);
    let loss = |net: &mut QNetwork<f64>, obs: &[f64]| {
        dot(&net.forward(obs, batch, &ctx, BnMode::Batch, false).unwrap(), &r)
    };
    net.forward(&obs, batch, &ctx, BnMode::Batch, true)?;
    let gx = net.backward(&r, true).expect("input gradient");
    let mut w = Worst(0.0);
    let idx = sample(rng, obs.len(), NETWORK_SAMPLE);
    w.add(&pick(&gx, &idx), &numeric!(obs, idx, loss(&mut net, &obs)));
    let grads: Vec<Vec<f64>> = net.named_params().iter().map(|(_, t)| t.grad().unwrap().to_vec()).collect();
    let floor = 1e-4 * grads.iter().map(|g| norm(g)).fold(0.0, f64::max);
    for (p, g) in grads.iter().enumerate() {
        let idx = sample(rng, g.len(), NETWORK_SAMPLE);
        let num = numeric!(net.params_mut()[p].data_mut(), idx, loss(&mut net, &obs));
        w.0 = w.0.max(relative_error_floored(&pick(g, &idx), &num, floor));
    }
    Ok(w.0)
}

/// Runs `per_op` random instances of every check.
pub fn run_all(seed: u64, per_op: usize) -> Result<Vec<CheckResult>> {
    type Check = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;
    let arctan = Surrogate::ArcTan { alpha: 2.0 };
    let checks: Vec<(&'static str, Check)> = vec![
        ("linear", Box::new(linear)),
        ("conv2d", Box::new(conv)),
        ("batchnorm_train", Box::new(|r| batchnorm(r, BnMode::Train))),
        ("batchnorm_eval", Box::new(|r| batchnorm(r, BnMode::Eval))),
        ("dendrites_per_neuron", Box::new(|r| dendrites(r, DendriteSharing::PerNeuron))),
        ("dendrites_shared", Box::new(|r| dendrites(r, DendriteSharing::Shared))),
        ("if_hard_reset", Box::new(move |r| if_neurons(r, ResetMode::HardToZero, arctan, false))),
        ("if_subtract_reset_constant_input", Box::new(move |r| if_neurons(r, ResetMode::SubtractThreshold, arctan, true))),
        ("if_rectangular", Box::new(|r| if_neurons(r, ResetMode::HardToZero, Surrogate::default(), true))),
        ("surrogate_spike", Box::new(surrogate)),
        ("accumulator_max", Box::new(|r| accumulator(r, Readout::MaxPotential))),
        ("accumulator_final", Box::new(|r| accumulator(r, Readout::FinalPotential))),
        ("dueling_combine", Box::new(dueling)),
        ("losses", Box::new(losses)),
        ("spiking_mlp", Box::new(spiking_mlp)),
        ("network_dqn", Box::new(|r| network(r, ArchKind::Dqn))),
        ("network_mtspark_ad", Box::new(|r| network(r, ArchKind::MtsparkAd))),
        ("network_mtspark_add", Box::new(|r| network(r, ArchKind::MtsparkAdd))),
    ];
    let mut out = Vec::with_capacity(checks.len() * per_op);
    for (k, (op, check)) in checks.iter().enumerate() {
        for instance in 0..per_op {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((k as u64) << 32 | instance as u64));
            out.push(CheckResult { op, instance, rel_error: check(&mut rng)? });
        }
    }
    Ok(out)
}
