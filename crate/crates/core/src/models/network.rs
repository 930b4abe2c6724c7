use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{dueling_combine, dueling_combine_backward, ArchitectureSpec, DuelingLayout};
use crate::scalar::Scalar;
use crate::snn::{AccumulatorLayer, ContextSignal, DendriteBank, IfNeurons};
use crate::state::{ArrayData, NamedArray, StateBundle};
use crate::tensor::{conv_out_extent, BatchNorm2d, BnMode, Conv2d, Linear, Tensor};

/// Trunk schedule: `(out_channels, kernel, stride)`.
const TRUNK: [(usize, usize, usize); 3] = [(32, 8, 4), (64, 4, 2), (64, 3, 1)];

#[derive(Clone, Debug)]
enum Activation<S> {
    Relu { mask: Option<Vec<bool>> },
    Spiking(IfNeurons<S>),
}

impl<S: Scalar> Activation<S> {
    fn new(spec: &ArchitectureSpec) -> Self {
        if spec.kind.is_spiking() {
            Activation::Spiking(IfNeurons::new(spec.v_th_as(), spec.reset, spec.surrogate))
        } else {
            Activation::Relu { mask: None }
        }
    }

    /// With `constant_input` the input is one step's current, reused every step.
    fn forward(&mut self, x: &[S], steps: usize, constant_input: bool, cache: bool) -> Vec<S> {
        match self {
            Activation::Relu { mask } => {
                debug_assert_eq!(steps, 1);
                let out: Vec<S> = x.iter().map(|v| v.max(S::zero())).collect();
                *mask = cache.then(|| x.iter().map(|v| *v > S::zero()).collect());
                out
            }
            Activation::Spiking(n) => n.forward(x, steps, constant_input, cache),
        }
    }

    fn backward(&mut self, g: &[S]) -> Vec<S> {
        match self {
            Activation::Relu { mask } => {
                let mask = mask.take().expect("relu backward without cached forward");
                g.iter().zip(mask).map(|(g, m)| if m { *g } else { S::zero() }).collect()
            }
            Activation::Spiking(n) => n.backward(g),
        }
    }

    fn set_relaxed(&mut self, on: bool) {
        if let Activation::Spiking(n) = self {
            n.relaxed = on;
        }
    }

    fn clear_cache(&mut self) {
        match self {
            Activation::Relu { mask } => *mask = None,
            Activation::Spiking(n) => n.clear_cache(),
        }
    }
}

#[derive(Clone, Debug)]
struct TrunkLayer<S> {
    conv: Conv2d<S>,
    bn: BatchNorm2d<S>,
    act: Activation<S>,
    /// Input `(channels, height, width)`.
    input: [usize; 3],
    output: [usize; 3],
}

/// FC stream: fc → [dendrites] → activation → heads → accumulators.
#[derive(Clone, Debug)]
struct Branch<S> {
    name: &'static str,
    fc: Linear<S>,
    dendrites: Option<DendriteBank<S>>,
    act: Activation<S>,
    heads: Vec<(&'static str, Linear<S>, AccumulatorLayer)>,
}

impl<S: Scalar> Branch<S> {
    fn new<R: Rng + ?Sized>(
        name: &'static str,
        features: usize,
        spec: &ArchitectureSpec,
        heads: &[(&'static str, usize)],
        rng: &mut R,
    ) -> Self {
        let fc = Linear::new(features, spec.fc_width, rng);
        let dendrites = spec
            .kind
            .has_dendrites()
            .then(|| DendriteBank::for_tasks(spec.fc_width, spec.task_count, spec.dendrite_sharing, rng));
        let heads = heads
            .iter()
            .map(|&(n, width)| (n, Linear::new(spec.fc_width, width, rng), AccumulatorLayer::new(spec.readout)))
            .collect();
        Self { name, fc, dendrites, act: Activation::new(spec), heads }
    }

    /// `features [T·N, F]` → one `[N, width]` output per head.
    fn forward(
        &mut self,
        features: &[S],
        rows: usize,
        steps: usize,
        ctx: &ContextSignal,
        cache: bool,
    ) -> Result<Vec<Vec<S>>> {
        let mut h = self.fc.forward(features, rows, cache)?;
        if let Some(d) = self.dendrites.as_mut() {
            h = d.modulate(&h, ctx, cache)?;
        }
        let s = self.act.forward(&h, steps, false, cache);
        let mut outs = Vec::with_capacity(self.heads.len());
        for (_, head, acc) in &mut self.heads {
            let y = head.forward(&s, rows, cache)?;
            outs.push(acc.forward(&y, steps, cache));
        }
        Ok(outs)
    }

    fn backward(&mut self, grads: &[Vec<S>]) -> Vec<S> {
        let mut gs: Option<Vec<S>> = None;
        for ((_, head, acc), g) in self.heads.iter_mut().zip(grads) {
            let gy = acc.backward(g);
            let gx = head.backward(&gy, true).expect("input gradient");
            match gs.as_mut() {
                Some(sum) => sum.iter_mut().zip(&gx).for_each(|(a, b)| *a += *b),
                None => gs = Some(gx),
            }
        }
        let mut g = self.act.backward(&gs.expect("branch has heads"));
        if let Some(d) = self.dendrites.as_mut() {
            g = d.backward(&g);
        }
        self.fc.backward(&g, true).expect("input gradient")
    }

    fn named_params<'a>(&'a self, out: &mut Vec<(String, &'a Tensor<S>)>) {
        out.push((format!("{}.fc.weight", self.name), &self.fc.weight));
        out.push((format!("{}.fc.bias", self.name), &self.fc.bias));
        if let Some(d) = &self.dendrites {
            out.push((format!("{}.dendrites.weight", self.name), &d.weights));
        }
        for (n, head, _) in &self.heads {
            out.push((format!("{}.{n}.weight", self.name), &head.weight));
            out.push((format!("{}.{n}.bias", self.name), &head.bias));
        }
    }

    fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor<S>>) {
        out.push(&mut self.fc.weight);
        out.push(&mut self.fc.bias);
        if let Some(d) = self.dendrites.as_mut() {
            out.push(&mut d.weights);
        }
        for (_, head, _) in &mut self.heads {
            out.push(&mut head.weight);
            out.push(&mut head.bias);
        }
    }

    fn clear_cache(&mut self) {
        self.fc.clear_cache();
        if let Some(d) = self.dendrites.as_mut() {
            d.clear_cache();
        }
        self.act.clear_cache();
        for (_, head, acc) in &mut self.heads {
            head.clear_cache();
            acc.clear_cache();
        }
    }
}

/// One row of a layer-by-layer shape trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerRow {
    /// Stream the row belongs to (`None` for the shared trunk).
    pub stream: Option<&'static str>,
    pub layer: String,
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug)]
struct ForwardCache {
    batch: usize,
}

/// A built Q-network mapping observations and a task context to Q-values.
#[derive(Clone, Debug)]
pub struct QNetwork<S> {
    spec: ArchitectureSpec,
    trunk: Vec<TrunkLayer<S>>,
    branches: Vec<Branch<S>>,
    cache: Option<ForwardCache>,
}

fn hwc(d: [usize; 3]) -> String {
    format!("{}×{}×{}", d[1], d[2], d[0])
}

fn vector(n: usize) -> String {
    format!("{n}×1")
}

impl<S: Scalar> QNetwork<S> {
    pub fn build<R: Rng + ?Sized>(spec: &ArchitectureSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut trunk = Vec::with_capacity(TRUNK.len());
        let mut dims = spec.input;
        for (i, &(out_c, k, stride)) in TRUNK.iter().enumerate() {
            let axis = |a: &str| format!("{a} axis of conv{} (kernel {k} exceeds input)", i + 1);
            let h = conv_out_extent(dims[1], k, stride).ok_or_else(|| Error::Config(axis("height")))?;
            let w = conv_out_extent(dims[2], k, stride).ok_or_else(|| Error::Config(axis("width")))?;
            let out = [out_c, h, w];
            trunk.push(TrunkLayer {
                conv: Conv2d::new(dims[0], out_c, k, stride, rng),
                bn: BatchNorm2d::new(out_c),
                act: Activation::new(spec),
                input: dims,
                output: out,
            });
            dims = out;
        }
        let features: usize = dims.iter().product();
        let a = spec.action_count;
        let branches = if !spec.kind.is_dueling() {
            vec![Branch::new("hidden", features, spec, &[("out", a)], rng)]
        } else {
            match spec.dueling_layout {
                DuelingLayout::TwoStreams => vec![
                    Branch::new("value", features, spec, &[("head", 1)], rng),
                    Branch::new("advantage", features, spec, &[("head", a)], rng),
                ],
                DuelingLayout::SharedHidden => {
                    vec![Branch::new("hidden", features, spec, &[("value", 1), ("advantage", a)], rng)]
                }
            }
        };
        Ok(Self { spec: spec.clone(), trunk, branches, cache: None })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn action_count(&self) -> usize {
        self.spec.action_count
    }

    pub fn feature_len(&self) -> usize {
        self.trunk.last().map_or(0, |l| l.output.iter().product())
    }

    /// Evaluates `obs [N, C, H, W]` with one context for the whole batch and
    /// returns Q-values `[N, actions]`.
    pub fn forward(&mut self, obs: &[S], batch: usize, ctx: &ContextSignal, mode: BnMode, cache: bool) -> Result<Vec<S>> {
        let in_len = self.spec.input_len();
        if batch == 0 || obs.len() != batch * in_len {
            return Err(Error::dim("qnetwork_forward", "observation length", batch.max(1) * in_len, obs.len()));
        }
        if self.spec.kind.has_dendrites() && ctx.len() != self.spec.task_count {
            return Err(Error::dim("qnetwork_forward", "context length", self.spec.task_count, ctx.len()));
        }
        let steps = self.spec.steps();
        let mut x: Vec<S> = obs.to_vec();
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            // The first layer sees the same observation at every step, so its
            // convolution and normalization are computed once.
            let rows = if i == 0 { batch } else { steps * batch };
            let [c, h, w] = layer.input;
            let g = layer.conv.geometry(rows, c, h, w)?;
            let y = layer.conv.forward(&x, g, cache);
            let spatial = layer.output[1] * layer.output[2];
            let y = layer.bn.forward(&y, rows, spatial, mode, cache)?;
            x = layer.act.forward(&y, steps, i == 0, cache);
        }
        let rows = steps * batch;
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &mut self.branches {
            outs.extend(b.forward(&x, rows, steps, ctx, cache)?);
        }
        self.cache = cache.then_some(ForwardCache { batch });
        let q = if self.spec.kind.is_dueling() {
            dueling_combine(&outs[0], &outs[1], self.spec.action_count)?
        } else {
            outs.pop().expect("one output")
        };
        debug_assert!(q.iter().all(|v| v.is_finite()), "non-finite Q-value");
        Ok(q)
    }

    /// Convenience single-observation forward.
    pub fn q_values(&mut self, obs: &[S], ctx: &ContextSignal, mode: BnMode) -> Result<Vec<S>> {
        self.forward(obs, 1, ctx, mode, false)
    }

    /// Backpropagates `grad_q [N, actions]` from the most recent cached forward,
    /// accumulating parameter gradients. Returns the observation gradient when
    /// requested.
    pub fn backward(&mut self, grad_q: &[S], need_input: bool) -> Option<Vec<S>> {
        let fc = self.cache.take().expect("qnetwork backward without cached forward");
        let a = self.spec.action_count;
        debug_assert_eq!(grad_q.len(), fc.batch * a);
        let head_grads: Vec<Vec<S>> = if self.spec.kind.is_dueling() {
            let (gv, ga) = dueling_combine_backward(grad_q, a);
            vec![gv, ga]
        } else {
            vec![grad_q.to_vec()]
        };
        let mut g_feat: Option<Vec<S>> = None;
        let mut rest = head_grads.as_slice();
        for b in &mut self.branches {
            let (mine, tail) = rest.split_at(b.heads.len());
            rest = tail;
            let g = b.backward(mine);
            match g_feat.as_mut() {
                Some(sum) => sum.iter_mut().zip(&g).for_each(|(x, y)| *x += *y),
                None => g_feat = Some(g),
            }
        }
        let mut g = g_feat.expect("at least one branch");
        for (i, layer) in self.trunk.iter_mut().enumerate().rev() {
            let gy = layer.act.backward(&g);
            let gy = layer.bn.backward(&gy);
            g = layer.conv.backward(&gy, i > 0 || need_input)?;
        }
        Some(g)
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
        for l in &mut self.trunk {
            l.conv.clear_cache();
            l.bn.clear_cache();
            l.act.clear_cache();
        }
        for b in &mut self.branches {
            b.clear_cache();
        }
    }

    /// Copy without any cached activations.
    pub fn snapshot(&self) -> Self {
        let mut s = self.clone();
        s.clear_cache();
        s
    }

    /// Replaces the spike step with its smooth surrogate primitive in every
    /// spiking layer. Only meant for finite-difference checks.
    pub fn set_relaxed(&mut self, on: bool) {
        for l in &mut self.trunk {
            l.act.set_relaxed(on);
        }
        for b in &mut self.branches {
            b.act.set_relaxed(on);
        }
    }

    /// Trainable tensors in registry order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            let n = i + 1;
            out.push((format!("trunk.conv{n}.weight"), &l.conv.weight));
            out.push((format!("trunk.conv{n}.bias"), &l.conv.bias));
            out.push((format!("trunk.bn{n}.gamma"), &l.bn.gamma));
            out.push((format!("trunk.bn{n}.beta"), &l.bn.beta));
        }
        for b in &self.branches {
            b.named_params(&mut out);
        }
        out
    }

    /// Mutable trainable tensors, same order as [`QNetwork::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor<S>> {
        let mut out = Vec::new();
        for l in &mut self.trunk {
            out.push(&mut l.conv.weight);
            out.push(&mut l.conv.bias);
            out.push(&mut l.bn.gamma);
            out.push(&mut l.bn.beta);
        }
        for b in &mut self.branches {
            b.params_mut(&mut out);
        }
        out
    }

    /// Number of trainable scalars.
    pub fn count_params(&self) -> usize {
        self.named_params().iter().filter(|(_, t)| t.requires_grad()).map(|(_, t)| t.numel()).sum()
    }

    /// Non-trainable state: batch-norm running statistics. The `initialized`
    /// entry holds a single 0/1 value.
    pub fn named_buffers(&self) -> Vec<(String, Vec<S>)> {
        let mut out = Vec::new();
        for (i, l) in self.trunk.iter().enumerate() {
            let n = i + 1;
            out.push((format!("trunk.bn{n}.running_mean"), l.bn.running_mean().to_vec()));
            out.push((format!("trunk.bn{n}.running_var"), l.bn.running_var().to_vec()));
            let flag = if l.bn.is_initialized() { S::one() } else { S::zero() };
            out.push((format!("trunk.bn{n}.initialized"), vec![flag]));
        }
        out
    }

    pub fn load_buffers(&mut self, buffers: &[(String, Vec<S>)]) -> Result<()> {
        for (i, l) in self.trunk.iter_mut().enumerate() {
            let n = i + 1;
            let find = |suffix: &str| {
                let key = format!("trunk.bn{n}.{suffix}");
                buffers
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| v.clone())
                    .ok_or_else(|| Error::Config(format!("missing buffer `{key}`")))
            };
            let mean = find("running_mean")?;
            let var = find("running_var")?;
            let init = find("initialized")?;
            let c = l.bn.channels();
            if mean.len() != c || var.len() != c {
                return Err(Error::dim("load_buffers", format!("bn{n} channels"), c, mean.len().max(var.len())));
            }
            l.bn.set_running_stats(mean, var, init.first().is_some_and(|v| *v != S::zero()));
        }
        Ok(())
    }

    /// True once every batch-norm layer has running statistics.
    pub fn stats_initialized(&self) -> bool {
        self.trunk.iter().all(|l| l.bn.is_initialized())
    }

    /// Copies parameters and running statistics from `other`.
    pub fn copy_from(&mut self, other: &Self) {
        for (dst, (_, src)) in self.params_mut().into_iter().zip(other.named_params()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let bufs = other.named_buffers();
        self.load_buffers(&bufs).expect("identical architecture");
    }

    /// Appends parameters and buffers under `prefix.`.
    pub fn export_state(&self, prefix: &str, out: &mut StateBundle) {
        for (name, t) in self.named_params() {
            let data = ArrayData::from_scalars(t.data());
            out.push(NamedArray::new(format!("{prefix}.{name}"), t.shape(), data));
        }
        for (name, v) in self.named_buffers() {
            out.push(NamedArray::flat(format!("{prefix}.{name}"), ArrayData::from_scalars(&v)));
        }
    }

    /// Inverse of [`QNetwork::export_state`].
    pub fn import_state(&mut self, prefix: &str, bundle: &StateBundle) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, p) in names.iter().zip(self.params_mut()) {
            let v: Vec<S> = bundle.scalars(&format!("{prefix}.{name}"))?;
            if v.len() != p.numel() {
                return Err(Error::dim("import_state", name.clone(), p.numel(), v.len()));
            }
            p.data_mut().copy_from_slice(&v);
        }
        let mut bufs = Vec::new();
        for (name, _) in self.named_buffers() {
            let v = bundle.scalars(&format!("{prefix}.{name}"))?;
            bufs.push((name, v));
        }
        self.load_buffers(&bufs)?;
        self.clear_cache();
        Ok(())
    }

    /// Layer-by-layer extents, trunk first, then each stream.
    pub fn layer_trace(&self) -> Vec<LayerRow> {
        let spiking = self.spec.kind.is_spiking();
        let act_name = if spiking { "IF Neuron" } else { "ReLU" };
        let mut rows = Vec::new();
        let mut row = |stream: Option<&'static str>, layer: String, input: String, output: String| {
            rows.push(LayerRow { stream, layer, input, output })
        };
        for l in &self.trunk {
            let k = l.conv.kernel();
            row(None, format!("{k}×{k}-Convolution"), hwc(l.input), hwc(l.output));
            row(None, "BatchNorm".into(), hwc(l.output), hwc(l.output));
            row(None, act_name.into(), hwc(l.output), hwc(l.output));
        }
        let features = self.feature_len();
        let dueling = self.spec.kind.is_dueling();
        for b in &self.branches {
            let stream = if dueling && self.branches.len() > 1 { Some(b.name) } else { None };
            let width = b.fc.out_features();
            row(stream, "FC".into(), vector(features), vector(width));
            let act = if b.dendrites.is_some() { format!("{act_name} + Active Dendrites") } else { act_name.into() };
            row(stream, act, vector(width), vector(width));
            for (name, head, _) in &b.heads {
                let stream = if dueling { Some(if b.heads.len() > 1 { *name } else { b.name }) } else { None };
                let out = head.out_features();
                row(stream, "FC".into(), vector(width), vector(out));
                if spiking {
                    let acc = if dueling { "Non-Spiking Neuron" } else { "Non-Spiking IF Neuron" };
                    row(stream, acc.into(), vector(out), vector(out));
                }
            }
        }
        rows
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Pixels along one axis that reach at least one trunk output.
    fn covered(extent: usize) -> usize {
        let mut seen: Vec<std::ops::Range<usize>> = (0..extent).map(|i| i..i + 1).collect();
        for (_, k, s) in TRUNK {
            let n = (seen.len() - k) / s + 1;
            seen = (0..n).map(|o| seen[o * s].start..seen[o * s + k - 1].end).collect();
        }
        seen.last().map_or(0, |r| r.end)
    }

    #[test]
    fn trunk_sees_every_pixel_of_both_profiles() {
        for spec in [ArchitectureSpec::new(ArchKind::Dqn), ArchitectureSpec::downscale(ArchKind::Dqn)] {
            let [_, h, w] = spec.input;
            assert_eq!((covered(h), covered(w)), (h, w), "{:?}", spec.input);
        }
        assert_eq!(covered(42), 36);
    }

    fn small(kind: ArchKind) -> QNetwork<f64> {
        let mut spec = ArchitectureSpec::downscale(kind);
        spec.fc_width = 16;
        spec.action_count = 5;
        QNetwork::build(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    #[test]
    fn zero_frame_gives_finite_q() {
        for kind in ArchKind::ALL {
            let mut net = small(kind);
            let ctx = ContextSignal::one_hot(0, 3).unwrap();
            let q = net.forward(&vec![0.0; 2 * 44 * 44], 1, &ctx, BnMode::Batch, false).unwrap();
            assert_eq!(q.len(), 5);
            assert!(q.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn observation_length_checked() {
        let mut net = small(ArchKind::Dqn);
        let ctx = ContextSignal::one_hot(0, 3).unwrap();
        assert!(net.forward(&[0.0; 10], 1, &ctx, BnMode::Batch, false).is_err());
    }

    #[test]
    fn eval_needs_statistics() {
        let mut net = small(ArchKind::Dsqn);
        let ctx = ContextSignal::one_hot(0, 3).unwrap();
        let obs = vec![0.5; 2 * 44 * 44];
        assert!(net.forward(&obs, 1, &ctx, BnMode::Eval, false).is_err());
        net.forward(&obs, 1, &ctx, BnMode::Train, false).unwrap();
        assert!(net.stats_initialized());
        assert!(net.forward(&obs, 1, &ctx, BnMode::Eval, false).is_ok());
    }

    #[test]
    fn reported_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let expected = [1_693_682, 1_693_682, 3_300_339, 3_300_339, 1_693_691, 3_300_357];
        for (kind, want) in ArchKind::ALL.into_iter().zip(expected) {
            let mut spec = ArchitectureSpec::new(kind);
            spec.dendrite_sharing = crate::snn::DendriteSharing::Shared;
            let net = QNetwork::<f32>::build(&spec, &mut rng).unwrap();
            assert_eq!(net.count_params(), want, "{kind}");
        }
    }

    #[test]
    fn copy_from_is_bitwise() {
        let mut a = small(ArchKind::MtsparkAdd);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = a.spec().clone();
        let b = QNetwork::<f64>::build(&spec, &mut rng).unwrap();
        a.copy_from(&b);
        for ((_, x), (_, y)) in a.named_params().iter().zip(b.named_params()) {
            assert_eq!(x.data(), y.data());
        }
    }
}
