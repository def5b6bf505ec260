//! Named layer graphs: batched forward, taped backward, pruning at taps.
//!
//! Node 0 is the network input; layer `i` produces node `i + 1`. Layers are
//! stored in topological (construction) order and only reference earlier
//! nodes. Activations are `[N, H, W, C]`; the pooled output is `[N, C]`.

use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::audio::{LogMelSpectrogram, INPUT_FRAMES, N_MELS};
use crate::error::{Error, Result};
use crate::ops::{self, BatchNormParams, BnCache, BnMode, ConvSpec};
use crate::tensor::{self, BitTensor, FloatTensor};

pub const INPUT_SHAPE: [usize; 3] = [INPUT_FRAMES, N_MELS, 1];

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    RealConv {
        spec: ConvSpec,
        weight: FloatTensor,
    },
    /// `latent` holds the trainable real weights; `packed` is `pack(latent)`
    /// and is what inference and serialization use.
    BinaryConv {
        spec: ConvSpec,
        latent: FloatTensor,
        packed: BitTensor,
    },
    BatchNorm(BatchNormParams),
    Relu,
    MaxPool {
        k: usize,
        stride: usize,
    },
    /// Channel concatenation of all inputs in order.
    Concat,
    /// `inputs[0]` with `inputs[1]` added onto its last channels.
    AddTail,
    GlobalMaxPool,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::RealConv { .. } => "conv2d",
            Op::BinaryConv { .. } => "binary-conv2d",
            Op::BatchNorm(_) => "batch-normalization",
            Op::Relu => "relu",
            Op::MaxPool { .. } => "max-pooling2d",
            Op::Concat => "concatenate",
            Op::AddTail => "add",
            Op::GlobalMaxPool => "global-max-pooling2d",
        }
    }

    /// `(binary, float)` trainable parameter counts.
    pub fn param_counts(&self) -> (usize, usize) {
        match self {
            Op::RealConv { spec, .. } => (0, spec.weight_count()),
            Op::BinaryConv { spec, .. } => (spec.weight_count(), 0),
            Op::BatchNorm(p) => (0, 2 * p.channels()),
            _ => (0, 0),
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f32]> {
        match self {
            Op::RealConv { weight, .. } => vec![weight.data_mut()],
            Op::BinaryConv { latent, .. } => vec![latent.data_mut()],
            Op::BatchNorm(p) => vec![&mut p.gamma, &mut p.beta],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
    /// Per-example output shape: `[H, W, C]`, or `[C]` after global pooling.
    pub out_shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGraph {
    arch: String,
    layers: Vec<Layer>,
}

/// Summary row for listings.
#[derive(Debug, Clone, Serialize)]
pub struct LayerInfo {
    pub index: usize,
    pub name: String,
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub out_shape: Vec<usize>,
    pub binary_params: usize,
    pub float_params: usize,
}

/// Activations and caches recorded by a training forward pass.
#[derive(Debug)]
pub struct GradTape {
    nodes: Vec<FloatTensor>,
    aux: Vec<Aux>,
    mode: BnMode,
}

#[derive(Debug)]
enum Aux {
    None,
    Bn(BnCache),
    Argmax(Vec<u32>),
}

impl GradTape {
    pub fn node(&self, i: usize) -> &FloatTensor {
        &self.nodes[i]
    }

    pub fn output(&self) -> &FloatTensor {
        self.nodes.last().expect("tape holds the input node")
    }
}

/// Per-layer gradients, in the order of each layer's parameter slices.
pub type Grads = Vec<Vec<Vec<f32>>>;

fn out_channels(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&0)
}

impl LayerGraph {
    /// Assembles a graph, checking names, wiring and shapes.
    pub fn from_layers(arch: impl Into<String>, layers: Vec<Layer>) -> Result<Self> {
        let g = Self {
            arch: arch.into(),
            layers,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        INPUT_SHAPE
    }

    pub fn embedding_dim(&self) -> usize {
        out_channels(&self.layers.last().expect("validated non-empty").out_shape)
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownLayer(name.to_string()))
    }

    pub fn enumerate_layers(&self) -> Vec<LayerInfo> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let (b, f) = l.op.param_counts();
                LayerInfo {
                    index: i,
                    name: l.name.clone(),
                    kind: l.op.kind(),
                    inputs: l.inputs.clone(),
                    out_shape: l.out_shape.clone(),
                    binary_params: b,
                    float_params: f,
                }
            })
            .collect()
    }

    /// `(binary, float)` parameter totals.
    pub fn param_counts(&self) -> (usize, usize) {
        self.layers.iter().fold((0, 0), |(b, f), l| {
            let (lb, lf) = l.op.param_counts();
            (b + lb, f + lf)
        })
    }

    pub fn parameter_count(&self) -> usize {
        let (b, f) = self.param_counts();
        b + f
    }

    /// Layers eligible as sweep taps: batch norms and transition convs.
    pub fn sweep_taps(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.op, Op::BatchNorm(_)) || l.name.ends_with("-transition-pw"))
            .map(|l| l.name.clone())
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Format("graph has no layers".into()));
        }
        let mut names = HashSet::new();
        let mut shapes: Vec<Vec<usize>> = vec![INPUT_SHAPE.to_vec()];
        for (i, l) in self.layers.iter().enumerate() {
            if !names.insert(l.name.as_str()) {
                return Err(Error::Format(format!("duplicate layer name `{}`", l.name)));
            }
            if l.inputs.is_empty() || l.inputs.iter().any(|&n| n > i) {
                return Err(Error::Format(format!(
                    "layer `{}` references a later or missing node",
                    l.name
                )));
            }
            let ins: Vec<&[usize]> = l.inputs.iter().map(|&n| shapes[n].as_slice()).collect();
            let shape = infer_shape(&l.op, &ins)
                .map_err(|e| Error::Format(format!("layer `{}`: {e}", l.name)))?;
            if shape != l.out_shape {
                return Err(Error::Format(format!(
                    "layer `{}` declares shape {:?}, inferred {:?}",
                    l.name, l.out_shape, shape
                )));
            }
            shapes.push(shape);
        }
        let last = self.layers.last().expect("non-empty");
        if !matches!(last.op, Op::GlobalMaxPool) {
            return Err(Error::Format("graph must end in global max pooling".into()));
        }
        Ok(())
    }

    fn batch_input(&self, x: &FloatTensor) -> Result<(FloatTensor, bool)> {
        match x.shape() {
            s if s == INPUT_SHAPE => {
                let mut shape = vec![1];
                shape.extend_from_slice(&INPUT_SHAPE);
                Ok((x.clone().reshape(&shape)?, true))
            }
            [_, rest @ ..] if rest == INPUT_SHAPE => Ok((x.clone(), false)),
            s => Err(Error::shape(format!(
                "model input must be {INPUT_SHAPE:?} or [N, {INPUT_SHAPE:?}], got {s:?}"
            ))),
        }
    }

    /// Embedding of a `[98, 64, 1]` input (`[d]`) or a batch (`[N, d]`).
    pub fn forward(&self, x: &FloatTensor) -> Result<FloatTensor> {
        let last = self.layers.len() - 1;
        Ok(self.forward_nodes(x, &[last])?.pop().expect("one output"))
    }

    pub fn forward_logmel(&self, m: &LogMelSpectrogram) -> Result<FloatTensor> {
        self.forward(&m.to_tensor())
    }

    /// Globally max-pooled outputs of the given layers (by index).
    pub fn forward_taps(&self, x: &FloatTensor, taps: &[usize]) -> Result<Vec<FloatTensor>> {
        self.forward_nodes(x, taps)?
            .into_iter()
            .map(|t| {
                if t.shape().len() == 4 || t.shape().len() == 3 {
                    ops::global_max_pool(&t)
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Inference forward returning the raw outputs of `wanted` layers.
    fn forward_nodes(&self, x: &FloatTensor, wanted: &[usize]) -> Result<Vec<FloatTensor>> {
        let (xb, single) = self.batch_input(x)?;
        let stop = wanted.iter().copied().max().unwrap_or(0);
        if stop >= self.layers.len() {
            return Err(Error::UnknownLayer(format!("layer index {stop}")));
        }
        // free each activation after its last consumer
        let mut last_use = vec![0usize; self.layers.len() + 1];
        for (i, l) in self.layers[..=stop].iter().enumerate() {
            for &n in &l.inputs {
                last_use[n] = i;
            }
        }
        for &w in wanted {
            last_use[w + 1] = usize::MAX;
        }
        let mut nodes: Vec<Option<FloatTensor>> = vec![None; stop + 2];
        nodes[0] = Some(xb);
        for i in 0..=stop {
            let l = &self.layers[i];
            let ins: Vec<&FloatTensor> = l
                .inputs
                .iter()
                .map(|&n| nodes[n].as_ref().expect("live input"))
                .collect();
            let (y, _) = apply(&l.op, &ins, None)?;
            for &n in &l.inputs {
                if last_use[n] == i {
                    nodes[n] = None;
                }
            }
            nodes[i + 1] = Some(y);
        }
        wanted
            .iter()
            .map(|&w| {
                let t = nodes[w + 1].clone().expect("kept");
                if single {
                    let s = t.shape()[1..].to_vec();
                    t.reshape(&s)
                } else {
                    Ok(t)
                }
            })
            .collect()
    }

    /// Training forward. In [`BnMode::Train`] batch norms use batch
    /// statistics and update their running averages.
    pub fn forward_train(&mut self, x: &FloatTensor, mode: BnMode) -> Result<GradTape> {
        let (xb, _) = self.batch_input(x)?;
        let mut nodes = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        nodes.push(xb);
        for l in self.layers.iter_mut() {
            let ins: Vec<&FloatTensor> = l.inputs.iter().map(|&n| &nodes[n]).collect();
            let (y, a) = match (&mut l.op, mode) {
                (Op::BatchNorm(p), BnMode::Train) => {
                    let (y, c) = ops::batch_norm_train(ins[0], p)?;
                    (y, Aux::Bn(c))
                }
                (op, _) => apply(op, &ins, Some(()))?,
            };
            nodes.push(y);
            aux.push(a);
        }
        Ok(GradTape { nodes, aux, mode })
    }

    /// Reverse pass from the gradient of the final output.
    pub fn backward(&self, tape: &GradTape, d_out: &FloatTensor) -> Result<Grads> {
        if d_out.shape() != tape.output().shape() {
            return Err(Error::shape("output gradient does not match the forward output"));
        }
        let n = self.layers.len();
        let mut dnodes: Vec<Option<FloatTensor>> = vec![None; n + 1];
        dnodes[n] = Some(d_out.clone());
        let mut grads: Grads = vec![Vec::new(); n];
        for i in (0..n).rev() {
            let Some(dy) = dnodes[i + 1].take() else {
                continue;
            };
            let l = &self.layers[i];
            let x = &tape.nodes[l.inputs[0]];
            let mut dins: Vec<FloatTensor> = Vec::with_capacity(l.inputs.len());
            match (&l.op, &tape.aux[i]) {
                (Op::RealConv { spec, weight }, _) => {
                    let (dx, dw) = ops::real_conv2d_backward(x, weight, spec, &dy)?;
                    grads[i] = vec![dw.into_data()];
                    dins.push(dx);
                }
                (Op::BinaryConv { spec, latent, .. }, _) => {
                    let (dx, dw) = ops::binary_conv2d_backward(x, latent, spec, &dy)?;
                    grads[i] = vec![dw.into_data()];
                    dins.push(dx);
                }
                (Op::BatchNorm(p), Aux::Bn(cache)) => {
                    let (dx, dg, db) = ops::batch_norm_train_backward(&dy, x, p, cache)?;
                    grads[i] = vec![dg, db];
                    dins.push(dx);
                }
                (Op::BatchNorm(p), _) => {
                    debug_assert_eq!(tape.mode, BnMode::Infer);
                    let (dx, dg, db) = ops::batch_norm_infer_backward(&dy, x, p)?;
                    grads[i] = vec![dg, db];
                    dins.push(dx);
                }
                (Op::Relu, _) => dins.push(ops::relu_backward(&dy, x)),
                (Op::MaxPool { .. } | Op::GlobalMaxPool, Aux::Argmax(idx)) => {
                    dins.push(ops::max_backward(&dy, idx, x.shape()));
                }
                (Op::Concat, _) => {
                    let widths: Vec<usize> = l
                        .inputs
                        .iter()
                        .map(|&k| out_channels(tape.nodes[k].shape()))
                        .collect();
                    dins = split_channels(&dy, &widths)?;
                }
                (Op::AddTail, _) => {
                    let tail = out_channels(tape.nodes[l.inputs[1]].shape());
                    let c = out_channels(dy.shape());
                    let mut shape = dy.shape().to_vec();
                    *shape.last_mut().expect("rank ≥ 1") = tail;
                    let dt: Vec<f32> = dy
                        .data()
                        .chunks_exact(c)
                        .flat_map(|px| px[c - tail..].iter().copied())
                        .collect();
                    let dtail = FloatTensor::new(shape, dt)?;
                    dins.push(dy);
                    dins.push(dtail);
                }
                (op, _) => {
                    return Err(Error::Format(format!(
                        "missing tape entry for `{}` ({})",
                        l.name,
                        op.kind()
                    )))
                }
            }
            for (&node, d) in l.inputs.iter().zip(dins) {
                if node == 0 {
                    continue;
                }
                match &mut dnodes[node] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(d.data())
                        .for_each(|(a, b)| *a += b),
                    slot => *slot = Some(d),
                }
            }
        }
        Ok(grads)
    }

    /// Visits each trainable parameter slice with its layer index and slot.
    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, usize, &mut [f32])) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (j, p) in l.op.param_slices_mut().into_iter().enumerate() {
                f(i, j, p);
            }
        }
    }

    /// Clips binary latent weights to `[-1, 1]` and refreshes the packed bits.
    pub fn sync_binary(&mut self) {
        for l in &mut self.layers {
            if let Op::BinaryConv { latent, packed, .. } = &mut l.op {
                latent.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                *packed = tensor::pack(latent);
            }
        }
    }

    /// Subgraph of the ancestors of `tap`, ending in global max pooling.
    pub fn truncate_at(&self, tap: &str) -> Result<LayerGraph> {
        let t = self.layer_index(tap)?;
        let mut keep = vec![false; self.layers.len()];
        keep[t] = true;
        for i in (0..=t).rev() {
            if keep[i] {
                for &n in &self.layers[i].inputs {
                    if n > 0 {
                        keep[n - 1] = true;
                    }
                }
            }
        }
        let mut remap: HashMap<usize, usize> = HashMap::from([(0, 0)]);
        let mut layers = Vec::new();
        for (i, l) in self.layers.iter().enumerate().take(t + 1) {
            if !keep[i] {
                continue;
            }
            let mut l = l.clone();
            l.inputs = l.inputs.iter().map(|n| remap[n]).collect();
            layers.push(l);
            remap.insert(i + 1, layers.len());
        }
        let tapped = &self.layers[t];
        if !matches!(tapped.op, Op::GlobalMaxPool) {
            let c = out_channels(&tapped.out_shape);
            layers.push(Layer {
                name: format!("global-max-pooling2d-{tap}"),
                op: Op::GlobalMaxPool,
                inputs: vec![layers.len()],
                out_shape: vec![c],
            });
        }
        let arch = if t + 1 == self.layers.len() {
            self.arch.clone()
        } else {
            format!("{}@{tap}", self.arch)
        };
        LayerGraph::from_layers(arch, layers)
    }
}

fn split_channels(dy: &FloatTensor, widths: &[usize]) -> Result<Vec<FloatTensor>> {
    let c: usize = widths.iter().sum();
    let mut outs: Vec<Vec<f32>> = widths
        .iter()
        .map(|w| Vec::with_capacity(dy.len() / c * w))
        .collect();
    for px in dy.data().chunks_exact(c) {
        let mut off = 0;
        for (o, &w) in outs.iter_mut().zip(widths) {
            o.extend_from_slice(&px[off..off + w]);
            off += w;
        }
    }
    outs.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = dy.shape().to_vec();
            *shape.last_mut().expect("rank ≥ 1") = w;
            FloatTensor::new(shape, d)
        })
        .collect()
}

/// Inference-mode application of one op. `record` asks for argmax caches.
fn apply(op: &Op, ins: &[&FloatTensor], record: Option<()>) -> Result<(FloatTensor, Aux)> {
    let x = ins[0];
    Ok(match op {
        Op::RealConv { spec, weight } => (ops::real_conv2d(x, weight, spec)?, Aux::None),
        Op::BinaryConv { spec, packed, .. } => {
            (ops::binary_conv2d_signed(x, packed, spec)?, Aux::None)
        }
        Op::BatchNorm(p) => (ops::batch_norm_infer(x, p)?, Aux::None),
        Op::Relu => (ops::relu(x), Aux::None),
        Op::MaxPool { k, stride } => {
            let (y, idx) = ops::max_pool2d_with_indices(x, *k, *stride)?;
            (y, keep_idx(idx, record))
        }
        Op::GlobalMaxPool => {
            let (y, idx) = ops::global_max_pool_with_indices(x)?;
            (y, keep_idx(idx, record))
        }
        Op::Concat => (concat_channels(ins)?, Aux::None),
        Op::AddTail => {
            let (base, delta) = (ins[0], ins[1]);
            let c = out_channels(base.shape());
            let t = out_channels(delta.shape());
            if base.len() / c != delta.len() / t || t > c {
                return Err(Error::shape("add: incompatible operands"));
            }
            let mut y = base.clone();
            for (px, d) in y.data_mut().chunks_exact_mut(c).zip(delta.data().chunks_exact(t)) {
                px[c - t..].iter_mut().zip(d).for_each(|(a, b)| *a += b);
            }
            (y, Aux::None)
        }
    })
}

fn keep_idx(idx: Vec<u32>, record: Option<()>) -> Aux {
    match record {
        Some(()) => Aux::Argmax(idx),
        None => Aux::None,
    }
}

fn concat_channels(ins: &[&FloatTensor]) -> Result<FloatTensor> {
    let widths: Vec<usize> = ins.iter().map(|t| out_channels(t.shape())).collect();
    let c: usize = widths.iter().sum();
    let pixels = ins[0].len() / widths[0];
    if ins.iter().zip(&widths).any(|(t, w)| t.len() / w != pixels) {
        return Err(Error::shape("concat: spatial extents differ"));
    }
    let mut data = Vec::with_capacity(pixels * c);
    for p in 0..pixels {
        for (t, &w) in ins.iter().zip(&widths) {
            data.extend_from_slice(&t.data()[p * w..(p + 1) * w]);
        }
    }
    let mut shape = ins[0].shape().to_vec();
    *shape.last_mut().expect("rank ≥ 1") = c;
    FloatTensor::new(shape, data)
}

/// Per-example output shape of `op` given its input shapes.
pub(crate) fn infer_shape(op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let spatial = |s: &[usize]| -> Result<(usize, usize, usize)> {
        match *s {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected [H, W, C], got {s:?}"))),
        }
    };
    let arity = match op {
        Op::Concat => ins.len().max(2),
        Op::AddTail => 2,
        _ => 1,
    };
    if ins.len() != arity {
        return Err(Error::shape(format!("{} takes {arity} input(s)", op.kind())));
    }
    match op {
        Op::RealConv { spec, weight } => {
            if weight.shape() != spec.weight_shape() {
                return Err(Error::shape("conv weight does not match spec"));
            }
            conv_shape(spec, spatial(ins[0])?)
        }
        Op::BinaryConv { spec, latent, packed } => {
            if latent.shape() != spec.weight_shape() || packed.shape() != spec.weight_shape() {
                return Err(Error::shape("binary conv weights do not match spec"));
            }
            conv_shape(spec, spatial(ins[0])?)
        }
        Op::BatchNorm(p) => {
            let (h, w, c) = spatial(ins[0])?;
            if c != p.channels() {
                return Err(Error::shape("batch norm channel mismatch"));
            }
            Ok(vec![h, w, c])
        }
        Op::Relu => {
            let (h, w, c) = spatial(ins[0])?;
            Ok(vec![h, w, c])
        }
        Op::MaxPool { k, stride } => {
            let (h, w, c) = spatial(ins[0])?;
            if *k == 0 || *stride == 0 {
                return Err(Error::Parameter("pool size and stride must be positive".into()));
            }
            Ok(vec![h.div_ceil(*stride), w.div_ceil(*stride), c])
        }
        Op::GlobalMaxPool => Ok(vec![spatial(ins[0])?.2]),
        Op::Concat => {
            let (h, w, _) = spatial(ins[0])?;
            let mut c = 0;
            for s in ins {
                let (hh, ww, cc) = spatial(s)?;
                if (hh, ww) != (h, w) {
                    return Err(Error::shape("concat: spatial extents differ"));
                }
                c += cc;
            }
            Ok(vec![h, w, c])
        }
        Op::AddTail => {
            let (h, w, c) = spatial(ins[0])?;
            let (hh, ww, t) = spatial(ins[1])?;
            if (hh, ww) != (h, w) || t > c {
                return Err(Error::shape("add: incompatible operands"));
            }
            Ok(vec![h, w, c])
        }
    }
}

fn conv_shape(spec: &ConvSpec, (h, w, c): (usize, usize, usize)) -> Result<Vec<usize>> {
    spec.validate()?;
    if c != spec.in_ch {
        return Err(Error::shape(format!(
            "conv expects {} channels, got {c}",
            spec.in_ch
        )));
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(vec![ho, wo, spec.out_ch])
}

/// Incremental graph construction with shape tracking, ordinal names and
/// seeded Glorot-uniform initialization.
pub struct GraphBuilder {
    layers: Vec<Layer>,
    shapes: Vec<Vec<usize>>,
    counters: HashMap<&'static str, usize>,
    rng: ChaCha8Rng,
}

impl GraphBuilder {
    pub fn new(seed: u64) -> Self {
        Self {
            layers: Vec::new(),
            shapes: vec![INPUT_SHAPE.to_vec()],
            counters: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Node id of the network input.
    pub fn input(&self) -> usize {
        0
    }

    pub fn shape(&self, node: usize) -> &[usize] {
        &self.shapes[node]
    }

    pub fn channels(&self, node: usize) -> usize {
        out_channels(&self.shapes[node])
    }

    fn push(&mut self, name: Option<String>, op: Op, inputs: Vec<usize>) -> usize {
        let kind = op.kind();
        let name = name.unwrap_or_else(|| {
            let k = self.counters.entry(kind).or_insert(0);
            *k += 1;
            format!("{kind}-{k}")
        });
        let ins: Vec<&[usize]> = inputs.iter().map(|&n| self.shapes[n].as_slice()).collect();
        let out_shape = infer_shape(&op, &ins)
            .unwrap_or_else(|e| panic!("building `{name}`: {e}"));
        self.shapes.push(out_shape.clone());
        self.layers.push(Layer {
            name,
            op,
            inputs,
            out_shape,
        });
        self.layers.len()
    }

    fn glorot(&mut self, spec: &ConvSpec) -> FloatTensor {
        let shape = spec.weight_shape();
        let rf = spec.kernel_h * spec.kernel_w;
        let fan_in = rf * shape[3];
        let fan_out = rf * spec.out_ch / spec.groups;
        let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
        let data = (0..spec.weight_count())
            .map(|_| self.rng.gen_range(-limit..limit))
            .collect();
        FloatTensor::new(shape.to_vec(), data).expect("sized by spec")
    }

    pub fn conv(&mut self, x: usize, spec: ConvSpec) -> usize {
        self.conv_named(x, spec, None)
    }

    pub fn conv_named(&mut self, x: usize, spec: ConvSpec, name: Option<String>) -> usize {
        let w = self.glorot(&spec);
        let op = if spec.binary {
            let packed = tensor::pack(&w);
            Op::BinaryConv {
                spec,
                latent: w,
                packed,
            }
        } else {
            Op::RealConv { spec, weight: w }
        };
        self.push(name, op, vec![x])
    }

    pub fn batch_norm(&mut self, x: usize) -> usize {
        let c = self.channels(x);
        self.push(None, Op::BatchNorm(BatchNormParams::identity(c)), vec![x])
    }

    pub fn relu(&mut self, x: usize) -> usize {
        self.push(None, Op::Relu, vec![x])
    }

    pub fn max_pool(&mut self, x: usize, k: usize, stride: usize) -> usize {
        self.push(None, Op::MaxPool { k, stride }, vec![x])
    }

    pub fn concat(&mut self, inputs: Vec<usize>) -> usize {
        self.push(None, Op::Concat, inputs)
    }

    pub fn add_tail(&mut self, base: usize, delta: usize) -> usize {
        self.push(None, Op::AddTail, vec![base, delta])
    }

    pub fn global_max_pool(&mut self, x: usize) -> usize {
        self.push(None, Op::GlobalMaxPool, vec![x])
    }

    pub fn finish(self, arch: impl Into<String>) -> Result<LayerGraph> {
        LayerGraph::from_layers(arch, self.layers)
    }
}
