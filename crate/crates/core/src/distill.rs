//! Embedding distillation: regress teacher embeddings with ½‖t − s‖².

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Waveform, N_MELS};
use crate::data::{EmbeddingFile, SegmentIndex};
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::model_io;
use crate::ops::{self, AdamConfig, AdamState, BnMode};
use crate::tensor::FloatTensor;

pub const TEACHER_DIM: usize = 1024;

/// Maps a one-second segment to a teacher embedding.
pub trait TeacherOracle: Sync {
    fn dim(&self) -> usize {
        TEACHER_DIM
    }

    /// `key` is the segment id (see [`crate::data::segment_key`]).
    fn embed(&self, key: u64, segment: &Waveform) -> Result<Vec<f32>>;
}

/// Precomputed teacher embeddings looked up by segment id.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    dim: usize,
    table: std::collections::HashMap<u64, Vec<f32>>,
}

impl FileTeacher {
    pub fn new(file: EmbeddingFile) -> Self {
        Self {
            dim: file.dim,
            table: file.records.into_iter().collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self::new(EmbeddingFile::load(path)?))
    }
}

impl TeacherOracle for FileTeacher {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, key: u64, _segment: &Waveform) -> Result<Vec<f32>> {
        self.table
            .get(&key)
            .cloned()
            .ok_or_else(|| Error::Data(format!("no teacher embedding for segment {key:#018x}")))
    }
}

const SYNTH_FEATURES: usize = 2 * N_MELS;

/// Frozen random linear projection of per-bin log-mel mean and standard
/// deviation, standardized with fixed constants.
#[derive(Debug, Clone)]
pub struct SyntheticTeacher {
    seed: u64,
    proj: Vec<f32>,
}

impl SyntheticTeacher {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (SYNTH_FEATURES as f32).sqrt();
        let proj = (0..TEACHER_DIM * SYNTH_FEATURES)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z as f32
            })
            .collect::<Vec<f32>>();
        Self { seed, proj }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn features(segment: &Waveform) -> Result<Vec<f32>> {
        let m = audio::log_mel(&segment.window(0, audio::INPUT_SAMPLES))?;
        let frames = m.frames as f32;
        let mut f = vec![0.0f32; SYNTH_FEATURES];
        for row in m.data.chunks_exact(N_MELS) {
            for (b, &v) in row.iter().enumerate() {
                f[b] += v / frames;
            }
        }
        for row in m.data.chunks_exact(N_MELS) {
            for (b, &v) in row.iter().enumerate() {
                f[N_MELS + b] += (v - f[b]).powi(2) / frames;
            }
        }
        for b in 0..N_MELS {
            f[b] = (f[b] + 6.0) / 4.0;
            f[N_MELS + b] = f[N_MELS + b].sqrt() / 2.0;
        }
        Ok(f)
    }
}

impl TeacherOracle for SyntheticTeacher {
    fn embed(&self, _key: u64, segment: &Waveform) -> Result<Vec<f32>> {
        let f = Self::features(segment)?;
        Ok(self
            .proj
            .chunks_exact(SYNTH_FEATURES)
            .map(|row| row.iter().zip(&f).map(|(a, b)| a * b).sum())
            .collect())
    }
}

/// A frozen student graph plus head used as a teacher.
#[derive(Debug, Clone)]
pub struct GraphTeacher {
    pub graph: LayerGraph,
    pub head: RegressorHead,
}

impl TeacherOracle for GraphTeacher {
    fn dim(&self) -> usize {
        self.head.out_dim()
    }

    fn embed(&self, _key: u64, segment: &Waveform) -> Result<Vec<f32>> {
        let e = self.graph.forward(&audio::segment_input(segment, 0)?)?;
        Ok(self.head.forward(&e)?.into_data())
    }
}

/// Discardable dense layer from the student embedding to the teacher space.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorHead {
    /// `[out, in]`
    pub weight: FloatTensor,
    pub bias: Vec<f32>,
    pub binary: bool,
}

impl RegressorHead {
    /// Glorot-uniform weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, binary: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let limit = (6.0 / (in_dim + out_dim) as f32).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self {
            weight: FloatTensor::new(vec![out_dim, in_dim], w).expect("sized"),
            bias: vec![0.0; out_dim],
            binary,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, e: &FloatTensor) -> Result<FloatTensor> {
        ops::dense(e, &self.weight, Some(&self.bias), self.binary)
    }
}

/// ½‖t − s‖² with f64 accumulation.
pub fn distill_loss(s: &[f32], t: &[f32]) -> Result<f64> {
    if s.len() != t.len() {
        return Err(Error::shape(format!(
            "student output {} vs teacher {}",
            s.len(),
            t.len()
        )));
    }
    Ok(0.5
        * s.iter()
            .zip(t)
            .map(|(&a, &b)| ((b - a) as f64).powi(2))
            .sum::<f64>())
}

/// Mean over rows of [`distill_loss`]; `s` and `t` are `[B, d]`.
pub fn distill_loss_batch(s: &FloatTensor, t: &FloatTensor) -> Result<f64> {
    if s.shape() != t.shape() || s.shape().len() != 2 {
        return Err(Error::shape("batch loss expects equal [B, d] tensors"));
    }
    let d = s.shape()[1];
    let b = s.shape()[0];
    let mut total = 0.0;
    for (sr, tr) in s.data().chunks_exact(d).zip(t.data().chunks_exact(d)) {
        total += distill_loss(sr, tr)?;
    }
    Ok(total / b as f64)
}

/// Gradient of [`distill_loss`] w.r.t. `s`: `s − t`.
pub fn distill_loss_grad(s: &[f32], t: &[f32]) -> Vec<f32> {
    s.iter().zip(t).map(|(a, b)| a - b).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub steps: usize,
    pub seed: u64,
    pub segment_seconds: f64,
    /// Log the running loss every this many steps.
    pub log_every: usize,
    /// Use running statistics in batch norms instead of batch statistics.
    pub freeze_bn_stats: bool,
    pub binary_head: bool,
}

impl DistillConfig {
    /// Full-scale schedule: batch 512, 234K steps.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 512,
            learning_rate: 1e-3,
            steps: 234_000,
            seed: 42,
            segment_seconds: 1.0,
            log_every: 1000,
            freeze_bn_stats: false,
            binary_head: false,
        }
    }

    /// Desk-scale schedule: batch 32, 2000 steps.
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            steps: 2000,
            log_every: 100,
            ..Self::full_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate >= 0.0) || self.log_every == 0 {
            return Err(Error::Parameter(format!("invalid distillation config {self:?}")));
        }
        if self.segment_seconds != 1.0 {
            return Err(Error::Parameter("only one-second segments are supported".into()));
        }
        Ok(())
    }
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self::full_scale()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillReport {
    /// Batch loss at every step.
    pub losses: Vec<f64>,
    pub segments: usize,
}

impl DistillReport {
    /// Mean of the first and last tenth of the trace.
    pub fn decile_means(&self) -> Option<(f64, f64)> {
        let n = self.losses.len() / 10;
        if n == 0 {
            return None;
        }
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.losses[..n]),
            mean(&self.losses[self.losses.len() - n..]),
        ))
    }
}

/// Network inputs and teacher targets of every segment, computed in parallel.
pub fn precompute(idx: &SegmentIndex, teacher: &dyn TeacherOracle) -> Result<(Vec<FloatTensor>, Vec<Vec<f32>>)> {
    let pairs: Vec<(FloatTensor, Vec<f32>)> = idx
        .segments
        .par_iter()
        .map(|&s| {
            let x = idx.input(s)?;
            let t = teacher.embed(idx.key(s), &idx.waveform(s))?;
            if t.len() != teacher.dim() || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "teacher returned an invalid embedding for segment {:#018x}",
                    idx.key(s)
                )));
            }
            Ok((x, t))
        })
        .collect::<Result<_>>()?;
    Ok(pairs.into_iter().unzip())
}

fn stack(items: &[&FloatTensor]) -> FloatTensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    FloatTensor::new(shape, data).expect("equal shapes")
}

/// Adam over the student graph and the head.
struct Optimizer {
    graph: Vec<Vec<AdamState>>,
    head_w: AdamState,
    head_b: AdamState,
    cfg: AdamConfig,
}

impl Optimizer {
    fn new(g: &mut LayerGraph, head: &RegressorHead) -> Self {
        let mut graph: Vec<Vec<AdamState>> = vec![Vec::new(); g.layers().len()];
        g.for_each_param_mut(|i, _, p| graph[i].push(AdamState::new(p.len())));
        Self {
            graph,
            head_w: AdamState::new(head.weight.len()),
            head_b: AdamState::new(head.bias.len()),
            cfg: AdamConfig::default(),
        }
    }
}

/// Runs `cfg.steps` Adam steps over seeded shuffled passes of the segments.
///
/// On a non-finite loss the student is saved to `checkpoint_dir` (when given)
/// and [`Error::NonFinite`] is returned.
pub fn train_distill(
    g: &mut LayerGraph,
    head: &mut RegressorHead,
    teacher: &dyn TeacherOracle,
    idx: &SegmentIndex,
    cfg: &DistillConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<DistillReport> {
    cfg.validate()?;
    if teacher.dim() != head.out_dim() || head.in_dim() != g.embedding_dim() {
        return Err(Error::shape(format!(
            "head maps {} → {}, student emits {}, teacher emits {}",
            head.in_dim(),
            head.out_dim(),
            g.embedding_dim(),
            teacher.dim()
        )));
    }
    if idx.is_empty() {
        return Err(Error::Data("no segments to train on".into()));
    }
    let (inputs, targets) = precompute(idx, teacher)?;
    let mut opt = Optimizer::new(g, head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mode = if cfg.freeze_bn_stats { BnMode::Infer } else { BnMode::Train };
    let d = head.out_dim();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let x = stack(&batch.iter().map(|&i| &inputs[i]).collect::<Vec<_>>());
        let t = FloatTensor::new(
            vec![batch.len(), d],
            batch.iter().flat_map(|&i| targets[i].iter().copied()).collect(),
        )?;
        let tape = g.forward_train(&x, mode)?;
        let emb = tape.output();
        let s = head.forward(emb)?;
        let loss = distill_loss_batch(&s, &t)?;
        if !loss.is_finite() {
            let checkpoint = match checkpoint_dir {
                Some(dir) => {
                    let p: PathBuf = dir.join(format!("nonfinite-step-{step}.bril"));
                    model_io::save(g, &p)?;
                    Some(p)
                }
                None => None,
            };
            return Err(Error::NonFinite { step, checkpoint });
        }
        losses.push(loss);
        if (step + 1) % cfg.log_every == 0 {
            let tail = &losses[losses.len().saturating_sub(cfg.log_every)..];
            log::info!(
                "step {:>7}  loss {:.5}",
                step + 1,
                tail.iter().sum::<f64>() / tail.len() as f64
            );
        }
        let scale = 1.0 / batch.len() as f32;
        let ds = FloatTensor::new(
            s.shape().to_vec(),
            s.data().iter().zip(t.data()).map(|(a, b)| (a - b) * scale).collect(),
        )?;
        let (demb, dw, db) = ops::dense_backward(emb, &head.weight, &ds, head.binary)?;
        let grads = g.backward(&tape, &demb)?;
        drop(tape);
        let lr = cfg.learning_rate;
        let mut status = Ok(());
        g.for_each_param_mut(|i, j, p| {
            if let Some(gr) = grads[i].get(j) {
                if status.is_ok() {
                    status = ops::adam_step(p, gr, &mut opt.graph[i][j], lr, &opt.cfg);
                }
            }
        });
        status?;
        ops::adam_step(head.weight.data_mut(), dw.data(), &mut opt.head_w, lr, &opt.cfg)?;
        ops::adam_step(&mut head.bias, &db, &mut opt.head_b, lr, &opt.cfg)?;
        if head.binary {
            head.weight.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        g.sync_binary();
    }
    Ok(DistillReport {
        losses,
        segments: inputs.len(),
    })
}

/// Saves the student alone; the regressor head is not part of the graph.
pub fn export_student(g: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    model_io::save(g, path)
}
