//! Frozen-encoder linear probes and full-clip evaluation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{self, Waveform, SEGMENT_SAMPLES};
use crate::data::LoadedClip;
use crate::error::{Error, Result};
use crate::graph::LayerGraph;
use crate::ops::{self, AdamConfig, AdamState};
use crate::tensor::FloatTensor;

/// Training sets below this many clips use batch size 32 instead of 64.
pub const SMALL_DATASET_CLIPS: usize = 10_000;
const SHUFFLE_STREAM: u64 = 0x5eed_5f1e;
const ENCODE_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub batch_size: usize,
    pub learning_rate: f32,
    pub epochs: usize,
    pub seed: u64,
}

impl ProbeConfig {
    /// 100 epochs at lr 0.001; batch 64, or 32 for small training sets.
    pub fn for_train_clips(n: usize, seed: u64) -> Self {
        Self {
            batch_size: if n < SMALL_DATASET_CLIPS { 32 } else { 64 },
            learning_rate: 1e-3,
            epochs: 100,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Parameter(format!("invalid probe config {self:?}")));
        }
        Ok(())
    }
}

/// Logistic-regression layer over frozen embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `[classes, dim]`
    pub weight: FloatTensor,
    pub bias: Vec<f32>,
    pub labels: Vec<String>,
}

impl LinearProbe {
    pub fn zeros(dim: usize, labels: Vec<String>) -> Self {
        Self {
            weight: FloatTensor::zeros(&[labels.len(), dim]),
            bias: vec![0.0; labels.len()],
            labels,
        }
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    /// `[N, dim]` embeddings → `[N, classes]` logits.
    pub fn logits(&self, e: &FloatTensor) -> Result<FloatTensor> {
        ops::dense(e, &self.weight, Some(&self.bias), false)
    }
}

/// Mean softmax cross-entropy over rows and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &FloatTensor, targets: &[usize]) -> Result<(f64, FloatTensor)> {
    let [n, k] = *logits.shape() else {
        return Err(Error::shape("logits must be [N, classes]"));
    };
    if targets.len() != n || targets.iter().any(|&t| t >= k) {
        return Err(Error::shape("targets do not match logits"));
    }
    let mut grad = Vec::with_capacity(n * k);
    let mut loss = 0.0f64;
    for (row, &t) in logits.data().chunks_exact(k).zip(targets) {
        let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = row.iter().map(|&v| ((v - m) as f64).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() - (row[t] - m) as f64;
        for (j, e) in exps.iter().enumerate() {
            let p = e / z - if j == t { 1.0 } else { 0.0 };
            grad.push((p / n as f64) as f32);
        }
    }
    Ok((loss / n as f64, FloatTensor::new(vec![n, k], grad)?))
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam-trained probe fed one embedding matrix per epoch.
pub struct ProbeTrainer {
    probe: LinearProbe,
    cfg: ProbeConfig,
    rng: ChaCha8Rng,
    w_state: AdamState,
    b_state: AdamState,
    adam: AdamConfig,
}

impl ProbeTrainer {
    pub fn new(dim: usize, labels: Vec<String>, cfg: &ProbeConfig) -> Self {
        let probe = LinearProbe::zeros(dim, labels);
        Self {
            w_state: AdamState::new(probe.weight.len()),
            b_state: AdamState::new(probe.bias.len()),
            probe,
            cfg: cfg.clone(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_STREAM),
            adam: AdamConfig::default(),
        }
    }

    /// One shuffled pass over `emb` (`[N, dim]`); returns the mean batch loss.
    pub fn epoch(&mut self, emb: &FloatTensor, targets: &[usize]) -> Result<f64> {
        let d = self.probe.dim();
        if emb.shape() != [targets.len(), d] {
            return Err(Error::shape(format!(
                "probe expects [{}, {d}] embeddings, got {:?}",
                targets.len(),
                emb.shape()
            )));
        }
        let mut order: Vec<usize> = (0..targets.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let x = FloatTensor::new(
                vec![chunk.len(), d],
                chunk
                    .iter()
                    .flat_map(|&i| emb.data()[i * d..(i + 1) * d].iter().copied())
                    .collect(),
            )?;
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let logits = self.probe.logits(&x)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &t)?;
            let (_, dw, db) = ops::dense_backward(&x, &self.probe.weight, &dlogits, false)?;
            ops::adam_step(
                self.probe.weight.data_mut(),
                dw.data(),
                &mut self.w_state,
                self.cfg.learning_rate,
                &self.adam,
            )?;
            ops::adam_step(&mut self.probe.bias, &db, &mut self.b_state, self.cfg.learning_rate, &self.adam)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches.max(1) as f64)
    }

    pub fn probe(&self) -> &LinearProbe {
        &self.probe
    }

    pub fn finish(self) -> LinearProbe {
        self.probe
    }
}

/// Per-epoch random segment offsets, one per clip.
pub struct SegmentSampler {
    rng: ChaCha8Rng,
}

impl SegmentSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform start sample such that the segment fits (0 for short clips).
    pub fn offsets(&mut self, clips: &[LoadedClip]) -> Vec<usize> {
        clips
            .iter()
            .map(|c| {
                let slack = c.wave.len().saturating_sub(SEGMENT_SAMPLES);
                self.rng.gen_range(0..=slack)
            })
            .collect()
    }
}

/// Class index of every clip's label; unlabeled or unknown labels are errors.
pub fn label_targets(clips: &[LoadedClip], labels: &[String]) -> Result<Vec<usize>> {
    clips
        .iter()
        .map(|c| {
            let l = c.entry.label.as_ref().ok_or_else(|| {
                Error::Data(format!("clip {} has no label", c.entry.path.display()))
            })?;
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Data(format!("label `{l}` is not in the label set")))
        })
        .collect()
}

/// `[N, 98, 64, 1]` inputs for the given segment starts, computed in parallel.
pub fn segment_batch(waves: &[&Waveform], starts: &[usize]) -> Result<FloatTensor> {
    let parts: Vec<FloatTensor> = waves
        .par_iter()
        .zip(starts.par_iter())
        .map(|(w, &s)| audio::segment_input(w, s))
        .collect::<Result<_>>()?;
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts.first().map(|p| p.shape()).unwrap_or(&[98, 64, 1]));
    FloatTensor::new(shape, parts.into_iter().flat_map(FloatTensor::into_data).collect())
}

/// Pooled outputs of `taps` (layer indices) for a batch of inputs, in chunks
/// to bound activation memory.
pub fn encode_taps(encoder: &LayerGraph, x: &FloatTensor, taps: &[usize]) -> Result<Vec<FloatTensor>> {
    let n = x.shape()[0];
    let per = x.len() / n.max(1);
    let mut outs: Vec<Vec<f32>> = vec![Vec::new(); taps.len()];
    let mut dims = vec![0; taps.len()];
    for start in (0..n).step_by(ENCODE_CHUNK) {
        let end = (start + ENCODE_CHUNK).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = FloatTensor::new(shape, x.data()[start * per..end * per].to_vec())?;
        for (k, e) in encoder.forward_taps(&chunk, taps)?.into_iter().enumerate() {
            dims[k] = e.shape()[1];
            outs[k].extend(e.into_data());
        }
    }
    outs.into_iter()
        .zip(dims)
        .map(|(d, w)| FloatTensor::new(vec![n, w], d))
        .collect()
}

fn output_tap(encoder: &LayerGraph) -> usize {
    encoder.layers().len() - 1
}

/// Trains probes on several taps at once with identical segment draws and
/// shuffles, so each equals a separate [`train_probe`] on the truncated model.
pub fn train_probes_at(
    encoder: &LayerGraph,
    train: &[LoadedClip],
    labels: &[String],
    taps: &[usize],
    cfg: &ProbeConfig,
) -> Result<Vec<LinearProbe>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training clips".into()));
    }
    let targets = label_targets(train, labels)?;
    let mut sampler = SegmentSampler::new(cfg.seed);
    let mut trainers: Option<Vec<ProbeTrainer>> = None;
    let waves: Vec<&Waveform> = train.iter().map(|c| &c.wave).collect();
    for epoch in 0..cfg.epochs {
        let starts = sampler.offsets(train);
        let x = segment_batch(&waves, &starts)?;
        let embs = encode_taps(encoder, &x, taps)?;
        let trainers = trainers.get_or_insert_with(|| {
            embs.iter()
                .map(|e| ProbeTrainer::new(e.shape()[1], labels.to_vec(), cfg))
                .collect()
        });
        for (t, e) in trainers.iter_mut().zip(&embs) {
            let loss = t.epoch(e, &targets)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    step: epoch,
                    checkpoint: None,
                });
            }
        }
        log::debug!("probe epoch {} done", epoch + 1);
    }
    Ok(trainers
        .expect("at least one epoch")
        .into_iter()
        .map(ProbeTrainer::finish)
        .collect())
}

/// Linear probe on the frozen encoder's embedding.
pub fn train_probe(
    encoder: &LayerGraph,
    train: &[LoadedClip],
    labels: &[String],
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    Ok(train_probes_at(encoder, train, labels, &[output_tap(encoder)], cfg)?
        .pop()
        .expect("one tap"))
}

/// Start samples of the non-overlapping one-second segments covering a clip.
pub fn eval_starts(len: usize) -> Vec<usize> {
    (0..len.div_ceil(SEGMENT_SAMPLES).max(1))
        .map(|k| k * SEGMENT_SAMPLES)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub class: usize,
    /// Segment-averaged logits.
    pub scores: Vec<f32>,
}

/// Averages per-segment logits (`[k, classes]`) and picks the first argmax.
pub fn aggregate_logits(logits: &FloatTensor) -> ClipPrediction {
    let [k, c] = *logits.shape() else {
        panic!("logits must be [segments, classes]");
    };
    let mut acc = vec![0.0f64; c];
    for row in logits.data().chunks_exact(c) {
        acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64);
    }
    let scores: Vec<f32> = acc.iter().map(|a| (a / k as f64) as f32).collect();
    ClipPrediction {
        class: argmax(&scores),
        scores,
    }
}

/// Full-clip prediction: zero-padded one-second segments, averaged logits.
pub fn evaluate_clip(encoder: &LayerGraph, p: &LinearProbe, clip: &Waveform) -> Result<ClipPrediction> {
    if clip.is_empty() {
        return Err(Error::Data("cannot evaluate an empty clip".into()));
    }
    let starts = eval_starts(clip.len());
    let waves = vec![clip; starts.len()];
    let x = segment_batch(&waves, &starts)?;
    let e = encode_taps(encoder, &x, &[output_tap(encoder)])?.pop().expect("one tap");
    Ok(aggregate_logits(&p.logits(&e)?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictionRow {
    pub clip_path: String,
    pub true_label: String,
    pub predicted_label: String,
    pub scores: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub rows: Vec<PredictionRow>,
}

/// Evaluates probes at several taps over labeled test clips.
pub fn evaluate_at(
    encoder: &LayerGraph,
    probes: &[LinearProbe],
    taps: &[usize],
    test: &[LoadedClip],
) -> Result<Vec<Evaluation>> {
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let labels = &probes[0].labels;
    let targets = label_targets(test, labels)?;
    let mut evals: Vec<Evaluation> = probes
        .iter()
        .map(|_| Evaluation {
            accuracy: 0.0,
            correct: 0,
            total: 0,
            rows: Vec::new(),
        })
        .collect();
    for (clip, &t) in test.iter().zip(&targets) {
        if clip.wave.is_empty() {
            return Err(Error::Data(format!("clip {} is empty", clip.entry.path.display())));
        }
        let starts = eval_starts(clip.wave.len());
        let waves = vec![&clip.wave; starts.len()];
        let x = segment_batch(&waves, &starts)?;
        let embs = encode_taps(encoder, &x, taps)?;
        for ((ev, p), e) in evals.iter_mut().zip(probes).zip(&embs) {
            let pred = aggregate_logits(&p.logits(e)?);
            ev.correct += (pred.class == t) as usize;
            ev.total += 1;
            ev.rows.push(PredictionRow {
                clip_path: clip.entry.key.clone(),
                true_label: labels[t].clone(),
                predicted_label: labels[pred.class].clone(),
                scores: pred.scores,
            });
        }
    }
    for ev in &mut evals {
        ev.accuracy = ev.correct as f64 / ev.total as f64;
    }
    Ok(evals)
}

/// Fraction of test clips whose full-clip prediction matches the label.
pub fn accuracy(encoder: &LayerGraph, p: &LinearProbe, test: &[LoadedClip]) -> Result<Evaluation> {
    Ok(evaluate_at(encoder, std::slice::from_ref(p), &[output_tap(encoder)], test)?
        .pop()
        .expect("one probe"))
}

/// CSV: `clip_path,true_label,predicted_label,score_<label>...`.
pub fn write_predictions_csv(rows: &[PredictionRow], labels: &[String], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["clip_path".to_string(), "true_label".into(), "predicted_label".into()];
    header.extend(labels.iter().map(|l| format!("score_{l}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![r.clip_path.clone(), r.true_label.clone(), r.predicted_label.clone()];
        rec.extend(r.scores.iter().map(|s| s.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
