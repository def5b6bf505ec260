//! Single-thread latency measurement and the intermediate-layer sweep.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LoadedClip;
use crate::error::{Error, Result};
use crate::graph::{LayerGraph, INPUT_SHAPE};
use crate::probe::{self, ProbeConfig};
use crate::tensor::FloatTensor;

pub const DEFAULT_RUNS: usize = 150;
pub const DEFAULT_WARMUP: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyResult {
    pub mean_ms: f64,
    /// Sample standard deviation (0 for a single run).
    pub std_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub runs: usize,
    pub warmup_runs: usize,
    pub threads: usize,
    pub host: String,
    pub samples_ms: Vec<f64>,
}

impl LatencyResult {
    /// Statistics of recorded per-run times.
    pub fn from_samples(samples_ms: Vec<f64>, warmup_runs: usize, host: String) -> Result<Self> {
        if samples_ms.is_empty() {
            return Err(Error::Parameter("at least one timed run is required".into()));
        }
        let n = samples_ms.len() as f64;
        let mean = samples_ms.iter().sum::<f64>() / n;
        let std = if samples_ms.len() > 1 {
            (samples_ms.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Ok(Self {
            mean_ms: mean,
            std_ms: std,
            min_ms: samples_ms.iter().copied().fold(f64::INFINITY, f64::min),
            max_ms: samples_ms.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            runs: samples_ms.len(),
            warmup_runs,
            threads: 1,
            host,
            samples_ms,
        })
    }
}

/// CPU model, architecture and OS of the running host.
pub fn host_description() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split(':').nth(1))
                .map(|v| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    format!("{cpu} ({}, {})", std::env::consts::ARCH, std::env::consts::OS)
}

/// Seeded fixed input in the log-mel value range.
pub fn bench_input(seed: u64) -> FloatTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = INPUT_SHAPE.iter().product();
    FloatTensor::new(INPUT_SHAPE.to_vec(), (0..n).map(|_| rng.gen_range(-13.8..2.0)).collect())
        .expect("sized")
}

/// Times `runs` single-example forwards after `warmup` untimed ones, inside
/// a one-thread pool.
pub fn latency_bench(g: &LayerGraph, runs: usize, warmup: usize, seed: u64) -> Result<LatencyResult> {
    if runs == 0 {
        return Err(Error::Parameter("runs must be ≥ 1".into()));
    }
    let x = bench_input(seed);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Parameter(format!("thread pool: {e}")))?;
    let samples = pool.install(|| -> Result<Vec<f64>> {
        assert_eq!(rayon::current_num_threads(), 1, "timed region must be single-threaded");
        for _ in 0..warmup {
            std::hint::black_box(g.forward(&x)?);
        }
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            std::hint::black_box(g.forward(std::hint::black_box(&x))?);
            samples.push(t.elapsed().as_secs_f64() * 1e3);
        }
        Ok(samples)
    })?;
    LatencyResult::from_samples(samples, warmup, host_description())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub layer_name: String,
    pub embedding_dim: usize,
    pub accuracy: f64,
    pub latency_ms: f64,
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// `(tap, reason)` for taps that could not be evaluated.
    pub failures: Vec<(String, String)>,
    pub host: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub probe: ProbeConfig,
    pub runs: usize,
    pub warmup: usize,
}

/// Probe accuracy, latency and size of the model truncated at each eligible
/// tap (every batch norm and transition conv), in graph order.
pub fn layer_sweep(
    g: &LayerGraph,
    train: &[LoadedClip],
    test: &[LoadedClip],
    labels: &[String],
    cfg: &SweepConfig,
) -> Result<SweepOutcome> {
    let names = g.sweep_taps();
    let taps: Vec<usize> = names
        .iter()
        .map(|n| g.layer_index(n))
        .collect::<Result<_>>()?;
    let probes = probe::train_probes_at(g, train, labels, &taps, &cfg.probe)?;
    let evals = probe::evaluate_at(g, &probes, &taps, test)?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for ((name, p), ev) in names.iter().zip(&probes).zip(&evals) {
        let row = g.truncate_at(name).and_then(|sub| {
            let lat = latency_bench(&sub, cfg.runs, cfg.warmup, cfg.probe.seed)?;
            Ok(SweepRow {
                layer_name: name.clone(),
                embedding_dim: p.dim(),
                accuracy: ev.accuracy,
                latency_ms: lat.mean_ms,
                param_count: sub.parameter_count(),
            })
        });
        match row {
            Ok(r) => rows.push(r),
            Err(e) => {
                log::warn!("sweep tap {name} failed: {e}");
                failures.push((name.clone(), e.to_string()));
            }
        }
    }
    Ok(SweepOutcome {
        rows,
        failures,
        host: host_description(),
    })
}

/// CSV: `layer_name,embedding_dim,accuracy,latency_ms,param_count`.
pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Accuracy-vs-latency scatter as a standalone SVG document.
pub fn sweep_svg(rows: &[SweepRow]) -> String {
    let (w, h, m) = (640.0, 420.0, 60.0);
    let max_lat = rows.iter().map(|r| r.latency_ms).fold(0.0, f64::max).max(1e-3);
    let px = |lat: f64| m + (w - 2.0 * m) * lat / max_lat;
    let py = |acc: f64| h - m - (h - 2.0 * m) * acc;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="black"/><line x1="{m}" y1="{m}" x2="{m}" y2="{0}" stroke="black"/>"#,
        h - m,
        w - m
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">latency (ms, max {max_lat:.3})</text>"#,
        w / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{}" transform="rotate(-90 15 {0})" text-anchor="middle">accuracy</text>"#,
        h / 2.0
    );
    for r in rows {
        let (x, y) = (px(r.latency_ms), py(r.accuracy));
        let _ = writeln!(
            s,
            r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="steelblue"><title>{} acc={:.3} lat={:.3}ms</title></circle>"#,
            r.layer_name, r.accuracy, r.latency_ms
        );
    }
    s.push_str("</svg>\n");
    s
}
