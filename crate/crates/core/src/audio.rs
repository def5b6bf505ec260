//! Raw waveform to log-magnitude Mel spectrogram.
//!
//! Fixed front-end: 16 kHz input, 25 ms Hann window (400 samples), 10 ms hop
//! (160 samples), 512-point FFT, 64 HTK-mel bins spanning 60–7800 Hz, natural
//! log with a 1e-6 floor. Frames are centered: the signal is reflect-padded by
//! half a window on each side and `ceil(len / hop)` frames are taken, so
//! 980 ms of audio maps to exactly 98 frames.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex32;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const WINDOW: usize = 400;
pub const HOP: usize = 160;
pub const N_FFT: usize = 512;
pub const FFT_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 64;
pub const F_LO: f32 = 60.0;
pub const F_HI: f32 = 7800.0;
pub const LOG_FLOOR: f32 = 1e-6;

/// Samples in one model input (980 ms → 98 frames).
pub const INPUT_SAMPLES: usize = 15_680;
pub const INPUT_FRAMES: usize = 98;
/// Samples in a one-second segment.
pub const SEGMENT_SAMPLES: usize = SAMPLE_RATE as usize;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Parameter("waveform contains non-finite samples".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// `len` samples starting at `start`, zero-padded past the end.
    pub fn window(&self, start: usize, len: usize) -> Waveform {
        let mut samples = vec![0.0; len];
        if start < self.samples.len() {
            let end = (start + len).min(self.samples.len());
            samples[..end - start].copy_from_slice(&self.samples[start..end]);
        }
        Waveform {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// `frames × 64` natural-log Mel magnitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelSpectrogram {
    pub frames: usize,
    pub data: Vec<f32>,
}

impl LogMelSpectrogram {
    pub fn bins(&self) -> usize {
        N_MELS
    }

    /// As a `[frames, 64, 1]` network input.
    pub fn to_tensor(&self) -> FloatTensor {
        FloatTensor::new(vec![self.frames, N_MELS, 1], self.data.clone())
            .expect("log-mel data sized frames × bins")
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let audio_err = |reason: String| Error::Audio {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => audio_err(other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels == 0 || spec.channels > 2 {
        return Err(audio_err(format!(
            "{} channels (mono or stereo only)",
            spec.channels
        )));
    }
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>(),
        (fmt, bits) => {
            return Err(audio_err(format!(
                "{bits}-bit {fmt:?} encoding (PCM-16 or 32-bit float only)"
            )))
        }
    }
    .map_err(|e| audio_err(e.to_string()))?;
    let samples = if spec.channels == 2 {
        interleaved
            .chunks_exact(2)
            .map(|c| 0.5 * (c[0] + c[1]))
            .collect()
    } else {
        interleaved
    };
    Waveform::new(samples, spec.sample_rate).map_err(|e| audio_err(e.to_string()))
}

/// Writes mono PCM-16.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Audio {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(wrap)?;
    }
    writer.finalize().map_err(wrap)
}

/// Loads a clip and brings it to 16 kHz.
pub fn load_clip(path: impl AsRef<Path>) -> Result<Waveform> {
    let w = read_wav(path)?;
    resample_linear(&w, SAMPLE_RATE)
}

/// Linear-interpolation resampler; output length is `round(len·target/source)`.
pub fn resample_linear(w: &Waveform, target: u32) -> Result<Waveform> {
    if target == 0 {
        return Err(Error::Parameter("target sample rate must be positive".into()));
    }
    if target == w.sample_rate {
        return Ok(w.clone());
    }
    let n = w.samples.len();
    let out_len = ((n as f64) * target as f64 / w.sample_rate as f64).round() as usize;
    let step = w.sample_rate as f64 / target as f64;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let i0 = pos.floor() as usize;
            if i0 + 1 >= n {
                return w.samples[n - 1];
            }
            let frac = (pos - i0 as f64) as f32;
            w.samples[i0] * (1.0 - frac) + w.samples[i0 + 1] * frac
        })
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: target,
    })
}

/// Reflect index into a signal of length `n` (numpy "reflect", no edge repeat).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

fn hann() -> &'static [f32] {
    static WIN: OnceLock<Vec<f32>> = OnceLock::new();
    WIN.get_or_init(|| {
        (0..WINDOW)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64;
                (0.5 - 0.5 * phase.cos()) as f32
            })
            .collect()
    })
}

fn fft_plan() -> Arc<dyn Fft<f32>> {
    static PLAN: OnceLock<Arc<dyn Fft<f32>>> = OnceLock::new();
    PLAN.get_or_init(|| FftPlanner::new().plan_fft_forward(N_FFT))
        .clone()
}

fn check_input(w: &Waveform) -> Result<()> {
    if w.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedRate {
            got: w.sample_rate,
            expected: SAMPLE_RATE,
        });
    }
    if w.samples.is_empty() {
        return Err(Error::Parameter("waveform has no samples".into()));
    }
    Ok(())
}

/// Number of frames produced for `len` samples.
pub fn frame_count(len: usize) -> usize {
    len.div_ceil(HOP)
}

/// Centered, Hann-windowed magnitude STFT: `[frames, 257]`.
pub fn stft_magnitude(w: &Waveform) -> Result<FloatTensor> {
    check_input(w)?;
    let n = w.samples.len();
    let frames = frame_count(n);
    let half = (WINDOW / 2) as isize;
    let win = hann();
    let fft = fft_plan();
    let mut buf = vec![Complex32::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex32::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(frames * FFT_BINS);
    for t in 0..frames {
        let origin = (t * HOP) as isize - half;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = if k < WINDOW {
                let s = w.samples[reflect(origin + k as isize, n)];
                Complex32::new(s * win[k], 0.0)
            } else {
                Complex32::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        out.extend(buf[..FFT_BINS].iter().map(|c| c.norm()));
    }
    FloatTensor::new(vec![frames, FFT_BINS], out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Center frequencies (Hz) of the `n_mels` triangular filters.
pub fn mel_centers(n_mels: usize, f_lo: f32, f_hi: f32) -> Vec<f64> {
    let lo = hz_to_mel(f_lo as f64);
    let hi = hz_to_mel(f_hi as f64);
    let step = (hi - lo) / (n_mels + 1) as f64;
    (1..=n_mels).map(|i| mel_to_hz(lo + step * i as f64)).collect()
}

/// Triangular HTK-mel filterbank, `[n_fft/2 + 1, n_mels]`.
pub fn mel_filterbank(
    sr: u32,
    n_fft: usize,
    n_mels: usize,
    f_lo: f32,
    f_hi: f32,
) -> Result<FloatTensor> {
    let nyquist = sr as f32 / 2.0;
    if !(f_lo >= 0.0 && f_lo < f_hi && f_hi <= nyquist) || n_mels == 0 || n_fft < 2 {
        return Err(Error::Parameter(format!(
            "mel range {f_lo}..{f_hi} Hz invalid for {sr} Hz, {n_mels} bands, {n_fft}-point FFT"
        )));
    }
    let lo = hz_to_mel(f_lo as f64);
    let hi = hz_to_mel(f_hi as f64);
    let step = (hi - lo) / (n_mels + 1) as f64;
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + step * i as f64))
        .collect();
    let bins = n_fft / 2 + 1;
    let mut data = vec![0.0f32; bins * n_mels];
    for k in 0..bins {
        let f = k as f64 * sr as f64 / n_fft as f64;
        for m in 0..n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            let w = ((f - l) / (c - l)).min((r - f) / (r - c));
            if w > 0.0 {
                data[k * n_mels + m] = w as f32;
            }
        }
    }
    FloatTensor::new(vec![bins, n_mels], data)
}

fn default_filterbank() -> &'static FloatTensor {
    static FB: OnceLock<FloatTensor> = OnceLock::new();
    FB.get_or_init(|| {
        mel_filterbank(SAMPLE_RATE, N_FFT, N_MELS, F_LO, F_HI).expect("default mel parameters")
    })
}

pub fn log_mel(w: &Waveform) -> Result<LogMelSpectrogram> {
    let mag = stft_magnitude(w)?;
    let frames = mag.shape()[0];
    let fb = default_filterbank().data();
    let mut data = vec![0.0f32; frames * N_MELS];
    for (t, row) in mag.data().chunks_exact(FFT_BINS).enumerate() {
        let out = &mut data[t * N_MELS..(t + 1) * N_MELS];
        for (k, &m) in row.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for (o, &f) in out.iter_mut().zip(&fb[k * N_MELS..(k + 1) * N_MELS]) {
                *o += m * f;
            }
        }
        for v in out.iter_mut() {
            *v = v.max(LOG_FLOOR).ln();
        }
    }
    Ok(LogMelSpectrogram { frames, data })
}

/// Network input for a segment starting at `start`: the first 980 ms of the
/// one-second window, as a `[98, 64, 1]` tensor.
pub fn segment_input(w: &Waveform, start: usize) -> Result<FloatTensor> {
    let seg = w.window(start, INPUT_SAMPLES);
    Ok(log_mel(&seg)?.to_tensor())
}
