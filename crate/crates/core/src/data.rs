//! Clip manifests, one-second segment indexing and embedding files.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{self, Waveform, SEGMENT_SAMPLES};
use crate::error::{Error, Result};
use crate::tensor::FloatTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line as written on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClipEntry {
    /// Path exactly as written in the manifest; used for segment keys.
    pub key: String,
    /// `key` resolved against the manifest's directory.
    pub path: PathBuf,
    pub label: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub clips: Vec<ClipEntry>,
}

impl Manifest {
    /// Parses JSON lines; relative paths resolve against the manifest's
    /// directory. Blank lines are ignored.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        let mut clips = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClipRecord = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            clips.push(ClipEntry {
                path: base.join(&rec.path),
                key: rec.path,
                label: rec.label,
                split: rec.split,
            });
        }
        Ok(Self { clips })
    }

    pub fn write(records: &[ClipRecord], path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
        for r in records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> Vec<ClipEntry> {
        self.clips.iter().filter(|c| c.split == split).cloned().collect()
    }

    /// Sorted distinct labels over all splits.
    pub fn labels(&self) -> Vec<String> {
        let mut l: Vec<String> = self.clips.iter().filter_map(|c| c.label.clone()).collect();
        l.sort();
        l.dedup();
        l
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Stable identifier of a segment: FNV-1a of `"<manifest path>#<start sample>"`.
pub fn segment_key(clip_key: &str, start: usize) -> u64 {
    fnv1a64(format!("{clip_key}#{start}").as_bytes())
}

#[derive(Debug, Clone)]
pub struct LoadedClip {
    pub entry: ClipEntry,
    pub wave: Waveform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub clip: usize,
    /// Start sample at 16 kHz.
    pub start: usize,
}

/// Non-overlapping one-second segments of every readable clip.
#[derive(Debug, Clone)]
pub struct SegmentIndex {
    pub clips: Vec<LoadedClip>,
    pub segments: Vec<Segment>,
    /// Clips that could not be read, with the reason.
    pub skipped: Vec<(PathBuf, String)>,
}

impl SegmentIndex {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn key(&self, s: Segment) -> u64 {
        segment_key(&self.clips[s.clip].entry.key, s.start)
    }

    /// The one-second waveform of a segment (zero-padded past the clip end).
    pub fn waveform(&self, s: Segment) -> Waveform {
        self.clips[s.clip].wave.window(s.start, SEGMENT_SAMPLES)
    }

    /// Network input of a segment: `[98, 64, 1]` log-mel.
    pub fn input(&self, s: Segment) -> Result<FloatTensor> {
        audio::segment_input(&self.clips[s.clip].wave, s.start)
    }
}

/// Number of one-second segments in a clip: `floor(seconds)`, at least one.
pub fn segments_in(len: usize) -> usize {
    (len / SEGMENT_SAMPLES).max(1)
}

/// Loads `clips`, resampling to 16 kHz; unreadable files are skipped with a
/// warning.
pub fn build_segment_index(clips: &[ClipEntry]) -> SegmentIndex {
    let mut idx = SegmentIndex {
        clips: Vec::new(),
        segments: Vec::new(),
        skipped: Vec::new(),
    };
    for entry in clips {
        match audio::load_clip(&entry.path) {
            Ok(wave) if !wave.is_empty() => {
                let c = idx.clips.len();
                for k in 0..segments_in(wave.len()) {
                    idx.segments.push(Segment {
                        clip: c,
                        start: k * SEGMENT_SAMPLES,
                    });
                }
                idx.clips.push(LoadedClip {
                    entry: entry.clone(),
                    wave,
                });
            }
            Ok(_) => {
                log::warn!("skipping empty clip {}", entry.path.display());
                idx.skipped.push((entry.path.clone(), "empty clip".into()));
            }
            Err(e) => {
                log::warn!("skipping {}: {e}", entry.path.display());
                idx.skipped.push((entry.path.clone(), e.to_string()));
            }
        }
    }
    idx
}

pub const EMBEDDING_MAGIC: [u8; 4] = *b"BREM";
pub const EMBEDDING_VERSION: u32 = 1;

/// Keyed fixed-width embedding records.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub dim: usize,
    pub records: Vec<(u64, Vec<f32>)>,
}

impl EmbeddingFile {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, key: u64, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::shape(format!(
                "embedding of length {} in a {}-d file",
                v.len(),
                self.dim
            )));
        }
        self.records.push((key, v.to_vec()));
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.records.len() * (8 + 4 * self.dim));
        out.extend_from_slice(&EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for (k, v) in &self.records {
            out.extend_from_slice(&k.to_le_bytes());
            v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < 20 {
            return Err(Error::Format("embedding file shorter than its header".into()));
        }
        let magic: [u8; 4] = b[..4].try_into().expect("4 bytes");
        if magic != EMBEDDING_MAGIC {
            return Err(Error::BadMagic {
                expected: EMBEDDING_MAGIC,
                found: magic,
            });
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != EMBEDDING_VERSION {
            return Err(Error::Version {
                expected: EMBEDDING_VERSION,
                found: version,
            });
        }
        let dim = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as usize;
        let count = u64::from_le_bytes(b[12..20].try_into().expect("8 bytes")) as usize;
        let rec = 8 + 4 * dim;
        if count.checked_mul(rec).map(|n| n + 20) != Some(b.len()) {
            return Err(Error::Format(format!(
                "embedding file size does not match {count} records of dim {dim}"
            )));
        }
        let records = b[20..]
            .chunks_exact(rec)
            .map(|r| {
                let key = u64::from_le_bytes(r[..8].try_into().expect("8 bytes"));
                let v = r[8..]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                (key, v)
            })
            .collect();
        Ok(Self { dim, records })
    }
}
