//! Student architectures: binary DenseNet-28, MeliusNet22 and tapped
//! sub-models of DenseNet-28.
//!
//! Both networks use a real-valued stem that reaches stride 16 (98×64 → 7×4)
//! and real-valued grouped 1×1 transitions between binary blocks.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, LayerGraph};
use crate::ops::ConvSpec;

pub const GROWTH: usize = 64;
pub const TRANSITION_GROUPS: usize = 16;
pub const DEFAULT_TAP: &str = "batch-normalization-12";

const DENSENET_BLOCKS: [usize; 4] = [6, 6, 6, 5];
const DENSENET_TRANSITIONS: [usize; 3] = [160, 160, 256];
const MELIUS_BLOCKS: [usize; 4] = [4, 5, 4, 6];
const MELIUS_TRANSITIONS: [usize; 3] = [128, 128, 128];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Densenet28,
    Meliusnet22,
    /// DenseNet-28 truncated at the named layer.
    Tiny(String),
}

impl Arch {
    pub fn build(&self, seed: u64) -> Result<LayerGraph> {
        match self {
            Arch::Densenet28 => build_densenet28(seed),
            Arch::Meliusnet22 => build_meliusnet22(seed),
            Arch::Tiny(tap) => build_tiny(tap, seed),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::Densenet28 => f.write_str("densenet28"),
            Arch::Meliusnet22 => f.write_str("meliusnet22"),
            Arch::Tiny(tap) if tap == DEFAULT_TAP => f.write_str("tiny"),
            Arch::Tiny(tap) => write!(f, "tiny:{tap}"),
        }
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Accepts `densenet28`, `meliusnet22`, `tiny` and `tiny:<layer>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "densenet28" => Ok(Arch::Densenet28),
            "meliusnet22" => Ok(Arch::Meliusnet22),
            "tiny" => Ok(Arch::Tiny(DEFAULT_TAP.into())),
            _ => match s.strip_prefix("tiny:") {
                Some(tap) if !tap.is_empty() => Ok(Arch::Tiny(tap.into())),
                _ => Err(Error::Parameter(format!(
                    "unknown architecture `{s}` (densenet28, meliusnet22, tiny[:layer])"
                ))),
            },
        }
    }
}

/// Real stem reaching stride 16: 4×4/4 patch conv and a 2×2 max pool, then
/// 3×3 convs (`(channels, stride)` each), all followed by BN and ReLU.
fn stem(b: &mut GraphBuilder, patch: usize, convs: &[(usize, usize)]) -> usize {
    let x = b.input();
    let x = b.conv(x, ConvSpec::real(4, 1, patch).with_stride(4));
    let x = b.batch_norm(x);
    let x = b.relu(x);
    let mut x = b.max_pool(x, 2, 2);
    for &(c, s) in convs {
        let cin = b.channels(x);
        x = b.conv(x, ConvSpec::real(3, cin, c).with_stride(s));
        x = b.batch_norm(x);
        x = b.relu(x);
    }
    x
}

/// BN → max pool → ReLU → grouped real 1×1 conv.
fn transition(b: &mut GraphBuilder, x: usize, section: usize, out: usize) -> usize {
    let x = b.batch_norm(x);
    let x = b.max_pool(x, 2, 2);
    let x = b.relu(x);
    let cin = b.channels(x);
    b.conv_named(
        x,
        ConvSpec::real(1, cin, out).with_groups(TRANSITION_GROUPS),
        Some(format!("section-{section}-transition-pw")),
    )
}

/// BN → binary 3×3 conv producing `GROWTH` channels.
fn binary_unit(b: &mut GraphBuilder, x: usize) -> usize {
    let n = b.batch_norm(x);
    let cin = b.channels(n);
    b.conv(n, ConvSpec::binary(3, cin, GROWTH))
}

/// Binary DenseNet-28: 576-d embedding.
pub fn build_densenet28(seed: u64) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(seed);
    let mut x = stem(&mut b, 96, &[(128, 2)]);
    for (i, &n) in DENSENET_BLOCKS.iter().enumerate() {
        for _ in 0..n {
            let y = binary_unit(&mut b, x);
            x = b.concat(vec![x, y]);
        }
        if let Some(&out) = DENSENET_TRANSITIONS.get(i) {
            x = transition(&mut b, x, i + 1, out);
        }
    }
    let x = b.batch_norm(x);
    b.global_max_pool(x);
    b.finish(Arch::Densenet28.to_string())
}

/// MeliusNet22: dense steps add 64 channels, improvement steps refine the
/// newest 64; 512-d embedding.
pub fn build_meliusnet22(seed: u64) -> Result<LayerGraph> {
    let mut b = GraphBuilder::new(seed);
    let mut x = stem(&mut b, 32, &[(64, 2), (128, 1)]);
    for (i, &n) in MELIUS_BLOCKS.iter().enumerate() {
        for _ in 0..n {
            let y = binary_unit(&mut b, x);
            x = b.concat(vec![x, y]);
            let d = binary_unit(&mut b, x);
            x = b.add_tail(x, d);
        }
        if let Some(&out) = MELIUS_TRANSITIONS.get(i) {
            x = transition(&mut b, x, i + 1, out);
        }
    }
    let x = b.batch_norm(x);
    b.global_max_pool(x);
    b.finish(Arch::Meliusnet22.to_string())
}

/// DenseNet-28 truncated at `tap` followed by global max pooling.
pub fn build_tiny(tap: &str, seed: u64) -> Result<LayerGraph> {
    let full = build_densenet28(seed)?;
    let mut g = full.truncate_at(tap)?;
    if g.layers().len() < full.layers().len() {
        g = LayerGraph::from_layers(Arch::Tiny(tap.into()).to_string(), g.layers().to_vec())?;
    }
    Ok(g)
}
