//! Model file format and size accounting.
//!
//! Layout (little-endian):
//!
//! ```text
//! "BRIL" u32:version u32:arch_len arch u32:layer_count u32:crc32(preceding bytes)
//! per layer: u32:record_len record u32:crc32(record), where record is
//!   u16:name_len name u8:kind u32:n_inputs u32*n_inputs
//!   u32:n_attrs u32*n_attrs u32:rank u32*rank
//!   u32:n_blobs per blob: u8:dtype u32:rank u32*rank u64:offset u64:len u32:crc32
//! blob data, concatenated in table order (offsets relative to its start)
//! ```
//!
//! Every byte is covered by a checksum, so corruption surfaces as an error
//! naming the damaged layer-table entry or blob.
//!
//! Packed binary weights are stored verbatim as `u64` words.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::graph::{Layer, LayerGraph, Op};
use crate::ops::{BatchNormParams, ConvSpec, Padding};
use crate::tensor::{self, BitTensor, FloatTensor};

pub const MAGIC: [u8; 4] = *b"BRIL";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U64: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Kind {
    RealConv = 0,
    BinaryConv = 1,
    BatchNorm = 2,
    Relu = 3,
    MaxPool = 4,
    Concat = 5,
    AddTail = 6,
    GlobalMaxPool = 7,
}

impl Kind {
    fn of(op: &Op) -> Self {
        match op {
            Op::RealConv { .. } => Kind::RealConv,
            Op::BinaryConv { .. } => Kind::BinaryConv,
            Op::BatchNorm(_) => Kind::BatchNorm,
            Op::Relu => Kind::Relu,
            Op::MaxPool { .. } => Kind::MaxPool,
            Op::Concat => Kind::Concat,
            Op::AddTail => Kind::AddTail,
            Op::GlobalMaxPool => Kind::GlobalMaxPool,
        }
    }

    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => Kind::RealConv,
            1 => Kind::BinaryConv,
            2 => Kind::BatchNorm,
            3 => Kind::Relu,
            4 => Kind::MaxPool,
            5 => Kind::Concat,
            6 => Kind::AddTail,
            7 => Kind::GlobalMaxPool,
            _ => return Err(Error::Format(format!("unknown layer kind {v}"))),
        })
    }
}

struct Blob {
    dtype: u8,
    dims: Vec<usize>,
    bytes: Vec<u8>,
}

fn f32_blob(dims: &[usize], data: &[f32]) -> Blob {
    Blob {
        dtype: DTYPE_F32,
        dims: dims.to_vec(),
        bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
    }
}

fn conv_attrs(s: &ConvSpec) -> Vec<u32> {
    [
        s.kernel_h,
        s.kernel_w,
        s.in_ch,
        s.out_ch,
        s.stride,
        matches!(s.padding, Padding::Valid) as usize,
        s.binary as usize,
        s.groups,
    ]
    .iter()
    .map(|&v| v as u32)
    .collect()
}

fn layer_payload(op: &Op) -> (Vec<u32>, Vec<Blob>) {
    match op {
        Op::RealConv { spec, weight } => (conv_attrs(spec), vec![f32_blob(weight.shape(), weight.data())]),
        Op::BinaryConv { spec, packed, .. } => (
            conv_attrs(spec),
            vec![Blob {
                dtype: DTYPE_U64,
                dims: packed.shape().to_vec(),
                bytes: packed.words().iter().flat_map(|w| w.to_le_bytes()).collect(),
            }],
        ),
        Op::BatchNorm(p) => {
            let c = [p.channels()];
            (
                vec![p.eps.to_bits()],
                vec![
                    f32_blob(&c, &p.gamma),
                    f32_blob(&c, &p.beta),
                    f32_blob(&c, &p.running_mean),
                    f32_blob(&c, &p.running_var),
                ],
            )
        }
        Op::MaxPool { k, stride } => (vec![*k as u32, *stride as u32], Vec::new()),
        Op::Relu | Op::Concat | Op::AddTail | Op::GlobalMaxPool => (Vec::new(), Vec::new()),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_dims(out: &mut Vec<u8>, dims: &[usize]) {
    put_u32(out, dims.len());
    dims.iter().for_each(|&d| put_u32(out, d));
}

/// Canonical encoding: `(header, data)`.
fn encode(g: &LayerGraph) -> (Vec<u8>, Vec<u8>) {
    let mut head = Vec::new();
    let mut data = Vec::new();
    head.extend_from_slice(&MAGIC);
    head.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut head, g.arch().len());
    head.extend_from_slice(g.arch().as_bytes());
    put_u32(&mut head, g.layers().len());
    let crc = crc32fast::hash(&head);
    head.extend_from_slice(&crc.to_le_bytes());
    for l in g.layers() {
        let mut rec = Vec::new();
        rec.extend_from_slice(&(l.name.len() as u16).to_le_bytes());
        rec.extend_from_slice(l.name.as_bytes());
        rec.push(Kind::of(&l.op) as u8);
        put_dims(&mut rec, &l.inputs);
        let (attrs, blobs) = layer_payload(&l.op);
        put_u32(&mut rec, attrs.len());
        attrs.iter().for_each(|a| rec.extend_from_slice(&a.to_le_bytes()));
        put_dims(&mut rec, &l.out_shape);
        put_u32(&mut rec, blobs.len());
        for b in blobs {
            rec.push(b.dtype);
            put_dims(&mut rec, &b.dims);
            rec.extend_from_slice(&(data.len() as u64).to_le_bytes());
            rec.extend_from_slice(&(b.bytes.len() as u64).to_le_bytes());
            rec.extend_from_slice(&crc32fast::hash(&b.bytes).to_le_bytes());
            data.extend_from_slice(&b.bytes);
        }
        put_u32(&mut head, rec.len());
        head.extend_from_slice(&rec);
        head.extend_from_slice(&crc32fast::hash(&rec).to_le_bytes());
    }
    (head, data)
}

pub fn to_bytes(g: &LayerGraph) -> Vec<u8> {
    let (mut head, data) = encode(g);
    head.extend_from_slice(&data);
    head
}

pub fn save(g: &LayerGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(g)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<LayerGraph> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn string(&mut self, len: usize) -> Result<String> {
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("non-UTF-8 name".into()))
    }

    /// Length-prefixed `u32` list, bounded to reject absurd counts early.
    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.usize()?;
        if n > 64 {
            return Err(Error::Format(format!("implausible list length {n}")));
        }
        (0..n).map(|_| self.usize()).collect()
    }
}

struct BlobRef {
    dtype: u8,
    dims: Vec<usize>,
    offset: u64,
    len: u64,
    crc: u32,
}

pub fn from_bytes(bytes: &[u8]) -> Result<LayerGraph> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r
        .take(4)
        .map_err(|_| Error::BadMagic {
            expected: MAGIC,
            found: [0; 4],
        })?
        .try_into()
        .expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            expected: VERSION,
            found: version,
        });
    }
    let arch_len = r.usize()?;
    let arch = r.string(arch_len)?;
    let n_layers = r.usize()?;
    let preamble_crc = crc32fast::hash(&bytes[..r.pos]);
    if r.u32()? != preamble_crc {
        return Err(Error::Format("file preamble failed its checksum".into()));
    }
    let mut table = Vec::new();
    for index in 0..n_layers {
        let damaged = || Error::TableCrc { index };
        let len = r.usize()?;
        let rec = r.take(len).map_err(|_| damaged())?;
        if r.u32().map_err(|_| damaged())? != crc32fast::hash(rec) {
            return Err(damaged());
        }
        let mut r = Reader { buf: rec, pos: 0 };
        let name_len = r.u16()? as usize;
        let name = r.string(name_len)?;
        let kind = Kind::from_u8(r.u8()?)?;
        let inputs = r.dims()?;
        let attrs: Vec<u32> = (0..r.dims_len()?).map(|_| r.u32()).collect::<Result<_>>()?;
        let out_shape = r.dims()?;
        let n_blobs = r.usize()?;
        if n_blobs > 8 {
            return Err(Error::Format(format!("layer `{name}` lists {n_blobs} blobs")));
        }
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            blobs.push(BlobRef {
                dtype: r.u8()?,
                dims: r.dims()?,
                offset: r.u64()?,
                len: r.u64()?,
                crc: r.u32()?,
            });
        }
        if r.pos != rec.len() {
            return Err(Error::Format(format!("layer `{name}` record has trailing bytes")));
        }
        table.push((name, kind, inputs, attrs, out_shape, blobs));
    }
    let data = &bytes[r.pos..];
    let mut expected_offset = 0u64;
    let mut layers = Vec::with_capacity(n_layers);
    for (name, kind, inputs, attrs, out_shape, blobs) in table {
        let mut payload = Vec::with_capacity(blobs.len());
        for (bi, b) in blobs.iter().enumerate() {
            if b.offset != expected_offset {
                return Err(Error::Format(format!(
                    "blob {bi} of layer `{name}` is not contiguous"
                )));
            }
            let end = b
                .offset
                .checked_add(b.len)
                .filter(|&e| e <= data.len() as u64)
                .ok_or_else(|| Error::Format(format!("blob {bi} of layer `{name}` is truncated")))?;
            let slice = &data[b.offset as usize..end as usize];
            if crc32fast::hash(slice) != b.crc {
                return Err(Error::Crc {
                    layer: name.clone(),
                    blob: bi,
                });
            }
            expected_offset = end;
            payload.push((b, slice));
        }
        let op = decode_op(&name, kind, &attrs, &payload)?;
        layers.push(Layer {
            name,
            op,
            inputs,
            out_shape,
        });
    }
    if expected_offset != data.len() as u64 {
        return Err(Error::Format("trailing bytes after blob data".into()));
    }
    LayerGraph::from_layers(arch, layers)
}

impl Reader<'_> {
    fn dims_len(&mut self) -> Result<usize> {
        let n = self.usize()?;
        if n > 64 {
            return Err(Error::Format(format!("implausible attribute count {n}")));
        }
        Ok(n)
    }
}

fn decode_f32(name: &str, b: &BlobRef, bytes: &[u8]) -> Result<FloatTensor> {
    let numel: usize = b.dims.iter().product();
    if b.dtype != DTYPE_F32 || bytes.len() != numel * 4 {
        return Err(Error::Format(format!("layer `{name}`: bad float blob")));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    FloatTensor::new(b.dims.clone(), data)
}

fn decode_conv_spec(name: &str, a: &[u32]) -> Result<ConvSpec> {
    let [kh, kw, cin, cout, stride, pad, binary, groups] = a else {
        return Err(Error::Format(format!("layer `{name}`: bad conv attributes")));
    };
    let spec = ConvSpec {
        kernel_h: *kh as usize,
        kernel_w: *kw as usize,
        in_ch: *cin as usize,
        out_ch: *cout as usize,
        stride: *stride as usize,
        padding: if *pad == 1 { Padding::Valid } else { Padding::Same },
        binary: *binary == 1,
        groups: *groups as usize,
    };
    spec.validate()?;
    Ok(spec)
}

fn decode_op(name: &str, kind: Kind, attrs: &[u32], blobs: &[(&BlobRef, &[u8])]) -> Result<Op> {
    let want = |n: usize| -> Result<()> {
        if blobs.len() != n {
            return Err(Error::Format(format!("layer `{name}` expects {n} blobs")));
        }
        Ok(())
    };
    Ok(match kind {
        Kind::RealConv => {
            want(1)?;
            let spec = decode_conv_spec(name, attrs)?;
            Op::RealConv {
                spec,
                weight: decode_f32(name, blobs[0].0, blobs[0].1)?,
            }
        }
        Kind::BinaryConv => {
            want(1)?;
            let spec = decode_conv_spec(name, attrs)?;
            let (b, bytes) = blobs[0];
            if b.dtype != DTYPE_U64 || bytes.len() % 8 != 0 {
                return Err(Error::Format(format!("layer `{name}`: bad packed blob")));
            }
            let words = bytes
                .chunks_exact(8)
                .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let packed = BitTensor::from_words(b.dims.clone(), words)?;
            Op::BinaryConv {
                spec,
                latent: tensor::unpack(&packed),
                packed,
            }
        }
        Kind::BatchNorm => {
            want(4)?;
            let [eps] = attrs else {
                return Err(Error::Format(format!("layer `{name}`: bad batch-norm attributes")));
            };
            let v: Vec<Vec<f32>> = blobs
                .iter()
                .map(|(b, s)| decode_f32(name, b, s).map(FloatTensor::into_data))
                .collect::<Result<_>>()?;
            let c = v[0].len();
            if v.iter().any(|x| x.len() != c) {
                return Err(Error::Format(format!("layer `{name}`: ragged batch-norm blobs")));
            }
            let [gamma, beta, running_mean, running_var] = <[Vec<f32>; 4]>::try_from(v).expect("4 blobs");
            Op::BatchNorm(BatchNormParams {
                gamma,
                beta,
                running_mean,
                running_var,
                eps: f32::from_bits(*eps),
            })
        }
        Kind::MaxPool => {
            want(0)?;
            let [k, stride] = attrs else {
                return Err(Error::Format(format!("layer `{name}`: bad pool attributes")));
            };
            Op::MaxPool {
                k: *k as usize,
                stride: *stride as usize,
            }
        }
        Kind::Relu => Op::Relu,
        Kind::Concat => Op::Concat,
        Kind::AddTail => Op::AddTail,
        Kind::GlobalMaxPool => Op::GlobalMaxPool,
    })
}

/// Parameter counts and storage sizes (MiB = 2²⁰ bytes).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SizeReport {
    pub param_count_total: usize,
    pub param_count_binary: usize,
    pub param_count_float: usize,
    /// Every parameter at 32 bits.
    pub float_size_mb: f64,
    /// Binary weights at 1 bit, everything else at 32 bits; no header.
    pub quantized_size_mb: f64,
    pub binary_bytes: f64,
    pub float_bytes: usize,
    /// Layer table and metadata of the serialized file.
    pub header_bytes: usize,
    pub quantized_with_header_mb: f64,
}

const MIB: f64 = (1 << 20) as f64;

pub fn size_report(g: &LayerGraph) -> SizeReport {
    let (binary, float) = g.param_counts();
    let header_bytes = encode(g).0.len();
    let binary_bytes = binary as f64 / 8.0;
    let float_bytes = 4 * float;
    let quantized = binary_bytes + float_bytes as f64;
    SizeReport {
        param_count_total: binary + float,
        param_count_binary: binary,
        param_count_float: float,
        float_size_mb: 4.0 * (binary + float) as f64 / MIB,
        quantized_size_mb: quantized / MIB,
        binary_bytes,
        float_bytes,
        header_bytes,
        quantized_with_header_mb: (quantized + header_bytes as f64) / MIB,
    }
}
