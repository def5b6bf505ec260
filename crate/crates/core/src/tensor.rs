//! Dense float tensors and bit-packed ±1 tensors.
//!
//! A [`BitTensor`] packs its innermost dimension into 64-bit words,
//! least-significant bit first. Bit value 1 stands for +1 and 0 for −1. Every
//! row (one innermost vector) starts on a fresh word and the unused high bits
//! of its final word are always zero.

use crate::error::{Error, Result};

/// Row-major `f32` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Sign with `sign(0) = +1`.
#[inline]
pub fn sign(x: f32) -> f32 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[inline]
pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Mask of the valid bits in the last word of a row of `bits` bits.
#[inline]
pub(crate) fn tail_mask(bits: usize) -> u64 {
    match bits % 64 {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// Bit-packed ±1 tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

/// One packed innermost vector of a [`BitTensor`].
#[derive(Debug, Clone, Copy)]
pub struct BitRow<'a> {
    pub words: &'a [u64],
    pub len: usize,
}

impl BitTensor {
    /// Packs `words` produced elsewhere (e.g. read from a model file).
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let (rows, inner) = split_shape(&shape);
        let per_row = words_for(inner);
        if words.len() != rows * per_row {
            return Err(Error::shape(format!(
                "bit tensor {shape:?} needs {} words, got {}",
                rows * per_row,
                words.len()
            )));
        }
        let t = Self { shape, words };
        if !t.padding_is_clear() {
            return Err(Error::Format("nonzero padding bits in bit tensor".into()));
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Length of the innermost (packed) dimension.
    pub fn inner_len(&self) -> usize {
        split_shape(&self.shape).1
    }

    pub fn rows(&self) -> usize {
        split_shape(&self.shape).0
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.inner_len())
    }

    /// Total number of ±1 values.
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn row(&self, i: usize) -> BitRow<'_> {
        let w = self.words_per_row();
        BitRow {
            words: &self.words[i * w..(i + 1) * w],
            len: self.inner_len(),
        }
    }

    pub fn padding_is_clear(&self) -> bool {
        let inner = self.inner_len();
        let w = words_for(inner);
        if w == 0 || inner % 64 == 0 {
            return true;
        }
        let mask = tail_mask(inner);
        self.words.chunks(w).all(|row| row[w - 1] & !mask == 0)
    }

    /// Mutable access for tests that poke at padding.
    #[doc(hidden)]
    pub fn words_mut_unchecked(&mut self) -> &mut [u64] {
        &mut self.words
    }

    /// Clears any bits beyond the innermost length of each row.
    pub fn clear_padding(&mut self) {
        let inner = self.inner_len();
        let w = words_for(inner);
        if w == 0 {
            return;
        }
        let mask = tail_mask(inner);
        for row in self.words.chunks_mut(w) {
            row[w - 1] &= mask;
        }
    }
}

fn split_shape(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&inner, outer)) => (outer.iter().product(), inner),
        None => (1, 1),
    }
}

/// Binarizes `x` into a [`BitTensor`]: bit set iff value ≥ 0.
pub fn pack(x: &FloatTensor) -> BitTensor {
    let (rows, inner) = split_shape(x.shape());
    let per_row = words_for(inner);
    let mut words = vec![0u64; rows * per_row];
    for (r, chunk) in x.data().chunks(inner.max(1)).enumerate().take(rows) {
        pack_into(chunk, &mut words[r * per_row..(r + 1) * per_row]);
    }
    BitTensor {
        shape: x.shape().to_vec(),
        words,
    }
}

/// Packs one row of values into `out` (which must hold `ceil(len/64)` words).
#[inline]
pub(crate) fn pack_into(values: &[f32], out: &mut [u64]) {
    for (w, chunk) in out.iter_mut().zip(values.chunks(64)) {
        let mut word = 0u64;
        for (b, &v) in chunk.iter().enumerate() {
            if v >= 0.0 {
                word |= 1 << b;
            }
        }
        *w = word;
    }
}

pub fn unpack(b: &BitTensor) -> FloatTensor {
    let inner = b.inner_len();
    let per_row = b.words_per_row();
    let mut data = Vec::with_capacity(b.numel());
    for r in 0..b.rows() {
        let row = &b.words[r * per_row..(r + 1) * per_row];
        for i in 0..inner {
            let bit = (row[i / 64] >> (i % 64)) & 1;
            data.push(if bit == 1 { 1.0 } else { -1.0 });
        }
    }
    FloatTensor {
        shape: b.shape.clone(),
        data,
    }
}

/// Σ aᵢ·bᵢ over ±1 vectors, computed as `2·popcount(!(a ^ b)) − n`.
pub fn xnor_popcount_dot(a: BitRow<'_>, b: BitRow<'_>) -> Result<i64> {
    if a.len != b.len || a.words.len() != b.words.len() {
        return Err(Error::shape(format!(
            "xnor dot of lengths {} and {}",
            a.len, b.len
        )));
    }
    let n = a.len;
    if n == 0 {
        return Ok(0);
    }
    let last = a.words.len() - 1;
    let mut matches = 0u32;
    for (i, (&x, &y)) in a.words.iter().zip(b.words).enumerate() {
        let mut same = !(x ^ y);
        if i == last {
            same &= tail_mask(n);
        }
        matches += same.count_ones();
    }
    Ok(2 * matches as i64 - n as i64)
}

/// Mismatch count between two equal-length word slices with zero padding.
#[inline]
pub(crate) fn xor_popcount(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pack_small_example() {
        let x = FloatTensor::from_vec(vec![-1.5, 2.0, 0.0, -0.1]);
        let b = pack(&x);
        assert_eq!(b.words(), &[0b0110]);
        assert!(b.padding_is_clear());
    }

    #[test]
    fn all_positive_sets_data_bits_only() {
        let x = FloatTensor::full(&[3, 70], 0.5);
        let b = pack(&x);
        assert_eq!(b.words_per_row(), 2);
        for r in 0..3 {
            let row = b.row(r);
            assert_eq!(row.words[0], u64::MAX);
            assert_eq!(row.words[1], (1 << 6) - 1);
        }
    }

    #[test]
    fn unpack_matches_scalar_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..1000).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = FloatTensor::new(vec![10, 100], data.clone()).unwrap();
        let y = unpack(&pack(&x));
        for (a, b) in data.iter().zip(y.data()) {
            let expected = if *a >= 0.0 { 1.0 } else { -1.0 };
            assert_eq!(*b, expected);
        }
    }

    #[test]
    fn unpack_two_bits() {
        let b = BitTensor::from_words(vec![2], vec![0b01]).unwrap();
        assert_eq!(unpack(&b).data(), &[1.0, -1.0]);
    }

    #[test]
    fn empty_tensor_round_trips() {
        let x = FloatTensor::new(vec![0], vec![]).unwrap();
        let b = pack(&x);
        assert!(b.words().is_empty());
        assert!(unpack(&b).is_empty());
    }

    #[test]
    fn random_bit_patterns_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..4096 {
            let n = rng.gen_range(1..200);
            let mut words: Vec<u64> = (0..words_for(n)).map(|_| rng.gen()).collect();
            let last = words.len() - 1;
            words[last] &= tail_mask(n);
            let b = BitTensor::from_words(vec![n], words).unwrap();
            assert_eq!(pack(&unpack(&b)), b);
        }
    }

    #[test]
    fn nonzero_padding_is_rejected_on_construction() {
        assert!(BitTensor::from_words(vec![3], vec![0b1000]).is_err());
    }

    #[test]
    fn self_dot_and_antipodal() {
        let a = pack(&FloatTensor::full(&[64], 1.0));
        assert_eq!(xnor_popcount_dot(a.row(0), a.row(0)).unwrap(), 64);

        let x = FloatTensor::from_vec(vec![1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, 1.0, 1.0]);
        let a = pack(&x);
        let b = pack(&x.map(|v| -v));
        assert_eq!(xnor_popcount_dot(a.row(0), b.row(0)).unwrap(), -10);
    }

    #[test]
    fn dot_length_mismatch_is_shape_error() {
        let a = pack(&FloatTensor::full(&[5], 1.0));
        let b = pack(&FloatTensor::full(&[6], 1.0));
        assert!(matches!(
            xnor_popcount_dot(a.row(0), b.row(0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn dot_matches_float_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=130);
            let a: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let oracle: i64 = a
                .iter()
                .zip(&b)
                .map(|(x, y)| (sign(*x) * sign(*y)) as i64)
                .sum();
            let pa = pack(&FloatTensor::from_vec(a));
            let pb = pack(&FloatTensor::from_vec(b));
            let got = xnor_popcount_dot(pa.row(0), pb.row(0)).unwrap();
            assert_eq!(got, oracle);
            assert_eq!(got.rem_euclid(2), (n as i64).rem_euclid(2));
        }
    }
}
