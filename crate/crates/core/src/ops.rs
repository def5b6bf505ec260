//! Forward and backward primitives for binary and real-valued layers.
//!
//! Activations are channels-last: `[N, H, W, C]`, or `[H, W, C]` for a single
//! example (treated as `N = 1`, and results keep the caller's rank).
//! Convolution weights are `[out, kh, kw, in/groups]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, sign, BitTensor, FloatTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub padding: Padding,
    pub binary: bool,
    pub groups: usize,
}

impl ConvSpec {
    pub fn real(k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            kernel_h: k,
            kernel_w: k,
            in_ch,
            out_ch,
            stride: 1,
            padding: Padding::Same,
            binary: false,
            groups: 1,
        }
    }

    pub fn binary(k: usize, in_ch: usize, out_ch: usize) -> Self {
        Self {
            binary: true,
            ..Self::real(k, in_ch, out_ch)
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kernel_h >= 1
            && self.kernel_w >= 1
            && self.in_ch >= 1
            && self.out_ch >= 1
            && self.stride >= 1
            && self.groups >= 1
            && self.in_ch % self.groups == 0
            && self.out_ch % self.groups == 0;
        if !ok {
            return Err(Error::Parameter(format!("invalid convolution {self:?}")));
        }
        if self.binary && self.groups != 1 {
            return Err(Error::Parameter(
                "grouped binary convolutions are not supported".into(),
            ));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_ch,
            self.kernel_h,
            self.kernel_w,
            self.in_ch / self.groups,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }

    /// Patch length per group: `kh·kw·in/groups`.
    fn patch_len(&self) -> usize {
        self.kernel_h * self.kernel_w * (self.in_ch / self.groups)
    }

    /// Output size and leading padding along one axis.
    fn axis(&self, size: usize, k: usize) -> Result<(usize, usize)> {
        match self.padding {
            Padding::Valid => {
                if size < k {
                    return Err(Error::shape(format!(
                        "input extent {size} smaller than kernel {k}"
                    )));
                }
                Ok(((size - k) / self.stride + 1, 0))
            }
            Padding::Same => Ok(same_axis(size, k, self.stride)),
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((self.axis(h, self.kernel_h)?.0, self.axis(w, self.kernel_w)?.0))
    }
}

/// TF-style "same": `out = ceil(size/stride)`, padding split with the extra
/// element at the end.
fn same_axis(size: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = size.div_ceil(stride);
    let total = ((out - 1) * stride + k).saturating_sub(size);
    (out, total / 2)
}

fn dims4(x: &FloatTensor) -> Result<(usize, usize, usize, usize)> {
    match *x.shape() {
        [h, w, c] => Ok((1, h, w, c)),
        [n, h, w, c] => Ok((n, h, w, c)),
        ref s => Err(Error::shape(format!("expected [N,]H,W,C activations, got {s:?}"))),
    }
}

fn shaped_like(x: &FloatTensor, n: usize, h: usize, w: usize, c: usize, data: Vec<f32>) -> FloatTensor {
    let shape = if x.shape().len() == 3 {
        vec![h, w, c]
    } else {
        vec![n, h, w, c]
    };
    FloatTensor::new(shape, data).expect("sized by construction")
}

/// `C (m×n) = A (m×k) · B (k×n) + beta·C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // matrixmultiply reads/writes through raw pointers; check the extents.
    let span = |rows: usize, cols: usize, rs: usize, cs: usize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    assert!(c.len() >= span(m, n, rsc, csc));
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

struct Geometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

fn geometry(x: &FloatTensor, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (n, h, w, c) = dims4(x)?;
    if c != spec.in_ch {
        return Err(Error::shape(format!(
            "convolution expects {} input channels, got {c}",
            spec.in_ch
        )));
    }
    let (ho, pt) = spec.axis(h, spec.kernel_h)?;
    let (wo, pl) = spec.axis(w, spec.kernel_w)?;
    Ok(Geometry {
        n,
        h,
        w,
        c,
        ho,
        wo,
        pt,
        pl,
    })
}

/// Unfolds the channels `[g·cg, (g+1)·cg)` into `[N·Ho·Wo, kh·kw·cg]` rows.
fn im2col(
    x: &[f32],
    g: &Geometry,
    spec: &ConvSpec,
    group: usize,
    map: impl Fn(f32) -> f32,
    pad: f32,
) -> Vec<f32> {
    let cg = spec.in_ch / spec.groups;
    let c0 = group * cg;
    let k = spec.patch_len();
    let mut cols = vec![pad; g.n * g.ho * g.wo * k];
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let dst = &mut cols[row * k..(row + 1) * k];
                for i in 0..spec.kernel_h {
                    let iy = (oy * spec.stride + i) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..spec.kernel_w {
                        let ix = (ox * spec.stride + j) as isize - g.pl as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c + c0;
                        let off = (i * spec.kernel_w + j) * cg;
                        for (d, &s) in dst[off..off + cg].iter_mut().zip(&x[src..src + cg]) {
                            *d = map(s);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Scatter-adds column gradients back onto the input (padding is dropped).
fn col2im_add(dcols: &[f32], g: &Geometry, spec: &ConvSpec, group: usize, dx: &mut [f32]) {
    let cg = spec.in_ch / spec.groups;
    let c0 = group * cg;
    let k = spec.patch_len();
    let mut row = 0;
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let src = &dcols[row * k..(row + 1) * k];
                for i in 0..spec.kernel_h {
                    let iy = (oy * spec.stride + i) as isize - g.pt as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for j in 0..spec.kernel_w {
                        let ix = (ox * spec.stride + j) as isize - g.pl as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + iy as usize) * g.w + ix as usize) * g.c + c0;
                        let off = (i * spec.kernel_w + j) * cg;
                        for (d, &s) in dx[dst..dst + cg].iter_mut().zip(&src[off..off + cg]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn check_weight(w: &[usize], spec: &ConvSpec) -> Result<()> {
    if w != spec.weight_shape() {
        return Err(Error::shape(format!(
            "weight shape {w:?} does not match {:?}",
            spec.weight_shape()
        )));
    }
    Ok(())
}

/// Standard cross-correlation with real weights (zero padding).
pub fn real_conv2d(x: &FloatTensor, w: &FloatTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    if spec.binary {
        return Err(Error::Parameter("real_conv2d called with a binary spec".into()));
    }
    let g = geometry(x, spec)?;
    check_weight(w.shape(), spec)?;
    let p = g.n * g.ho * g.wo;
    let k = spec.patch_len();
    let o = spec.out_ch;
    let og = o / spec.groups;
    let mut out = vec![0.0f32; p * o];
    for grp in 0..spec.groups {
        let cols = im2col(x.data(), &g, spec, grp, |v| v, 0.0);
        gemm(
            p,
            k,
            og,
            &cols,
            k,
            1,
            &w.data()[grp * og * k..],
            1,
            k,
            0.0,
            &mut out[grp * og..],
            o,
            1,
        );
    }
    Ok(shaped_like(x, g.n, g.ho, g.wo, o, out))
}

/// Gradients of [`real_conv2d`] w.r.t. input and weights.
pub fn real_conv2d_backward(
    x: &FloatTensor,
    w: &FloatTensor,
    spec: &ConvSpec,
    dy: &FloatTensor,
) -> Result<(FloatTensor, FloatTensor)> {
    conv_backward(x, w.data(), spec, dy, false)
}

fn conv_backward(
    x: &FloatTensor,
    w: &[f32],
    spec: &ConvSpec,
    dy: &FloatTensor,
    binary: bool,
) -> Result<(FloatTensor, FloatTensor)> {
    let g = geometry(x, spec)?;
    let p = g.n * g.ho * g.wo;
    let k = spec.patch_len();
    let o = spec.out_ch;
    let og = o / spec.groups;
    if dy.len() != p * o {
        return Err(Error::shape("upstream gradient does not match conv output"));
    }
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; spec.weight_count()];
    let dyd = dy.data();
    for grp in 0..spec.groups {
        let cols = if binary {
            im2col(x.data(), &g, spec, grp, sign, 1.0)
        } else {
            im2col(x.data(), &g, spec, grp, |v| v, 0.0)
        };
        // dW_g = dYᵀ · cols
        gemm(
            og,
            p,
            k,
            &dyd[grp * og..],
            1,
            o,
            &cols,
            k,
            1,
            0.0,
            &mut dw[grp * og * k..],
            k,
            1,
        );
        // dcols = dY · W_g
        let mut dcols = cols;
        gemm(
            p,
            og,
            k,
            &dyd[grp * og..],
            o,
            1,
            &w[grp * og * k..],
            k,
            1,
            0.0,
            &mut dcols,
            k,
            1,
        );
        col2im_add(&dcols, &g, spec, grp, &mut dx);
    }
    Ok((
        FloatTensor::new(x.shape().to_vec(), dx)?,
        FloatTensor::new(spec.weight_shape().to_vec(), dw)?,
    ))
}

/// Binary convolution of `sign(x)` with packed ±1 weights.
///
/// Inputs are binarized with `sign(0) = +1`; "same" padding contributes +1
/// values. The result equals the float convolution of the signed operands
/// exactly (integers stored as `f32`). Weights are `[out, kh, kw, in]` packed
/// along `in`.
pub fn binary_conv2d(x: &FloatTensor, w: &BitTensor, spec: &ConvSpec) -> Result<FloatTensor> {
    debug_assert!(
        x.data().iter().all(|&v| v == 1.0 || v == -1.0),
        "binary_conv2d expects ±1 inputs"
    );
    binary_conv2d_signed(x, w, spec)
}

/// [`binary_conv2d`] applied to `sign(x)` for arbitrary finite `x`.
pub(crate) fn binary_conv2d_signed(
    x: &FloatTensor,
    w: &BitTensor,
    spec: &ConvSpec,
) -> Result<FloatTensor> {
    if !spec.binary {
        return Err(Error::Parameter("binary_conv2d called with a real spec".into()));
    }
    let g = geometry(x, spec)?;
    if w.shape() != spec.weight_shape() {
        return Err(Error::shape(format!(
            "packed weight shape {:?} does not match {:?}",
            w.shape(),
            spec.weight_shape()
        )));
    }
    let cw = tensor::words_for(g.c);
    let mut xb = vec![0u64; g.n * g.h * g.w * cw];
    for (px, vals) in x.data().chunks_exact(g.c).enumerate() {
        tensor::pack_into(vals, &mut xb[px * cw..(px + 1) * cw]);
    }
    let taps = spec.kernel_h * spec.kernel_w;
    // −1 weights per (out, tap): mismatches against +1 padding
    let neg: Vec<u32> = (0..spec.out_ch * taps)
        .map(|r| g.c as u32 - w.row(r).words.iter().map(|v| v.count_ones()).sum::<u32>())
        .collect();
    let n_total = (taps * g.c) as f32;
    let o = spec.out_ch;
    let mut out = vec![0.0f32; g.n * g.ho * g.wo * o];
    let mut pix: Vec<Option<usize>> = vec![None; taps];
    let wwords = w.words();
    for b in 0..g.n {
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                for i in 0..spec.kernel_h {
                    let iy = (oy * spec.stride + i) as isize - g.pt as isize;
                    for j in 0..spec.kernel_w {
                        let ix = (ox * spec.stride + j) as isize - g.pl as isize;
                        pix[i * spec.kernel_w + j] = if iy < 0
                            || iy >= g.h as isize
                            || ix < 0
                            || ix >= g.w as isize
                        {
                            None
                        } else {
                            Some(((b * g.h + iy as usize) * g.w + ix as usize) * cw)
                        };
                    }
                }
                let base = ((b * g.ho + oy) * g.wo + ox) * o;
                for (oc, slot) in out[base..base + o].iter_mut().enumerate() {
                    let mut mism = 0u32;
                    for (t, p) in pix.iter().enumerate() {
                        let r = oc * taps + t;
                        mism += match p {
                            Some(off) => tensor::xor_popcount(
                                &xb[*off..*off + cw],
                                &wwords[r * cw..(r + 1) * cw],
                            ),
                            None => neg[r],
                        };
                    }
                    *slot = n_total - 2.0 * mism as f32;
                }
            }
        }
    }
    Ok(shaped_like(x, g.n, g.ho, g.wo, o, out))
}

/// Straight-through gradients of a binary convolution.
///
/// `x` is the pre-sign input and `w_latent` the real weights that were
/// binarized; both gradients are masked by the clipped STE (`|v| ≤ 1`).
pub fn binary_conv2d_backward(
    x: &FloatTensor,
    w_latent: &FloatTensor,
    spec: &ConvSpec,
    dy: &FloatTensor,
) -> Result<(FloatTensor, FloatTensor)> {
    check_weight(w_latent.shape(), spec)?;
    let signed: Vec<f32> = w_latent.data().iter().map(|&v| sign(v)).collect();
    let (dx, dw) = conv_backward(x, &signed, spec, dy, true)?;
    Ok((sign_backward(&dx, x), sign_backward(&dw, w_latent)))
}

pub fn sign_forward(x: &FloatTensor) -> FloatTensor {
    x.map(sign)
}

/// Clipped straight-through estimator: passes `upstream` where `|x| ≤ 1`.
pub fn sign_backward(upstream: &FloatTensor, x: &FloatTensor) -> FloatTensor {
    let data = upstream
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    FloatTensor::new(upstream.shape().to_vec(), data).expect("same shape")
}

pub fn relu(x: &FloatTensor) -> FloatTensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(dy: &FloatTensor, x: &FloatTensor) -> FloatTensor {
    let data = dy
        .data()
        .iter()
        .zip(x.data())
        .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
        .collect();
    FloatTensor::new(dy.shape().to_vec(), data).expect("same shape")
}

pub const BN_MOMENTUM: f32 = 0.9;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub eps: f32,
}

impl BatchNormParams {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Batch statistics kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

fn bn_channels(x: &FloatTensor, p: &BatchNormParams) -> Result<usize> {
    let c = *x.shape().last().unwrap_or(&0);
    if c != p.channels() || x.shape().len() < 2 {
        return Err(Error::shape(format!(
            "batch norm over {} channels applied to {:?}",
            p.channels(),
            x.shape()
        )));
    }
    Ok(c)
}

/// Inference-mode batch norm with running statistics.
pub fn batch_norm_infer(x: &FloatTensor, p: &BatchNormParams) -> Result<FloatTensor> {
    let c = bn_channels(x, p)?;
    let scale: Vec<f32> = (0..c)
        .map(|i| p.gamma[i] / (p.running_var[i] + p.eps).sqrt())
        .collect();
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = (px[i] - p.running_mean[i]) * scale[i] + p.beta[i];
        }
    }
    Ok(y)
}

/// Training-mode batch norm: normalizes with batch statistics and folds them
/// into the running averages with momentum 0.9.
pub fn batch_norm_train(
    x: &FloatTensor,
    p: &mut BatchNormParams,
) -> Result<(FloatTensor, BnCache)> {
    let c = bn_channels(x, p)?;
    let m = x.len() / c;
    let mut mean = vec![0.0f64; c];
    for px in x.data().chunks_exact(c) {
        for i in 0..c {
            mean[i] += px[i] as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut var = vec![0.0f64; c];
    for px in x.data().chunks_exact(c) {
        for i in 0..c {
            let d = px[i] as f64 - mean[i];
            var[i] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= m as f64);
    let inv_std: Vec<f32> = var
        .iter()
        .map(|&v| (1.0 / (v + p.eps as f64).sqrt()) as f32)
        .collect();
    let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
    let mut y = x.clone();
    for px in y.data_mut().chunks_exact_mut(c) {
        for i in 0..c {
            px[i] = (px[i] - mean32[i]) * inv_std[i] * p.gamma[i] + p.beta[i];
        }
    }
    let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
    for i in 0..c {
        p.running_mean[i] = BN_MOMENTUM * p.running_mean[i] + (1.0 - BN_MOMENTUM) * mean32[i];
        p.running_var[i] =
            BN_MOMENTUM * p.running_var[i] + (1.0 - BN_MOMENTUM) * (var[i] * unbias) as f32;
    }
    Ok((
        y,
        BnCache {
            mean: mean32,
            inv_std,
        },
    ))
}

/// Gradients `(dx, dgamma, dbeta)` of training-mode batch norm.
pub fn batch_norm_train_backward(
    dy: &FloatTensor,
    x: &FloatTensor,
    p: &BatchNormParams,
    cache: &BnCache,
) -> Result<(FloatTensor, Vec<f32>, Vec<f32>)> {
    let c = bn_channels(x, p)?;
    let m = (x.len() / c) as f32;
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for (g, v) in dy.data().chunks_exact(c).zip(x.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (v[i] - cache.mean[i]) * cache.inv_std[i];
            dgamma[i] += g[i] * xhat;
            dbeta[i] += g[i];
        }
    }
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for i in 0..c {
            let xhat = (v[i] - cache.mean[i]) * cache.inv_std[i];
            d[i] = p.gamma[i] * cache.inv_std[i] / m * (m * d[i] - dbeta[i] - xhat * dgamma[i]);
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Gradients `(dx, dgamma, dbeta)` of inference-mode batch norm.
pub fn batch_norm_infer_backward(
    dy: &FloatTensor,
    x: &FloatTensor,
    p: &BatchNormParams,
) -> Result<(FloatTensor, Vec<f32>, Vec<f32>)> {
    let c = bn_channels(x, p)?;
    let inv: Vec<f32> = (0..c)
        .map(|i| 1.0 / (p.running_var[i] + p.eps).sqrt())
        .collect();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    let mut dx = dy.clone();
    for (d, v) in dx.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(c)) {
        for i in 0..c {
            dgamma[i] += d[i] * (v[i] - p.running_mean[i]) * inv[i];
            dbeta[i] += d[i];
            d[i] *= p.gamma[i] * inv[i];
        }
    }
    Ok((dx, dgamma, dbeta))
}

/// Max pooling with "same" (ceil) output size. Returns the output and, per
/// output element, the flat input index that won (first in window order).
pub fn max_pool2d_with_indices(
    x: &FloatTensor,
    k: usize,
    stride: usize,
) -> Result<(FloatTensor, Vec<u32>)> {
    if k == 0 || stride == 0 {
        return Err(Error::Parameter("pool size and stride must be positive".into()));
    }
    let (n, h, w, c) = dims4(x)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("pooling needs spatial dims ≥ 1"));
    }
    let (ho, pt) = same_axis(h, k, stride);
    let (wo, pl) = same_axis(w, k, stride);
    let mut out = vec![f32::NEG_INFINITY; n * ho * wo * c];
    let mut idx = vec![0u32; out.len()];
    let xd = x.data();
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = ((b * ho + oy) * wo + ox) * c;
                for i in 0..k {
                    let iy = (oy * stride + i) as isize - pt as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for j in 0..k {
                        let ix = (ox * stride + j) as isize - pl as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        for ch in 0..c {
                            if xd[src + ch] > out[base + ch] {
                                out[base + ch] = xd[src + ch];
                                idx[base + ch] = (src + ch) as u32;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((shaped_like(x, n, ho, wo, c, out), idx))
}

pub fn max_pool2d(x: &FloatTensor, k: usize, stride: usize) -> Result<FloatTensor> {
    Ok(max_pool2d_with_indices(x, k, stride)?.0)
}

/// Routes each output gradient to the input element that won the max.
pub fn max_backward(dy: &FloatTensor, indices: &[u32], input_shape: &[usize]) -> FloatTensor {
    let mut dx = FloatTensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&g, &i) in dy.data().iter().zip(indices) {
        d[i as usize] += g;
    }
    dx
}

/// Per-channel maximum over all spatial positions: `[N, C]` (or `[C]`).
pub fn global_max_pool_with_indices(x: &FloatTensor) -> Result<(FloatTensor, Vec<u32>)> {
    let (n, h, w, c) = dims4(x)?;
    if h == 0 || w == 0 {
        return Err(Error::shape("pooling needs spatial dims ≥ 1"));
    }
    let mut out = vec![f32::NEG_INFINITY; n * c];
    let mut idx = vec![0u32; n * c];
    for b in 0..n {
        for px in 0..h * w {
            let src = (b * h * w + px) * c;
            for ch in 0..c {
                let v = x.data()[src + ch];
                if v > out[b * c + ch] {
                    out[b * c + ch] = v;
                    idx[b * c + ch] = (src + ch) as u32;
                }
            }
        }
    }
    let shape = if x.shape().len() == 3 {
        vec![c]
    } else {
        vec![n, c]
    };
    Ok((FloatTensor::new(shape, out)?, idx))
}

pub fn global_max_pool(x: &FloatTensor) -> Result<FloatTensor> {
    Ok(global_max_pool_with_indices(x)?.0)
}

fn rows2(x: &FloatTensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [n] => Ok((1, n)),
        [b, n] => Ok((b, n)),
        ref s => Err(Error::shape(format!("dense input must be [n] or [N, n], got {s:?}"))),
    }
}

/// `y = W·x (+ b)` for `W: [m, n]`. In binary mode both operands are
/// binarized and the product runs on the xnor path.
pub fn dense(
    x: &FloatTensor,
    w: &FloatTensor,
    bias: Option<&[f32]>,
    binary: bool,
) -> Result<FloatTensor> {
    let (batch, n) = rows2(x)?;
    let [m, wn] = *w.shape() else {
        return Err(Error::shape("dense weight must be [m, n]"));
    };
    if wn != n || bias.is_some_and(|b| b.len() != m) {
        return Err(Error::shape(format!(
            "dense weight [{m}, {wn}] applied to input of width {n}"
        )));
    }
    let mut out = vec![0.0f32; batch * m];
    if binary {
        let wb = tensor::pack(w);
        let xb = tensor::pack(&FloatTensor::new(vec![batch, n], x.data().to_vec())?);
        for b in 0..batch {
            for o in 0..m {
                out[b * m + o] = tensor::xnor_popcount_dot(xb.row(b), wb.row(o))? as f32;
            }
        }
    } else {
        gemm(batch, n, m, x.data(), n, 1, w.data(), 1, n, 0.0, &mut out, m, 1);
    }
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(m) {
            row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
        }
    }
    let shape = if x.shape().len() == 1 {
        vec![m]
    } else {
        vec![batch, m]
    };
    FloatTensor::new(shape, out)
}

/// Gradients `(dx, dw, dbias)` of [`dense`]; binary mode uses the clipped STE
/// on both operands.
pub fn dense_backward(
    x: &FloatTensor,
    w: &FloatTensor,
    dy: &FloatTensor,
    binary: bool,
) -> Result<(FloatTensor, FloatTensor, Vec<f32>)> {
    let (batch, n) = rows2(x)?;
    let m = w.shape()[0];
    if dy.len() != batch * m {
        return Err(Error::shape("dense upstream gradient has wrong size"));
    }
    let (xs, ws) = if binary {
        (sign_forward(x), sign_forward(w))
    } else {
        (x.clone(), w.clone())
    };
    let mut dx = vec![0.0f32; batch * n];
    gemm(batch, m, n, dy.data(), m, 1, ws.data(), n, 1, 0.0, &mut dx, n, 1);
    let mut dw = vec![0.0f32; m * n];
    gemm(m, batch, n, dy.data(), 1, m, xs.data(), n, 1, 0.0, &mut dw, n, 1);
    let mut db = vec![0.0f32; m];
    for row in dy.data().chunks_exact(m) {
        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
    }
    let mut dx = FloatTensor::new(x.shape().to_vec(), dx)?;
    let mut dw = FloatTensor::new(vec![m, n], dw)?;
    if binary {
        dx = sign_backward(&dx, x);
        dw = sign_backward(&dw, w);
    }
    Ok((dx, dw, db))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub t: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(
    params: &mut [f32],
    grads: &[f32],
    state: &mut AdamState,
    lr: f32,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam: params, grads and state differ in length"));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Central-difference gradient of a scalar function.
pub fn finite_difference_grad(
    mut f: impl FnMut(&FloatTensor) -> f64,
    x: &FloatTensor,
    h: f32,
) -> FloatTensor {
    assert!(h > 0.0, "step must be positive");
    let mut probe = x.clone();
    let mut grad = vec![0.0f32; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        let up = orig + h;
        let down = orig - h;
        probe.data_mut()[i] = up;
        let fu = f(&probe);
        probe.data_mut()[i] = down;
        let fd = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = ((fu - fd) / (up as f64 - down as f64)) as f32;
    }
    FloatTensor::new(x.shape().to_vec(), grad).expect("same shape")
}
