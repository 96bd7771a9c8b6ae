//! Layer primitives: real and binary convolution, batch normalization,
//! binarization, 2×2 max-pool with index capture, index-directed unpool,
//! batch-norm/binarize threshold folding and per-pixel softmax.
//!
//! Binary convolutions pad with bit 0 (the −1 of the ±1 algebra), so that
//! `binconv = (pm_conv + n) / 2` holds at border pixels too.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::bintensor::{mismatch_tile, words_for, BitTensor, PoolIndexMap, RealTensor, WORD_BITS};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Per-channel batch-normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BNParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub epsilon: f64,
}

impl BNParams {
    /// γ = 1, β = 0, μ = 0, σ² = 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, epsilon: f64) -> Result<Self> {
        let bn = Self {
            gamma,
            beta,
            mean,
            var,
            epsilon,
        };
        bn.validate()?;
        Ok(bn)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        if c == 0 || self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors disagree in length: gamma {}, beta {}, mean {}, var {}",
                c,
                self.beta.len(),
                self.mean.len(),
                self.var.len()
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidValue(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        for ch in 0..c {
            let vals = [self.gamma[ch], self.beta[ch], self.mean[ch], self.var[ch]];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("batch-norm channel {ch}")));
            }
            if self.var[ch] < 0.0 {
                return Err(Error::InvalidValue(format!(
                    "negative variance {} in channel {ch}",
                    self.var[ch]
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Normalizes one value of channel `c` with the stored statistics.
    ///
    /// Every inference path goes through this exact expression, so all of
    /// them round identically.
    #[inline]
    pub fn apply(&self, c: usize, s: f64) -> f64 {
        (s - self.mean[c]) / (self.var[c] + self.epsilon).sqrt() * self.gamma[c] + self.beta[c]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Greater,
    Less,
    ConstantOne,
    ConstantZero,
}

/// Integer comparison equivalent to `binarize(batchnorm(s))` for one channel.
#[derive(Clone, Copy, Debug)]
pub struct ThresholdRule {
    /// Analytic threshold μ − β·sqrt(σ² + ε)/γ (NaN for constant polarities).
    pub theta: f64,
    pub polarity: Polarity,
    /// Exact integer cut: `Greater` fires for `s > cutoff`, `Less` for `s < cutoff`.
    pub cutoff: i64,
}

/// θ is compared bitwise so that rules with NaN θ equal themselves.
impl PartialEq for ThresholdRule {
    fn eq(&self, other: &Self) -> bool {
        self.theta.to_bits() == other.theta.to_bits() && self.polarity == other.polarity && self.cutoff == other.cutoff
    }
}

impl ThresholdRule {
    #[inline]
    pub fn fires(&self, s: i64) -> bool {
        match self.polarity {
            Polarity::Greater => s > self.cutoff,
            Polarity::Less => s < self.cutoff,
            Polarity::ConstantOne => true,
            Polarity::ConstantZero => false,
        }
    }
}

/// Batch norm and binarization fused into one rule per output channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedThreshold {
    pub rules: Vec<ThresholdRule>,
}

impl FoldedThreshold {
    pub fn channels(&self) -> usize {
        self.rules.len()
    }
}

const CUTOFF_BOUND: i64 = 1 << 40;

/// Folds batch norm followed by binarization into integer thresholds.
///
/// The analytic θ is refined against the unfolded expression so that the
/// folded bit equals `binarize(batchnorm_infer(s))` for every integer `s`.
pub fn fold_bn_binrz(bn: &BNParams) -> FoldedThreshold {
    let rules = (0..bn.channels())
        .map(|c| {
            let gamma = bn.gamma[c];
            if gamma == 0.0 {
                let polarity = if bn.beta[c] > 0.0 {
                    Polarity::ConstantOne
                } else {
                    Polarity::ConstantZero
                };
                return ThresholdRule {
                    theta: f64::NAN,
                    polarity,
                    cutoff: 0,
                };
            }
            let sd = (bn.var[c] + bn.epsilon).sqrt();
            let theta = bn.mean[c] - bn.beta[c] * sd / gamma;
            let fires = |s: i64| bn.apply(c, s as f64) > 0.0;
            let clamp = |v: f64| {
                if v.is_nan() {
                    0
                } else {
                    v.clamp(-(CUTOFF_BOUND as f64), CUTOFF_BOUND as f64) as i64
                }
            };
            if gamma > 0.0 {
                // Largest s that does not fire.
                let mut cut = clamp(theta.floor());
                while cut < CUTOFF_BOUND && !fires(cut + 1) {
                    cut += 1;
                }
                while cut > -CUTOFF_BOUND && fires(cut) {
                    cut -= 1;
                }
                ThresholdRule {
                    theta,
                    polarity: Polarity::Greater,
                    cutoff: cut,
                }
            } else {
                // Smallest s that does not fire.
                let mut cut = clamp(theta.ceil());
                while cut > -CUTOFF_BOUND && !fires(cut - 1) {
                    cut -= 1;
                }
                while cut < CUTOFF_BOUND && fires(cut) {
                    cut += 1;
                }
                ThresholdRule {
                    theta,
                    polarity: Polarity::Less,
                    cutoff: cut,
                }
            }
        })
        .collect();
    FoldedThreshold { rules }
}

fn check_kernel(kernel_h: usize, kernel_w: usize) -> Result<()> {
    if kernel_h == 0 || kernel_w == 0 || kernel_h.is_multiple_of(2) || kernel_w.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "kernel {kernel_h}x{kernel_w} must have odd positive sides"
        )));
    }
    Ok(())
}

/// Full-precision convolution (block 0). Weights are laid out
/// `[ky][kx][in][out]`, zero padding, stride 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RealConvLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f64>,
    pub bn: BNParams,
}

impl RealConvLayer {
    pub fn new(
        kernel_h: usize,
        kernel_w: usize,
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bn: BNParams,
    ) -> Result<Self> {
        check_kernel(kernel_h, kernel_w)?;
        if weights.len() != kernel_h * kernel_w * in_channels * out_channels {
            return Err(Error::shape(format!(
                "{} weights for a {kernel_h}x{kernel_w}x{in_channels}x{out_channels} kernel",
                weights.len()
            )));
        }
        if bn.channels() != out_channels {
            return Err(Error::shape("batch-norm channels differ from out_channels"));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("real conv weights".into()));
        }
        Ok(Self {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels,
            weights,
            bn,
        })
    }
}

/// Binary convolution: one packed `kernel_h × kernel_w × in_channels` filter
/// per output channel, plus batch norm and its folded thresholds.
#[derive(Debug)]
pub struct BinConvLayer {
    kernel_h: usize,
    kernel_w: usize,
    in_channels: usize,
    out_channels: usize,
    weights: Vec<BitTensor>,
    bn: BNParams,
    /// Filters back to back, `kernel_h * kernel_w * words_for(in_channels)` words each.
    bank: Vec<u64>,
    folded: Option<FoldedThreshold>,
    pm_weights: OnceLock<Vec<f32>>,
}

impl Clone for BinConvLayer {
    fn clone(&self) -> Self {
        Self {
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            weights: self.weights.clone(),
            bn: self.bn.clone(),
            bank: self.bank.clone(),
            folded: self.folded.clone(),
            pm_weights: OnceLock::new(),
        }
    }
}

impl PartialEq for BinConvLayer {
    fn eq(&self, other: &Self) -> bool {
        self.kernel_h == other.kernel_h
            && self.kernel_w == other.kernel_w
            && self.in_channels == other.in_channels
            && self.out_channels == other.out_channels
            && self.weights == other.weights
            && self.bn == other.bn
            && self.folded == other.folded
    }
}

impl BinConvLayer {
    /// Builds the layer and folds its thresholds.
    pub fn new(weights: Vec<BitTensor>, bn: BNParams) -> Result<Self> {
        let first = weights
            .first()
            .ok_or_else(|| Error::Empty("binary conv layer needs at least one filter".into()))?;
        let (kernel_h, kernel_w, in_channels) = first.dims();
        check_kernel(kernel_h, kernel_w)?;
        if weights.iter().any(|w| w.dims() != first.dims()) {
            return Err(Error::shape("filters of one layer must share dims"));
        }
        bn.validate()?;
        if bn.channels() != weights.len() {
            return Err(Error::shape(format!(
                "{} batch-norm channels for {} filters",
                bn.channels(),
                weights.len()
            )));
        }
        let bank = weights.iter().flat_map(|w| w.words().iter().copied()).collect();
        let folded = Some(fold_bn_binrz(&bn));
        Ok(Self {
            kernel_h,
            kernel_w,
            in_channels,
            out_channels: weights.len(),
            weights,
            bn,
            bank,
            folded,
            pm_weights: OnceLock::new(),
        })
    }

    pub fn kernel_h(&self) -> usize {
        self.kernel_h
    }

    pub fn kernel_w(&self) -> usize {
        self.kernel_w
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Padding per side (top/bottom, left/right) preserving spatial dims.
    pub fn pad(&self) -> (usize, usize) {
        ((self.kernel_h - 1) / 2, (self.kernel_w - 1) / 2)
    }

    /// Kernel volume `n = kernel_h · kernel_w · in_channels`.
    pub fn kernel_volume(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }

    pub fn weights(&self) -> &[BitTensor] {
        &self.weights
    }

    pub fn bn(&self) -> &BNParams {
        &self.bn
    }

    /// Mutable batch-norm access. Marks the folded thresholds stale until
    /// [`refresh_thresholds`](Self::refresh_thresholds) runs.
    pub fn bn_mut(&mut self) -> &mut BNParams {
        self.folded = None;
        &mut self.bn
    }

    pub fn set_weights(&mut self, weights: Vec<BitTensor>) -> Result<()> {
        if weights.len() != self.out_channels
            || weights
                .iter()
                .any(|w| w.dims() != (self.kernel_h, self.kernel_w, self.in_channels))
        {
            return Err(Error::shape("replacement filters do not match layer dims"));
        }
        self.bank = weights.iter().flat_map(|w| w.words().iter().copied()).collect();
        self.weights = weights;
        self.pm_weights = OnceLock::new();
        Ok(())
    }

    pub fn refresh_thresholds(&mut self) -> Result<()> {
        self.bn.validate()?;
        self.folded = Some(fold_bn_binrz(&self.bn));
        Ok(())
    }

    pub fn folded(&self) -> Option<&FoldedThreshold> {
        self.folded.as_ref()
    }

    pub fn thresholds_fresh(&self) -> bool {
        self.folded.is_some()
    }

    /// Total weight bits and their packed size in 64-bit words.
    pub fn packed_words(&self) -> usize {
        self.bank.len()
    }

    pub(crate) fn bank(&self) -> &[u64] {
        &self.bank
    }

    /// ±1 weights as a `K × out_channels` row-major matrix, `K` ordered
    /// `[ky][kx][in]`.
    pub(crate) fn pm_matrix(&self) -> &[f32] {
        self.pm_weights.get_or_init(|| {
            let k = self.kernel_volume();
            let f = self.out_channels;
            let mut m = vec![0f32; k * f];
            for (fi, w) in self.weights.iter().enumerate() {
                for ky in 0..self.kernel_h {
                    for kx in 0..self.kernel_w {
                        for c in 0..self.in_channels {
                            let row = (ky * self.kernel_w + kx) * self.in_channels + c;
                            m[row * f + fi] = if w.bit(ky, kx, c) { 1.0 } else { -1.0 };
                        }
                    }
                }
            }
            m
        })
    }
}

/// Direct convolution with a constant border value. `weights` are laid out
/// `[ky][kx][in][out]`.
pub(crate) fn conv_direct(
    input: &RealTensor,
    weights: &[f64],
    kernel_h: usize,
    kernel_w: usize,
    out_channels: usize,
    pad_value: f64,
) -> Result<RealTensor> {
    let (h, w, cin) = input.dims();
    if weights.len() != kernel_h * kernel_w * cin * out_channels {
        return Err(Error::shape(format!(
            "{} weights do not fit {kernel_h}x{kernel_w}x{cin}x{out_channels}",
            weights.len()
        )));
    }
    check_kernel(kernel_h, kernel_w)?;
    let (ph, pw) = ((kernel_h - 1) / 2, (kernel_w - 1) / 2);
    let mut out = RealTensor::zeros(h, w, out_channels);
    let mut acc = vec![0.0f64; out_channels];
    for y in 0..h {
        for x in 0..w {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for ky in 0..kernel_h {
                for kx in 0..kernel_w {
                    let iy = y as isize + ky as isize - ph as isize;
                    let ix = x as isize + kx as isize - pw as isize;
                    let inside = iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w;
                    for c in 0..cin {
                        let v = if inside {
                            input.get(iy as usize, ix as usize, c)
                        } else {
                            pad_value
                        };
                        if v == 0.0 {
                            continue;
                        }
                        let row = ((ky * kernel_w + kx) * cin + c) * out_channels;
                        for (a, wt) in acc.iter_mut().zip(&weights[row..row + out_channels]) {
                            *a += v * wt;
                        }
                    }
                }
            }
            out.pixel_mut(y, x).copy_from_slice(&acc);
        }
    }
    Ok(out)
}

/// Same-padded real cross-correlation with zero padding (no batch norm).
pub fn conv2d_real(input: &RealTensor, layer: &RealConvLayer) -> Result<RealTensor> {
    if input.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            layer.in_channels
        )));
    }
    conv_direct(
        input,
        &layer.weights,
        layer.kernel_h,
        layer.kernel_w,
        layer.out_channels,
        0.0,
    )
}

fn check_bin_input(input: &BitTensor, layer: &BinConvLayer) -> Result<()> {
    if input.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            input.channels(),
            layer.in_channels
        )));
    }
    Ok(())
}

/// Output rows handed to one kernel call; bounds the patch buffer.
const PATCH_CHUNK: usize = 16;

/// XNOR-popcount convolution returning raw agreement counts `s`, laid out
/// `[y][x][filter]`.
pub(crate) fn binconv_counts(input: &BitTensor, layer: &BinConvLayer) -> Result<Vec<u32>> {
    check_bin_input(input, layer)?;
    let (h, w, _) = input.dims();
    let wpp = words_for(layer.in_channels);
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let (ph, pw) = layer.pad();
    let patch_len = kh * kw * wpp;
    let f = layer.out_channels;
    let n = layer.kernel_volume() as u32;
    let bank = layer.bank();
    let mut out = vec![0u32; h * w * f];
    out.par_chunks_mut(w * f).enumerate().for_each(|(y, row)| {
        let mut patches = vec![0u64; PATCH_CHUNK.min(w) * patch_len];
        for x0 in (0..w).step_by(PATCH_CHUNK) {
            let count = PATCH_CHUNK.min(w - x0);
            let buf = &mut patches[..count * patch_len];
            for (p, patch) in buf.chunks_exact_mut(patch_len).enumerate() {
                let x = x0 + p;
                for ky in 0..kh {
                    let iy = y as isize + ky as isize - ph as isize;
                    for kx in 0..kw {
                        let ix = x as isize + kx as isize - pw as isize;
                        let dst = &mut patch[(ky * kw + kx) * wpp..(ky * kw + kx + 1) * wpp];
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            dst.copy_from_slice(input.pixel_words(iy as usize, ix as usize));
                        } else {
                            dst.fill(0);
                        }
                    }
                }
            }
            let dst = &mut row[x0 * f..(x0 + count) * f];
            mismatch_tile(buf, bank, patch_len, dst);
            for v in dst.iter_mut() {
                *v = n - *v;
            }
        }
    });
    Ok(out)
}

/// Binary convolution: agreement counts `s ∈ [0, n]` as reals.
pub fn binconv(input: &BitTensor, layer: &BinConvLayer) -> Result<RealTensor> {
    let counts = binconv_counts(input, layer)?;
    RealTensor::from_vec(
        input.height(),
        input.width(),
        layer.out_channels,
        counts.into_iter().map(f64::from).collect(),
    )
}

/// ±1 convolution through a single-precision GEMM over an im2col buffer.
///
/// `act` holds `{0, 1}` activations; they enter the product as `2v − 1` with
/// −1 padding. Results are integers and exact in `f32`.
pub(crate) fn pm_conv_gemm(act: &RealTensor, layer: &BinConvLayer) -> Result<Vec<f32>> {
    if act.channels() != layer.in_channels {
        return Err(Error::shape(format!(
            "input has {} channels, layer expects {}",
            act.channels(),
            layer.in_channels
        )));
    }
    const ROWS: usize = 64;
    let (h, w, cin) = act.dims();
    let (kh, kw) = (layer.kernel_h, layer.kernel_w);
    let (ph, pw) = layer.pad();
    let k = layer.kernel_volume();
    let f = layer.out_channels;
    let weights = layer.pm_matrix();
    let mut out = vec![0f32; h * w * f];
    out.par_chunks_mut(ROWS * f).enumerate().for_each(|(chunk, dst)| {
        let first = chunk * ROWS;
        let m = dst.len() / f;
        let mut cols = vec![-1f32; m * k];
        for r in 0..m {
            let (y, x) = ((first + r) / w, (first + r) % w);
            let row = &mut cols[r * k..(r + 1) * k];
            for ky in 0..kh {
                let iy = y as isize + ky as isize - ph as isize;
                for kx in 0..kw {
                    let ix = x as isize + kx as isize - pw as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        let src = act.pixel(iy as usize, ix as usize);
                        let base = (ky * kw + kx) * cin;
                        for (d, &v) in row[base..base + cin].iter_mut().zip(src) {
                            *d = (2.0 * v - 1.0) as f32;
                        }
                    }
                }
            }
        }
        // SAFETY: slice lengths match the m×k, k×f and m×f row-major shapes.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                f,
                1.0,
                cols.as_ptr(),
                k as isize,
                1,
                weights.as_ptr(),
                f as isize,
                1,
                0.0,
                dst.as_mut_ptr(),
                f as isize,
                1,
            );
        }
    });
    Ok(out)
}

/// Batch norm with stored running statistics.
pub fn batchnorm_infer(s: &RealTensor, bn: &BNParams) -> Result<RealTensor> {
    let c = s.channels();
    if bn.channels() != c {
        return Err(Error::shape(format!(
            "{} batch-norm channels for a {c}-channel tensor",
            bn.channels()
        )));
    }
    let mut out = s.clone();
    for px in out.values_mut().chunks_exact_mut(c) {
        for (ch, v) in px.iter_mut().enumerate() {
            *v = bn.apply(ch, *v);
        }
    }
    Ok(out)
}

/// Per-channel mean and biased variance over a batch and all positions.
pub(crate) fn batch_stats(batch: &[RealTensor]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::Empty("batch-norm over an empty batch".into()))?;
    if batch.iter().any(|t| !t.same_dims(first)) {
        return Err(Error::shape("batch members differ in shape"));
    }
    let c = first.channels();
    let count = (batch.len() * first.height() * first.width()) as f64;
    let mut mean = vec![0.0; c];
    for t in batch {
        for px in t.values().chunks_exact(c) {
            for (m, v) in mean.iter_mut().zip(px) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for t in batch {
        for px in t.values().chunks_exact(c) {
            for ((q, v), m) in var.iter_mut().zip(px).zip(&mean) {
                *q += (v - m) * (v - m);
            }
        }
    }
    var.iter_mut().for_each(|q| *q /= count);
    Ok((mean, var))
}

/// Batch norm with mini-batch statistics. Returns the normalized batch and
/// parameters whose running statistics moved toward the batch statistics:
/// `running ← momentum · running + (1 − momentum) · batch`.
pub fn batchnorm_train(
    s_batch: &[RealTensor],
    bn: &BNParams,
    momentum: f64,
) -> Result<(Vec<RealTensor>, BNParams)> {
    let (mean, var) = batch_stats(s_batch)?;
    if mean.len() != bn.channels() {
        return Err(Error::shape(format!(
            "{} batch-norm channels for {}-channel inputs",
            bn.channels(),
            mean.len()
        )));
    }
    let batch_bn = BNParams {
        mean: mean.clone(),
        var: var.clone(),
        ..bn.clone()
    };
    let normalized = s_batch
        .iter()
        .map(|s| batchnorm_infer(s, &batch_bn))
        .collect::<Result<Vec<_>>>()?;
    let mut updated = bn.clone();
    for c in 0..mean.len() {
        updated.mean[c] = momentum * bn.mean[c] + (1.0 - momentum) * mean[c];
        updated.var[c] = momentum * bn.var[c] + (1.0 - momentum) * var[c];
    }
    Ok((normalized, updated))
}

/// Bit 1 exactly where the value is strictly positive.
pub fn binarize(a: &RealTensor) -> BitTensor {
    let (h, w, c) = a.dims();
    let mut out = BitTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let px = a.pixel(y, x);
            let words = out.pixel_words_mut(y, x);
            for (ch, &v) in px.iter().enumerate() {
                if v > 0.0 {
                    words[ch / WORD_BITS] |= 1u64 << (ch % WORD_BITS);
                }
            }
        }
    }
    out
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::shape(format!("2x2 pooling needs even dims, got {h}x{w}")));
    }
    Ok(())
}

/// Non-overlapping 2×2 max-pool; ties go to the lowest corner code.
pub fn maxpool2x2(a: &RealTensor) -> Result<(RealTensor, PoolIndexMap)> {
    let (h, w, c) = a.dims();
    check_even(h, w)?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = RealTensor::zeros(oh, ow, c);
    let mut idx = vec![0u8; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best = a.get(2 * y, 2 * x, ch);
                let mut code = 0u8;
                for k in 1..4u8 {
                    let (dy, dx) = PoolIndexMap::corner_offset(k);
                    let v = a.get(2 * y + dy, 2 * x + dx, ch);
                    if v > best {
                        best = v;
                        code = k;
                    }
                }
                out.set(y, x, ch, best);
                idx[(y * ow + x) * c + ch] = code;
            }
        }
    }
    Ok((out, PoolIndexMap::new(oh, ow, c, idx)?))
}

fn check_unpool(dims: (usize, usize, usize), idx: &PoolIndexMap) -> Result<()> {
    if dims != idx.dims() {
        return Err(Error::shape(format!(
            "unpool input {:?} does not match index map {:?}",
            dims,
            idx.dims()
        )));
    }
    Ok(())
}

/// Places every value at its recorded corner of a 2×2 window; the other
/// three positions are zero.
pub fn unpool2x2(a: &RealTensor, idx: &PoolIndexMap) -> Result<RealTensor> {
    unpool_fill(a, idx, 0.0)
}

pub(crate) fn unpool_fill(a: &RealTensor, idx: &PoolIndexMap, fill: f64) -> Result<RealTensor> {
    check_unpool(a.dims(), idx)?;
    let (h, w, c) = a.dims();
    let mut out = RealTensor::filled(2 * h, 2 * w, c, fill);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (dy, dx) = PoolIndexMap::corner_offset(idx.get(y, x, ch));
                out.set(2 * y + dy, 2 * x + dx, ch, a.get(y, x, ch));
            }
        }
    }
    Ok(out)
}

/// Bit-level unpool: set bits move to their recorded corner, all else is 0.
pub fn unpool_bits(b: &BitTensor, idx: &PoolIndexMap) -> Result<BitTensor> {
    check_unpool(b.dims(), idx)?;
    let (h, w, c) = b.dims();
    let mut out = BitTensor::zeros(2 * h, 2 * w, c);
    for y in 0..h {
        for x in 0..w {
            let words = b.pixel_words(y, x);
            for (wi, &word) in words.iter().enumerate() {
                let mut rest = word;
                while rest != 0 {
                    let bit = rest.trailing_zeros() as usize;
                    rest &= rest - 1;
                    let ch = wi * WORD_BITS + bit;
                    let (dy, dx) = PoolIndexMap::corner_offset(idx.get(y, x, ch));
                    out.pixel_words_mut(2 * y + dy, 2 * x + dx)[wi] |= 1u64 << bit;
                }
            }
        }
    }
    Ok(out)
}

/// Folded block tail: thresholds agreement counts and optionally 2×2-pools.
///
/// The pooled bit is the OR of the window's folded bits, which equals
/// binarizing the max of the normalized window. Pool indices are chosen by
/// the normalized values themselves so they coincide with the unfolded path.
pub(crate) fn threshold_counts(
    counts: &[u32],
    h: usize,
    w: usize,
    layer: &BinConvLayer,
    pool: bool,
) -> Result<(BitTensor, Option<PoolIndexMap>)> {
    let folded = layer.folded().ok_or(Error::StaleThresholds)?;
    let c = layer.out_channels();
    debug_assert_eq!(counts.len(), h * w * c);
    if !pool {
        let mut out = BitTensor::zeros(h, w, c);
        for y in 0..h {
            for x in 0..w {
                let px = &counts[(y * w + x) * c..(y * w + x + 1) * c];
                let words = out.pixel_words_mut(y, x);
                for (ch, (&s, rule)) in px.iter().zip(&folded.rules).enumerate() {
                    if rule.fires(s as i64) {
                        words[ch / WORD_BITS] |= 1u64 << (ch % WORD_BITS);
                    }
                }
            }
        }
        return Ok((out, None));
    }
    check_even(h, w)?;
    let bn = layer.bn();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = BitTensor::zeros(oh, ow, c);
    let mut idx = vec![0u8; oh * ow * c];
    for y in 0..oh {
        for x in 0..ow {
            for (ch, rule) in folded.rules.iter().enumerate() {
                let mut fired = false;
                let mut best = f64::NEG_INFINITY;
                let mut code = 0u8;
                for k in 0..4u8 {
                    let (dy, dx) = PoolIndexMap::corner_offset(k);
                    let s = counts[((2 * y + dy) * w + 2 * x + dx) * c + ch];
                    fired |= rule.fires(s as i64);
                    let v = bn.apply(ch, s as f64);
                    if k == 0 || v > best {
                        best = v;
                        code = k;
                    }
                }
                if fired {
                    out.set_bit(y, x, ch, true);
                }
                idx[(y * ow + x) * c + ch] = code;
            }
        }
    }
    Ok((out, Some(PoolIndexMap::new(oh, ow, c, idx)?)))
}

/// Per-pixel softmax over channels, max-subtracted.
pub fn softmax_pixels(logits: &RealTensor) -> RealTensor {
    let c = logits.channels();
    let mut out = logits.clone();
    for px in out.values_mut().chunks_exact_mut(c) {
        let m = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in px.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in px.iter_mut() {
            *v /= sum;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bintensor::{pack, to_pm, unpack};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_bits(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> BitTensor {
        let v = (0..h * w * c)
            .map(|_| if r.random::<bool>() { 1.0 } else { 0.0 })
            .collect();
        pack(&RealTensor::from_vec(h, w, c, v).unwrap()).unwrap()
    }

    fn random_real(r: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> RealTensor {
        let v = (0..h * w * c).map(|_| r.random_range(-3.0..3.0)).collect();
        RealTensor::from_vec(h, w, c, v).unwrap()
    }

    fn layer_from(filters: Vec<BitTensor>) -> BinConvLayer {
        let n = filters.len();
        BinConvLayer::new(filters, BNParams::identity(n)).unwrap()
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut r = rng(1);
        let input = random_real(&mut r, 4, 5, 1);
        let layer = RealConvLayer::new(1, 1, 1, 1, vec![1.0], BNParams::identity(1)).unwrap();
        assert_eq!(conv2d_real(&input, &layer).unwrap(), input);
    }

    #[test]
    fn conv2d_zero_weights() {
        let mut r = rng(2);
        let input = random_real(&mut r, 4, 4, 2);
        let layer =
            RealConvLayer::new(3, 3, 2, 3, vec![0.0; 54], BNParams::identity(3)).unwrap();
        let out = conv2d_real(&input, &layer).unwrap();
        assert_eq!(out.dims(), (4, 4, 3));
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let layer = RealConvLayer::new(1, 1, 2, 1, vec![1.0, 1.0], BNParams::identity(1)).unwrap();
        assert!(conv2d_real(&RealTensor::zeros(2, 2, 1), &layer).is_err());
    }

    #[test]
    fn binconv_full_agreement_interior() {
        let c = 70;
        let mut ones = BitTensor::zeros(3, 3, c);
        for y in 0..3 {
            for x in 0..3 {
                for ch in 0..c {
                    ones.set_bit(y, x, ch, true);
                }
            }
        }
        let mut input = BitTensor::zeros(5, 5, c);
        for y in 0..5 {
            for x in 0..5 {
                for ch in 0..c {
                    input.set_bit(y, x, ch, true);
                }
            }
        }
        let s = binconv(&input, &layer_from(vec![ones])).unwrap();
        assert_eq!(s.get(2, 2, 0), 9.0 * c as f64);
        // Corner pixel: 4 taps inside, 5 taps hit bit-0 padding.
        assert_eq!(s.get(0, 0, 0), 4.0 * c as f64);
    }

    #[test]
    fn binconv_full_disagreement_interior() {
        let mut r = rng(3);
        let c = 5;
        let pattern: Vec<bool> = (0..c).map(|_| r.random()).collect();
        let mut input = BitTensor::zeros(5, 5, c);
        let mut filt = BitTensor::zeros(3, 3, c);
        for y in 0..5 {
            for x in 0..5 {
                for (ch, &b) in pattern.iter().enumerate() {
                    input.set_bit(y, x, ch, b);
                    if y < 3 && x < 3 {
                        filt.set_bit(y, x, ch, !b);
                    }
                }
            }
        }
        let s = binconv(&input, &layer_from(vec![filt])).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(s.get(y, x, 0), 0.0);
            }
        }
    }

    #[test]
    fn binconv_matches_pm_reference() {
        let mut r = rng(4);
        for _ in 0..20 {
            let (h, w) = (r.random_range(1..7), r.random_range(1..7));
            let cin = r.random_range(1..140);
            let cout = r.random_range(1..5);
            let k = [1usize, 3, 5][r.random_range(0..3)];
            let input = random_bits(&mut r, h, w, cin);
            let filters: Vec<_> = (0..cout).map(|_| random_bits(&mut r, k, k, cin)).collect();
            let layer = layer_from(filters.clone());
            let mut wpm = vec![0.0; k * k * cin * cout];
            for (f, filt) in filters.iter().enumerate() {
                let pm = to_pm(filt);
                for (i, v) in pm.values().iter().enumerate() {
                    wpm[i * cout + f] = *v;
                }
            }
            let pm = conv_direct(&to_pm(&input), &wpm, k, k, cout, -1.0).unwrap();
            let s = binconv(&input, &layer).unwrap();
            let n = (k * k * cin) as f64;
            for (a, b) in s.values().iter().zip(pm.values()) {
                assert_eq!(*a, (b + n) / 2.0);
            }
            let g = pm_conv_gemm(&unpack(&input), &layer).unwrap();
            for (a, b) in g.iter().zip(pm.values()) {
                assert_eq!(*a as f64, *b);
            }
        }
    }

    #[test]
    fn batchnorm_identity_and_constant() {
        let mut r = rng(5);
        let s = random_real(&mut r, 3, 3, 2);
        let mut bn = BNParams::identity(2);
        bn.var = vec![1.0 - bn.epsilon; 2];
        assert_eq!(batchnorm_infer(&s, &bn).unwrap(), s);
        bn.gamma = vec![0.0; 2];
        bn.beta = vec![5.0; 2];
        assert!(batchnorm_infer(&s, &bn).unwrap().values().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn batchnorm_hand_value() {
        let bn = BNParams::new(vec![2.0], vec![-1.0], vec![4.0], vec![3.99], 0.01).unwrap();
        let s = RealTensor::filled(1, 1, 1, 10.0);
        assert_eq!(batchnorm_infer(&s, &bn).unwrap().values(), &[5.0]);
    }

    #[test]
    fn bn_params_validation() {
        assert!(BNParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 1e-5).is_err());
        assert!(BNParams::new(vec![1.0], vec![0.0], vec![0.0], vec![1.0], 0.0).is_err());
        assert!(BNParams::new(vec![1.0, 2.0], vec![0.0], vec![0.0], vec![1.0], 1e-5).is_err());
    }

    #[test]
    fn batchnorm_train_unit_batch() {
        // Channel values -1 and +1 in equal number: mean 0, variance 1.
        let a = RealTensor::from_vec(1, 2, 1, vec![-1.0, 1.0]).unwrap();
        let b = RealTensor::from_vec(1, 2, 1, vec![1.0, -1.0]).unwrap();
        let (out, upd) = batchnorm_train(&[a.clone(), b.clone()], &BNParams::identity(1), 0.9).unwrap();
        let scale = 1.0 / (1.0 + DEFAULT_EPSILON).sqrt();
        for (o, i) in out[0].values().iter().zip(a.values()) {
            assert!((o - i * scale).abs() < 1e-15);
            assert!((o - i).abs() < 1e-5);
        }
        assert_eq!(upd.mean, vec![0.0]);
        assert!((upd.var[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_constant_channel() {
        let t = RealTensor::filled(2, 2, 1, 3.5);
        let mut bn = BNParams::identity(1);
        bn.beta = vec![0.25];
        let (out, _) = batchnorm_train(&[t.clone(), t], &bn, 0.9).unwrap();
        assert!(out.iter().all(|o| o.values().iter().all(|&v| v == 0.25)));
    }

    #[test]
    fn batchnorm_train_moments() {
        let mut r = rng(6);
        let batch: Vec<_> = (0..4)
            .map(|_| random_real(&mut r, 5, 6, 3).map(|v| 40.0 * v + 7.0))
            .collect();
        let bn = BNParams::new(
            vec![1.5, -0.5, 2.0],
            vec![0.3, -1.0, 0.0],
            vec![0.0; 3],
            vec![1.0; 3],
            DEFAULT_EPSILON,
        )
        .unwrap();
        let (out, upd) = batchnorm_train(&batch, &bn, 0.9).unwrap();
        let (m, v) = batch_stats(&out).unwrap();
        for c in 0..3 {
            assert!((m[c] - bn.beta[c]).abs() < 1e-6);
            assert!((v[c].sqrt() - bn.gamma[c].abs()).abs() < 1e-6);
        }
        let (bm, bv) = batch_stats(&batch).unwrap();
        for c in 0..3 {
            assert!((upd.mean[c] - 0.1 * bm[c]).abs() < 1e-12);
            assert!((upd.var[c] - (0.9 + 0.1 * bv[c])).abs() < 1e-9);
        }
    }

    #[test]
    fn batchnorm_train_errors() {
        assert!(batchnorm_train(&[], &BNParams::identity(1), 0.9).is_err());
        let a = RealTensor::zeros(2, 2, 1);
        let b = RealTensor::zeros(2, 3, 1);
        assert!(batchnorm_train(&[a, b], &BNParams::identity(1), 0.9).is_err());
    }

    #[test]
    fn binarize_boundary() {
        let a = RealTensor::from_vec(1, 1, 4, vec![0.0, 0.5, -3.0, -0.0]).unwrap();
        assert_eq!(unpack(&binarize(&a)).values(), &[0.0, 1.0, 0.0, 0.0]);
        let mut r = rng(7);
        let a = random_real(&mut r, 3, 4, 77);
        let b = binarize(&a);
        assert!(b.padding_clean());
        for (u, v) in unpack(&b).values().iter().zip(a.values()) {
            assert_eq!(*u == 1.0, *v > 0.0);
        }
    }

    #[test]
    fn maxpool_cases() {
        let a = RealTensor::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (v, i) = maxpool2x2(&a).unwrap();
        assert_eq!((v.values()[0], i.get(0, 0, 0)), (4.0, 3));
        let a = RealTensor::filled(2, 2, 1, 7.0);
        let (v, i) = maxpool2x2(&a).unwrap();
        assert_eq!((v.values()[0], i.get(0, 0, 0)), (7.0, 0));
        assert!(maxpool2x2(&RealTensor::zeros(3, 2, 1)).is_err());
    }

    #[test]
    fn maxpool_matches_window_scan() {
        let mut r = rng(8);
        let a = random_real(&mut r, 8, 8, 3);
        let (v, idx) = maxpool2x2(&a).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let window = [
                        a.get(2 * y, 2 * x, c),
                        a.get(2 * y, 2 * x + 1, c),
                        a.get(2 * y + 1, 2 * x, c),
                        a.get(2 * y + 1, 2 * x + 1, c),
                    ];
                    let m = window.iter().copied().fold(f64::MIN, f64::max);
                    let first = window.iter().position(|&w| w == m).unwrap();
                    assert_eq!(v.get(y, x, c), m);
                    assert_eq!(idx.get(y, x, c) as usize, first);
                }
            }
        }
    }

    #[test]
    fn unpool_cases() {
        let a = RealTensor::filled(1, 1, 1, 4.0);
        let idx = PoolIndexMap::new(1, 1, 1, vec![3]).unwrap();
        assert_eq!(unpool2x2(&a, &idx).unwrap().values(), &[0.0, 0.0, 0.0, 4.0]);
        let mut r = rng(9);
        let a = random_real(&mut r, 2, 3, 2);
        let idx = PoolIndexMap::new(2, 3, 2, vec![0; 12]).unwrap();
        let u = unpool2x2(&a, &idx).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                for c in 0..2 {
                    let want = if y % 2 == 0 && x % 2 == 0 { a.get(y / 2, x / 2, c) } else { 0.0 };
                    assert_eq!(u.get(y, x, c), want);
                }
            }
        }
        let bad = PoolIndexMap::new(1, 1, 2, vec![0, 0]).unwrap();
        assert!(unpool2x2(&RealTensor::zeros(1, 1, 1), &bad).is_err());
    }

    #[test]
    fn pool_unpool_keeps_window_max() {
        let mut r = rng(10);
        let a = random_real(&mut r, 6, 4, 3);
        let (v, idx) = maxpool2x2(&a).unwrap();
        let u = unpool2x2(&v, &idx).unwrap();
        for y in 0..3 {
            for x in 0..2 {
                for c in 0..3 {
                    let (dy, dx) = PoolIndexMap::corner_offset(idx.get(y, x, c));
                    for k in 0..4u8 {
                        let (ky, kx) = PoolIndexMap::corner_offset(k);
                        let got = u.get(2 * y + ky, 2 * x + kx, c);
                        if (ky, kx) == (dy, dx) {
                            assert_eq!(got, a.get(2 * y + ky, 2 * x + kx, c));
                            assert_eq!(got, v.get(y, x, c));
                        } else {
                            assert_eq!(got, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unpool_bits_matches_real_unpool() {
        let mut r = rng(11);
        let b = random_bits(&mut r, 3, 2, 130);
        let idx = PoolIndexMap::new(3, 2, 130, (0..780).map(|_| r.random_range(0..4u8)).collect()).unwrap();
        let packed = unpool_bits(&b, &idx).unwrap();
        assert_eq!(unpack(&packed), unpool2x2(&unpack(&b), &idx).unwrap());
        assert!(packed.padding_clean());
    }

    #[test]
    fn fold_simple_cases() {
        let mut bn = BNParams::identity(1);
        bn.mean = vec![3.0];
        bn.var = vec![1.0 - bn.epsilon];
        let f = fold_bn_binrz(&bn);
        assert_eq!(f.rules[0].polarity, Polarity::Greater);
        assert!((f.rules[0].theta - 3.0).abs() < 1e-12);
        assert!(f.rules[0].fires(4));
        assert!(!f.rules[0].fires(3));
        bn.gamma = vec![-2.0];
        assert_eq!(fold_bn_binrz(&bn).rules[0].polarity, Polarity::Less);
        bn.gamma = vec![0.0];
        bn.beta = vec![0.0];
        assert_eq!(fold_bn_binrz(&bn).rules[0].polarity, Polarity::ConstantZero);
        bn.beta = vec![0.1];
        assert_eq!(fold_bn_binrz(&bn).rules[0].polarity, Polarity::ConstantOne);
    }

    #[test]
    fn fold_matches_unfolded_random() {
        let mut r = rng(12);
        for _ in 0..1000 {
            let n = r.random_range(1..600i64);
            let gamma = match r.random_range(0..10) {
                0 => 0.0,
                1..=3 => -r.random_range(0.01..3.0),
                _ => r.random_range(0.01..3.0),
            };
            let bn = BNParams::new(
                vec![gamma],
                vec![r.random_range(-3.0..3.0)],
                vec![r.random_range(-10.0..(n as f64 + 10.0))],
                vec![r.random_range(0.0..(n as f64))],
                DEFAULT_EPSILON,
            )
            .unwrap();
            let rule = fold_bn_binrz(&bn).rules[0];
            for s in 0..=n {
                assert_eq!(rule.fires(s), bn.apply(0, s as f64) > 0.0, "s={s} bn={bn:?}");
            }
        }
    }

    #[test]
    fn fold_handles_exact_boundary() {
        // bn(4) == 0 exactly: binarization maps zero to bit 0.
        let bn = BNParams::new(vec![1.0], vec![0.0], vec![4.0], vec![1.0], 1e-5).unwrap();
        let rule = fold_bn_binrz(&bn).rules[0];
        assert!(!rule.fires(4));
        assert!(rule.fires(5));
    }

    #[test]
    fn softmax_cases() {
        let u = softmax_pixels(&RealTensor::zeros(2, 2, 27));
        assert!(u.values().iter().all(|&p| (p - 1.0 / 27.0).abs() < 1e-15));
        let mut big = RealTensor::zeros(1, 1, 27);
        big.set(0, 0, 5, 1000.0);
        let p = softmax_pixels(&big);
        assert!(p.is_finite());
        assert!((p.get(0, 0, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_quotient() {
        let mut r = rng(13);
        let l = random_real(&mut r, 3, 2, 27);
        let p = softmax_pixels(&l);
        for y in 0..3 {
            for x in 0..2 {
                let denom: f64 = l.pixel(y, x).iter().map(|v| v.exp()).sum();
                let mut total = 0.0;
                for c in 0..27 {
                    let want = l.get(y, x, c).exp() / denom;
                    assert!((p.get(y, x, c) - want).abs() < 1e-14);
                    total += p.get(y, x, c);
                }
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }
}
