//! Loss, straight-through gradients and the flat-buffer kernels the training
//! graph is built from. Buffers are row-major `[y][x][c]` like [`RealTensor`].

use crate::bintensor::{BitTensor, PoolIndexMap, RealTensor};
use crate::error::{Error, Result};
use crate::netgraph::LabelMap;

/// Pixel-wise cross-entropy of one image, averaged over its `H · W` pixels,
/// and its gradient with respect to the logits. Batch callers divide both by
/// the batch size.
pub fn loss_ce(logits: &RealTensor, labels: &LabelMap) -> Result<(f64, RealTensor)> {
    let (h, w, c) = logits.dims();
    if (labels.height(), labels.width()) != (h, w) {
        return Err(Error::shape(format!(
            "{}x{} labels for {h}x{w} logits",
            labels.height(),
            labels.width()
        )));
    }
    let mut grad = vec![0.0; h * w * c];
    let loss = ce_into(logits.values(), labels.labels(), c, 1.0 / (h * w) as f64, &mut grad)?;
    Ok((loss, RealTensor::from_vec(h, w, c, grad)?))
}

/// Overwrites `grad` with `scale · (softmax − one_hot)` and
/// returns `scale · Σ −log softmax[label]`.
pub(crate) fn ce_into(logits: &[f64], labels: &[u8], c: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
    let mut loss = 0.0;
    for ((px, g), &label) in logits.chunks_exact(c).zip(grad.chunks_exact_mut(c)).zip(labels) {
        let label = label as usize;
        if label >= c {
            return Err(Error::InvalidValue(format!("label {label} outside 0..{c}")));
        }
        let top = (1..c).fold(0, |b, i| if px[i] > px[b] { i } else { b });
        let m = px[top];
        // ln(1 + rest) keeps the loss resolvable for very confident pixels.
        let rest: f64 = px
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != top)
            .map(|(_, v)| (v - m).exp())
            .sum();
        let log_z = m + rest.ln_1p();
        loss += (m - px[label]) + rest.ln_1p();
        for (gi, v) in g.iter_mut().zip(px) {
            *gi = scale * (v - log_z).exp();
        }
        g[label] -= scale;
    }
    Ok(loss * scale)
}

/// Straight-through estimator of binarization: the upstream gradient passes
/// where `|pre_activation| ≤ 1` and is zero elsewhere.
pub fn ste_binarize_backward(upstream: &RealTensor, pre_activation: &RealTensor) -> Result<RealTensor> {
    if !upstream.same_dims(pre_activation) {
        return Err(Error::shape("gradient and pre-activation differ in shape"));
    }
    let (h, w, c) = upstream.dims();
    let values = upstream
        .values()
        .iter()
        .zip(pre_activation.values())
        .map(|(&g, &a)| if a.abs() <= 1.0 { g } else { 0.0 })
        .collect();
    RealTensor::from_vec(h, w, c, values)
}

/// Real shadow weights of one binary layer, laid out `[ky][kx][in][out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentLayer {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub values: Vec<f64>,
}

impl LatentLayer {
    pub fn kernel_volume(&self) -> usize {
        self.kernel_h * self.kernel_w * self.in_channels
    }
}

/// Latent weights for every binary layer, blocks 1 onward.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentWeights {
    pub layers: Vec<LatentLayer>,
}

impl LatentWeights {
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| &l.values)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// One packed filter per output channel; bit set exactly where the latent is
/// strictly positive.
pub fn binarize_weights(latent: &LatentLayer) -> Result<Vec<BitTensor>> {
    let (kh, kw, cin, cout) = (
        latent.kernel_h,
        latent.kernel_w,
        latent.in_channels,
        latent.out_channels,
    );
    if latent.values.len() != kh * kw * cin * cout {
        return Err(Error::shape(format!(
            "{} latent values for {kh}x{kw}x{cin}x{cout}",
            latent.values.len()
        )));
    }
    Ok((0..cout)
        .map(|f| {
            let mut filter = BitTensor::zeros(kh, kw, cin);
            for ky in 0..kh {
                for kx in 0..kw {
                    for c in 0..cin {
                        if latent.values[((ky * kw + kx) * cin + c) * cout + f] > 0.0 {
                            filter.set_bit(ky, kx, c, true);
                        }
                    }
                }
            }
            filter
        })
        .collect())
}

/// `rows = h · w` patches of `kh · kw · c` values, `pad` outside the map.
pub(crate) fn im2col(x: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize, pad: f64) -> Vec<f64> {
    let k = kh * kw * c;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![pad; h * w * k];
    for y in 0..h {
        for xx in 0..w {
            let row = &mut out[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let src = ((iy - ph) * w + ix - pw) * c;
                    let dst = (ky * kw + kx) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch gradients back onto the map,
/// dropping the border entries.
pub(crate) fn col2im(cols: &[f64], h: usize, w: usize, c: usize, kh: usize, kw: usize) -> Vec<f64> {
    let k = kh * kw * c;
    let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..kh {
                let iy = y + ky;
                if iy < ph || iy - ph >= h {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xx + kx;
                    if ix < pw || ix - pw >= w {
                        continue;
                    }
                    let dst = ((iy - ph) * w + ix - pw) * c;
                    let src = (ky * kw + kx) * c;
                    for (o, g) in out[dst..dst + c].iter_mut().zip(&row[src..src + c]) {
                        *o += g;
                    }
                }
            }
        }
    }
    out
}

/// `C (m×n) = A (m×k) · B (k×n)`, all row-major, with optional transposed reads.
pub(crate) struct Gemm<'a> {
    pub a: &'a [f64],
    pub a_t: bool,
    pub b: &'a [f64],
    pub b_t: bool,
}

impl Gemm<'_> {
    pub fn run(&self, m: usize, k: usize, n: usize, c: &mut [f64], accumulate: bool) {
        debug_assert_eq!(self.a.len(), m * k);
        debug_assert_eq!(self.b.len(), k * n);
        debug_assert_eq!(c.len(), m * n);
        let (rsa, csa) = if self.a_t { (1, m as isize) } else { (k as isize, 1) };
        let (rsb, csb) = if self.b_t { (1, k as isize) } else { (n as isize, 1) };
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: the strides describe exactly the slices asserted above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.a.as_ptr(),
                rsa,
                csa,
                self.b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

/// 2×2 max-pool of an `h × w × c` buffer. Returns pooled values and, per
/// pooled entry, the flat source index; ties keep the lowest corner code.
pub(crate) fn pool_forward(a: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut src = Vec::with_capacity(oh * ow * c);
    for y in 0..oh {
        for x in 0..ow {
            for ch in 0..c {
                let mut best_i = (2 * y * w + 2 * x) * c + ch;
                for k in 1..4u8 {
                    let (dy, dx) = PoolIndexMap::corner_offset(k);
                    let i = ((2 * y + dy) * w + 2 * x + dx) * c + ch;
                    if a[i] > a[best_i] {
                        best_i = i;
                    }
                }
                out.push(a[best_i]);
                src.push(best_i as u32);
            }
        }
    }
    (out, src)
}

/// Source indices as a corner-code map of the pooled dims.
#[cfg(test)]
fn pool_codes(src: &[u32], h: usize, w: usize, c: usize) -> Result<PoolIndexMap> {
    let (oh, ow) = (h / 2, w / 2);
    let codes = src
        .iter()
        .map(|&i| {
            let i = i as usize;
            let (y, x) = ((i / c) / w, (i / c) % w);
            ((y % 2) * 2 + x % 2) as u8
        })
        .collect();
    PoolIndexMap::new(oh, ow, c, codes)
}

/// Full-resolution buffer of `len` holding `fill` except `values[i]` at `src[i]`.
pub(crate) fn scatter(values: &[f64], src: &[u32], len: usize, fill: f64) -> Vec<f64> {
    let mut out = vec![fill; len];
    for (&v, &i) in values.iter().zip(src) {
        out[i as usize] = v;
    }
    out
}

pub(crate) fn gather(full: &[f64], src: &[u32]) -> Vec<f64> {
    src.iter().map(|&i| full[i as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = RealTensor::filled(4, 6, 27, 0.37);
        let labels = LabelMap::filled(4, 6, 5);
        let (j, g) = loss_ce(&logits, &labels).unwrap();
        assert!((j - 27f64.ln()).abs() < 1e-12);
        let sum: f64 = g.values().iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn loss_falls_as_margin_grows() {
        let labels = LabelMap::filled(1, 1, 2);
        let mut last = f64::INFINITY;
        for step in 0..40 {
            let mut logits = RealTensor::zeros(1, 1, 4);
            logits.set(0, 0, 2, step as f64);
            let (j, _) = loss_ce(&logits, &labels).unwrap();
            assert!(j < last);
            last = j;
        }
        assert!(last < 1e-15);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let (h, w, c) = (3, 4, 5);
        let logits = RealTensor::from_vec(h, w, c, random(h * w * c, 3).iter().map(|v| 3.0 * v).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..c as u8)).collect()).unwrap();
        let (_, g) = loss_ce(&logits, &labels).unwrap();
        for i in 0..h * w * c {
            let eps = 1e-5;
            let mut p = logits.clone();
            p.values_mut()[i] += eps;
            let mut m = logits.clone();
            m.values_mut()[i] -= eps;
            let fd = (loss_ce(&p, &labels).unwrap().0 - loss_ce(&m, &labels).unwrap().0) / (2.0 * eps);
            let a = g.values()[i];
            assert!((fd - a).abs() <= 1e-5 * a.abs().max(1e-3), "{i}: {fd} vs {a}");
        }
    }

    #[test]
    fn shift_invariance() {
        let logits = RealTensor::from_vec(2, 2, 3, random(12, 5)).unwrap();
        let shifted = RealTensor::from_vec(
            2,
            2,
            3,
            logits.values().chunks(3).enumerate().flat_map(|(p, px)| px.iter().map(move |v| v + p as f64 * 7.0)).collect(),
        )
        .unwrap();
        let labels = LabelMap::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let (j0, g0) = loss_ce(&logits, &labels).unwrap();
        let (j1, g1) = loss_ce(&shifted, &labels).unwrap();
        assert!((j0 - j1).abs() < 1e-12);
        for (a, b) in g0.values().iter().zip(g1.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_label_rejected() {
        let logits = RealTensor::zeros(1, 1, 3);
        assert!(loss_ce(&logits, &LabelMap::filled(1, 1, 3)).is_err());
    }

    #[test]
    fn ste_pass_and_block() {
        let g = RealTensor::from_vec(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let a = RealTensor::from_vec(1, 1, 4, vec![0.5, 2.0, -1.0, 1.0]).unwrap();
        assert_eq!(ste_binarize_backward(&g, &a).unwrap().values(), &[1.0, 0.0, 3.0, 4.0]);
    }

    #[test]
    fn weight_binarization_sign_rule() {
        let layer = LatentLayer {
            kernel_h: 1,
            kernel_w: 1,
            in_channels: 3,
            out_channels: 1,
            values: vec![0.3, -0.3, 0.0],
        };
        let f = binarize_weights(&layer).unwrap();
        assert!(f[0].bit(0, 0, 0) && !f[0].bit(0, 0, 1) && !f[0].bit(0, 0, 2));
    }

    #[test]
    fn im2col_adjoint() {
        let (h, w, c, kh, kw) = (4, 5, 3, 3, 3);
        let x = random(h * w * c, 6);
        let cols = im2col(&x, h, w, c, kh, kw, 0.0);
        let g = random(cols.len(), 7);
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im(&g, h, w, c, kh, kw);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn gemm_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a = random(m * k, 8);
        let b = random(k * n, 9);
        let mut c = vec![0.0; m * n];
        Gemm { a: &a, a_t: false, b: &b, b_t: false }.run(m, k, n, &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // aᵀ is k×m stored as a (m×k); compute (aᵀ)ᵀ·b = a·b again via a_t on the transpose.
        let at: Vec<f64> = (0..k).flat_map(|t| (0..m).map(move |i| (t, i))).map(|(t, i)| a[i * k + t]).collect();
        let mut c2 = vec![0.0; m * n];
        Gemm { a: &at, a_t: true, b: &b, b_t: false }.run(m, k, n, &mut c2, false);
        assert_eq!(c, c2);
        let bt: Vec<f64> = (0..n).flat_map(|j| (0..k).map(move |t| (j, t))).map(|(j, t)| b[t * n + j]).collect();
        let mut c3 = vec![0.0; m * n];
        Gemm { a: &a, a_t: false, b: &bt, b_t: true }.run(m, k, n, &mut c3, false);
        assert_eq!(c, c3);
    }

    #[test]
    fn pooling_matches_layer_and_conserves_gradient() {
        let (h, w, c) = (4, 6, 3);
        let a = random(h * w * c, 10);
        let (pooled, src) = pool_forward(&a, h, w, c);
        let t = RealTensor::from_vec(h, w, c, a.clone()).unwrap();
        let (p, idx) = crate::nnlayers::maxpool2x2(&t).unwrap();
        assert_eq!(p.values(), &pooled[..]);
        assert_eq!(pool_codes(&src, h, w, c).unwrap(), idx);
        let g = random(pooled.len(), 11);
        let routed = scatter(&g, &src, a.len(), 0.0);
        let total: f64 = routed.iter().sum();
        assert!((total - g.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(gather(&routed, &src), g);
    }
}
