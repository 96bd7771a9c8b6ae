//! Batched forward and reverse pass over the ±1 training graph.
//!
//! Binary activations travel as −1/+1 reals and binary convolutions produce
//! agreement counts `s = (pm + n) / 2`, so batch-norm parameters learned here
//! drop straight into the packed engine. Batch norm uses mini-batch
//! statistics (biased variance).

use rayon::prelude::*;

use super::ops::{col2im, gather, im2col, pool_forward, scatter, ce_into, Gemm, LatentWeights};
use crate::bintensor::RealTensor;
use crate::error::{Error, Result};
use crate::netgraph::{BlockShape, LabelMap, NetConfig};

/// How binarization behaves in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relaxation {
    /// The real network: sign activations and sign weights, with
    /// straight-through gradients.
    Sign,
    /// A continuous stand-in with the same gradient code: activations are
    /// clamped to [−1, 1] and latent weights are used as they are. Its
    /// gradients are exact, which makes it checkable by finite differences.
    HardTanh,
}

/// Every trainable array. Gradients use the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    /// Block-0 weights `[ky][kx][1][out]`.
    pub adapter: Vec<f64>,
    pub latent: LatentWeights,
    /// Batch-norm scale per block.
    pub gamma: Vec<Vec<f64>>,
    /// Batch-norm shift per block.
    pub beta: Vec<Vec<f64>>,
}

impl ParamSet {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for a in z.arrays_mut() {
            a.iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    /// Arrays in a fixed order: adapter, latents, gammas, betas.
    pub fn arrays(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![&self.adapter];
        out.extend(self.latent.layers.iter().map(|l| l.values.as_slice()));
        out.extend(self.gamma.iter().map(Vec::as_slice));
        out.extend(self.beta.iter().map(Vec::as_slice));
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![&mut self.adapter];
        out.extend(self.latent.layers.iter_mut().map(|l| l.values.as_mut_slice()));
        out.extend(self.gamma.iter_mut().map(Vec::as_mut_slice));
        out.extend(self.beta.iter_mut().map(Vec::as_mut_slice));
        out
    }

    /// Whether array `i` of [`ParamSet::arrays`] is a latent weight array.
    pub fn is_latent(&self, i: usize) -> bool {
        i >= 1 && i <= self.latent.layers.len()
    }
}

/// Result of one forward/backward sweep over a batch.
#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// Mean over the batch of the per-image pixel-averaged cross-entropy.
    pub loss: f64,
    pub grads: ParamSet,
    /// Per block, batch mean and biased variance of the pre-norm values.
    pub stats: Vec<(Vec<f64>, Vec<f64>)>,
    /// Pixels whose argmax logit matches the label.
    pub correct: usize,
    pub pixels: usize,
}

struct BlockTape {
    /// Convolution input, after any unpool.
    input: Vec<f64>,
    xhat: Vec<f64>,
    /// Normalized (and pooled) values the activation was taken of.
    pre: Vec<f64>,
    pool_src: Option<Vec<u32>>,
}

struct Layer<'a> {
    kh: usize,
    kw: usize,
    weights: Vec<f64>,
    /// Kernel volume for binary layers, `None` for block 0.
    binary: Option<usize>,
    shape: &'a BlockShape,
    pool: bool,
    unpool: Option<usize>,
}

fn patches(layer: &Layer, x: &[f64]) -> Vec<f64> {
    let s = layer.shape;
    let pad = if layer.binary.is_some() { -1.0 } else { 0.0 };
    im2col(x, s.conv_h, s.conv_w, s.in_c, layer.kh, layer.kw, pad)
}

fn layers<'a>(config: &NetConfig, shapes: &'a [BlockShape], params: &ParamSet, relax: Relaxation) -> Vec<Layer<'a>> {
    config
        .blocks
        .iter()
        .zip(shapes)
        .enumerate()
        .map(|(b, (spec, shape))| {
            let (weights, binary) = if b == 0 {
                (params.adapter.clone(), None)
            } else {
                let l = &params.latent.layers[b - 1];
                let w = match relax {
                    Relaxation::Sign => l.values.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect(),
                    Relaxation::HardTanh => l.values.clone(),
                };
                (w, Some(l.kernel_volume()))
            };
            Layer {
                kh: spec.kernel_h,
                kw: spec.kernel_w,
                weights,
                binary,
                shape,
                pool: spec.pool,
                unpool: spec.unpool_source,
            }
        })
        .collect()
}

fn activate(a: f64, relax: Relaxation) -> f64 {
    match relax {
        Relaxation::Sign => {
            if a > 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        Relaxation::HardTanh => a.clamp(-1.0, 1.0),
    }
}

/// Forward pass with batch statistics, cross-entropy loss and full reverse
/// pass. `params` must match `config`.
pub fn batch_gradients(
    config: &NetConfig,
    params: &ParamSet,
    epsilon: f64,
    images: &[&RealTensor],
    labels: &[&LabelMap],
    relax: Relaxation,
) -> Result<BatchOutput> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Empty(format!(
            "batch of {} images and {} label maps",
            images.len(),
            labels.len()
        )));
    }
    let shapes = config.shapes()?;
    for (img, lbl) in images.iter().zip(labels) {
        if img.dims() != (config.input_h, config.input_w, 1) || (lbl.height(), lbl.width()) != (config.input_h, config.input_w) {
            return Err(Error::shape(format!(
                "sample {:?} does not match the {}x{} network input",
                img.dims(),
                config.input_h,
                config.input_w
            )));
        }
    }
    let layers = layers(config, &shapes, params, relax);
    let n = images.len();
    let last = layers.len() - 1;

    let mut tapes: Vec<Vec<BlockTape>> = (0..n).map(|_| Vec::with_capacity(layers.len())).collect();
    let mut outs: Vec<Vec<f64>> = images.iter().map(|t| t.values().to_vec()).collect();
    let mut stats = Vec::with_capacity(layers.len());
    for (b, layer) in layers.iter().enumerate() {
        let sh = layer.shape;
        let hw = sh.conv_h * sh.conv_w;
        let co = sh.out_c;
        let k = layer.kh * layer.kw * sh.in_c;
        let conv: Vec<(Vec<f64>, Vec<f64>)> = outs
            .par_iter()
            .zip(tapes.par_iter())
            .map(|(x_in, tape)| {
                let x = match layer.unpool {
                    Some(src) => scatter(x_in, tape[src].pool_src.as_ref().expect("pooling block"), hw * sh.in_c, -1.0),
                    None => x_in.clone(),
                };
                let mut s = vec![0.0; hw * co];
                if layer.kh * layer.kw == 1 {
                    Gemm { a: &x, a_t: false, b: &layer.weights, b_t: false }.run(hw, k, co, &mut s, false);
                } else {
                    let cols = patches(layer, &x);
                    Gemm { a: &cols, a_t: false, b: &layer.weights, b_t: false }.run(hw, k, co, &mut s, false);
                }
                if let Some(vol) = layer.binary {
                    let vol = vol as f64;
                    s.iter_mut().for_each(|v| *v = (*v + vol) / 2.0);
                }
                (x, s)
            })
            .collect();

        let count = (n * hw) as f64;
        let mut mean = vec![0.0; co];
        for (_, s) in &conv {
            for px in s.chunks_exact(co) {
                for (m, v) in mean.iter_mut().zip(px) {
                    *m += v;
                }
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; co];
        for (_, s) in &conv {
            for px in s.chunks_exact(co) {
                for ((q, v), m) in var.iter_mut().zip(px).zip(&mean) {
                    *q += (v - m) * (v - m);
                }
            }
        }
        var.iter_mut().for_each(|q| *q /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let (gamma, beta) = (&params.gamma[b], &params.beta[b]);

        let step: Vec<(BlockTape, Vec<f64>)> = conv
            .into_par_iter()
            .map(|(input, s)| {
                let mut xhat = s;
                let mut a = vec![0.0; xhat.len()];
                for (px, apx) in xhat.chunks_exact_mut(co).zip(a.chunks_exact_mut(co)) {
                    for c in 0..co {
                        px[c] = (px[c] - mean[c]) * inv_std[c];
                        apx[c] = gamma[c] * px[c] + beta[c];
                    }
                }
                if b == last {
                    let tape = BlockTape { input, xhat, pre: Vec::new(), pool_src: None };
                    return (tape, a);
                }
                let (pre, pool_src) = if layer.pool {
                    let (p, src) = pool_forward(&a, sh.conv_h, sh.conv_w, co);
                    (p, Some(src))
                } else {
                    (a, None)
                };
                let out = pre.iter().map(|&v| activate(v, relax)).collect();
                (BlockTape { input, xhat, pre, pool_src }, out)
            })
            .collect();
        outs = Vec::with_capacity(n);
        for (tape, (t, out)) in tapes.iter_mut().zip(step) {
            tape.push(t);
            outs.push(out);
        }
        stats.push((mean, var));
    }

    // Loss on the logits left in `outs`.
    let classes = config.num_classes;
    let hw_out = config.input_h * config.input_w;
    let scale = 1.0 / (n * hw_out) as f64;
    let mut loss = 0.0;
    let mut correct = 0;
    let mut grads_out = Vec::with_capacity(n);
    for (logits, lbl) in outs.iter().zip(labels) {
        let mut g = vec![0.0; logits.len()];
        loss += ce_into(logits, lbl.labels(), classes, scale, &mut g)?;
        for (px, &l) in logits.chunks_exact(classes).zip(lbl.labels()) {
            let mut best = 0;
            for c in 1..classes {
                if px[c] > px[best] {
                    best = c;
                }
            }
            correct += usize::from(best == l as usize);
        }
        grads_out.push(g);
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {loss}")));
    }

    let mut grads = params.zeros_like();
    let mut g_next = grads_out;
    for (b, layer) in layers.iter().enumerate().rev() {
        let sh = layer.shape;
        let hw = sh.conv_h * sh.conv_w;
        let co = sh.out_c;
        let k = layer.kh * layer.kw * sh.in_c;
        // Gradient with respect to the normalized, pre-pool values.
        let g_a: Vec<Vec<f64>> = g_next
            .into_par_iter()
            .zip(tapes.par_iter())
            .map(|(g, tape)| {
                if b == last {
                    return g;
                }
                let t = &tape[b];
                let masked: Vec<f64> = g
                    .iter()
                    .zip(&t.pre)
                    .map(|(&g, &a)| if a.abs() <= 1.0 { g } else { 0.0 })
                    .collect();
                match &t.pool_src {
                    Some(src) => scatter(&masked, src, hw * co, 0.0),
                    None => masked,
                }
            })
            .collect();

        let (gamma, var) = (&params.gamma[b], &stats[b].1);
        let mut sum_g = vec![0.0; co];
        let mut sum_gx = vec![0.0; co];
        for (g, tape) in g_a.iter().zip(&tapes) {
            for (gp, xp) in g.chunks_exact(co).zip(tape[b].xhat.chunks_exact(co)) {
                for c in 0..co {
                    sum_g[c] += gp[c];
                    sum_gx[c] += gp[c] * xp[c];
                }
            }
        }
        grads.gamma[b].copy_from_slice(&sum_gx);
        grads.beta[b].copy_from_slice(&sum_g);
        let count = (n * hw) as f64;
        let coef: Vec<f64> = (0..co).map(|c| gamma[c] / (var[c] + epsilon).sqrt()).collect();
        let half = if layer.binary.is_some() { 0.5 } else { 1.0 };

        let per_sample: Vec<(Vec<f64>, Option<Vec<f64>>)> = g_a
            .into_par_iter()
            .zip(tapes.par_iter())
            .map(|(mut g, tape)| {
                let t = &tape[b];
                for (gp, xp) in g.chunks_exact_mut(co).zip(t.xhat.chunks_exact(co)) {
                    for c in 0..co {
                        gp[c] = half * coef[c] * (gp[c] - sum_g[c] / count - xp[c] * sum_gx[c] / count);
                    }
                }
                let mut dw = vec![0.0; k * co];
                let one_by_one = layer.kh * layer.kw == 1;
                let cols_buf;
                let cols: &[f64] = if one_by_one {
                    &t.input
                } else {
                    cols_buf = patches(layer, &t.input);
                    &cols_buf
                };
                Gemm { a: cols, a_t: true, b: &g, b_t: false }.run(k, hw, co, &mut dw, false);
                if b == 0 {
                    return (dw, None);
                }
                let mut g_cols = vec![0.0; hw * k];
                Gemm { a: &g, a_t: false, b: &layer.weights, b_t: true }.run(hw, co, k, &mut g_cols, false);
                let g_x = if one_by_one {
                    g_cols
                } else {
                    col2im(&g_cols, sh.conv_h, sh.conv_w, sh.in_c, layer.kh, layer.kw)
                };
                let g_in = match layer.unpool {
                    Some(src) => gather(&g_x, tape[src].pool_src.as_ref().expect("pooling block")),
                    None => g_x,
                };
                (dw, Some(g_in))
            })
            .collect();

        let dw_total = if b == 0 {
            &mut grads.adapter
        } else {
            &mut grads.latent.layers[b - 1].values
        };
        g_next = Vec::with_capacity(n);
        for (dw, g_in) in per_sample {
            for (t, v) in dw_total.iter_mut().zip(&dw) {
                *t += v;
            }
            if let Some(g) = g_in {
                g_next.push(g);
            }
        }
        if b > 0 && relax == Relaxation::Sign {
            // Straight-through to the latents, cut where they saturate.
            let latent = &params.latent.layers[b - 1].values;
            for (g, &l) in grads.latent.layers[b - 1].values.iter_mut().zip(latent) {
                if l.abs() > 1.0 {
                    *g = 0.0;
                }
            }
        }
    }

    Ok(BatchOutput {
        loss,
        grads,
        stats,
        correct,
        pixels: n * hw_out,
    })
}
