//! Double-precision ±1 reference forward pass.
//!
//! Activations are held as −1/+1 reals, weights as −1/+1 reals, convolution
//! borders read −1. Each binary convolution result `pm` is mapped to the
//! agreement count `s = (pm + n) / 2` before batch norm, so the reference
//! shares its batch-norm parameters with the packed engine. Slow on purpose.

use crate::bintensor::{PoolIndexMap, RealTensor};
use crate::error::{Error, Result};
use crate::netgraph::{Network, SalienceMap};
use crate::nnlayers::{batchnorm_infer, conv_direct, maxpool2x2, softmax_pixels, unpool_fill, BinConvLayer};

/// Plain real convolution with `pad_value` borders; weights `[ky][kx][in][out]`.
pub fn pm_conv(
    input_pm: &RealTensor,
    weights_pm: &[f64],
    kernel_h: usize,
    kernel_w: usize,
    out_channels: usize,
    pad_value: f64,
) -> Result<RealTensor> {
    conv_direct(input_pm, weights_pm, kernel_h, kernel_w, out_channels, pad_value)
}

/// The affine bridge `2s − n` from agreement counts to ±1 dot products.
pub fn popcount_to_pm(s: &RealTensor, n: usize) -> RealTensor {
    let n = n as f64;
    s.map(|v| 2.0 * v - n)
}

/// ±1 weights of a binary layer, laid out `[ky][kx][in][out]`.
pub fn pm_weights(layer: &BinConvLayer) -> Vec<f64> {
    let f = layer.out_channels();
    let mut out = vec![0.0; layer.kernel_volume() * f];
    for (fi, filt) in layer.weights().iter().enumerate() {
        for ky in 0..layer.kernel_h() {
            for kx in 0..layer.kernel_w() {
                for c in 0..layer.in_channels() {
                    let row = (ky * layer.kernel_w() + kx) * layer.in_channels() + c;
                    out[row * f + fi] = if filt.bit(ky, kx, c) { 1.0 } else { -1.0 };
                }
            }
        }
    }
    out
}

/// Every intermediate of the reference pass, in ±1 form.
#[derive(Clone, Debug)]
pub struct RefTrace {
    /// Binarized outputs of blocks 0..=N-2 as −1/+1 tensors.
    pub activations: Vec<RealTensor>,
    pub pool_indices: Vec<Option<PoolIndexMap>>,
    /// Agreement counts `s` of each binary block (index 0 holds block 0's
    /// real convolution output).
    pub pre_norm: Vec<RealTensor>,
    pub logits: RealTensor,
}

fn sign_pm(a: &RealTensor) -> RealTensor {
    a.map(|v| if v > 0.0 { 1.0 } else { -1.0 })
}

pub fn reference_forward(net: &Network, image: &RealTensor) -> Result<(SalienceMap, RefTrace)> {
    net.check_image(image)?;
    let cfg = net.config();
    let adapter = net.adapter();
    let s0 = conv_direct(
        image,
        &adapter.weights,
        adapter.kernel_h,
        adapter.kernel_w,
        adapter.out_channels,
        0.0,
    )?;
    let a0 = batchnorm_infer(&s0, &adapter.bn)?;
    let mut act = sign_pm(&a0);
    let mut trace = RefTrace {
        activations: vec![act.clone()],
        pool_indices: vec![None],
        pre_norm: vec![s0],
        logits: RealTensor::zeros(1, 1, 1),
    };
    let layers = net.binary_layers();
    for (i, layer) in layers.iter().enumerate() {
        let id = i + 1;
        let spec = &cfg.blocks[id];
        if let Some(src) = spec.unpool_source {
            let idx = trace.pool_indices[src]
                .as_ref()
                .ok_or_else(|| Error::Config(format!("block {src} produced no pool indices")))?;
            // Positions not chosen by the index hold bit 0, i.e. −1.
            act = unpool_fill(&act, idx, -1.0)?;
        }
        let n = layer.kernel_volume();
        let pm = pm_conv(
            &act,
            &pm_weights(layer),
            layer.kernel_h(),
            layer.kernel_w(),
            layer.out_channels(),
            -1.0,
        )?;
        let s = pm.map(|v| (v + n as f64) / 2.0);
        let mut a = batchnorm_infer(&s, layer.bn())?;
        trace.pre_norm.push(s);
        if id == layers.len() {
            let probs = softmax_pixels(&a);
            trace.logits = a;
            return Ok((SalienceMap::from_probs(probs), trace));
        }
        let mut idx = None;
        if spec.pool {
            let (pooled, map) = maxpool2x2(&a)?;
            a = pooled;
            idx = Some(map);
        }
        act = sign_pm(&a);
        trace.activations.push(act.clone());
        trace.pool_indices.push(idx);
    }
    Err(Error::Config("network has no final classifier".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bintensor::to_pm;
    use crate::netgraph::{predict_labels, ForwardMode, NetConfig};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn pm_conv_small_cases() {
        let ones = RealTensor::filled(3, 3, 1, 1.0);
        let out = pm_conv(&ones, &[1.0; 9], 3, 3, 1, -1.0).unwrap();
        assert_eq!(out.get(1, 1, 0), 9.0);
        // Two agreements, two disagreements.
        let x = RealTensor::from_vec(1, 1, 4, vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let out = pm_conv(&x, &[1.0, -1.0, -1.0, 1.0], 1, 1, 1, -1.0).unwrap();
        assert_eq!(out.values(), &[0.0]);
    }

    #[test]
    fn popcount_bridge() {
        let s = RealTensor::from_vec(1, 1, 3, vec![9.0, 0.0, 4.5]).unwrap();
        assert_eq!(popcount_to_pm(&s, 9).values(), &[9.0, -9.0, 0.0]);
    }

    #[test]
    fn pm_parity_matches_kernel_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cin = 5;
        let x = RealTensor::from_vec(
            4,
            4,
            cin,
            (0..80).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        )
        .unwrap();
        let w: Vec<f64> = (0..9 * cin * 2).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
        let out = pm_conv(&x, &w, 3, 3, 2, -1.0).unwrap();
        let n = (9 * cin) as i64;
        assert!(out.values().iter().all(|v| (*v as i64 - n).rem_euclid(2) == 0));
    }

    #[test]
    fn reference_agrees_with_real_mode() {
        let net = Network::build(NetConfig::symmetric(8, 16, 27, 4, 8, 2), 11).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = RealTensor::from_vec(8, 16, 1, (0..128).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap();
        let (p_ref, tr) = reference_forward(&net, &img).unwrap();
        let (p, t) = net.forward_traced(&img, ForwardMode::Real).unwrap();
        assert_eq!(tr.activations.len(), t.activations.len());
        for (r, b) in tr.activations.iter().zip(&t.activations) {
            assert_eq!(r, &to_pm(b));
        }
        assert_eq!(tr.pool_indices, t.pool_indices);
        assert_eq!(predict_labels(&p_ref), predict_labels(&p));
        assert!(p_ref.simplex_error().unwrap() < 1e-6);
    }
}
