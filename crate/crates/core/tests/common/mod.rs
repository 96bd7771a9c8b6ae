//! Helpers shared by the integration tests.
#![allow(dead_code)]

use bcednet::trainer::{batch_gradients, ParamSet, Relaxation, TrainOptions, TrainState};
use bcednet::{BNParams, BitTensor, LabelMap, NetConfig, Network, RealTensor};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_bits(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> BitTensor {
    let mut b = BitTensor::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                b.set_bit(y, x, ch, rng.random::<bool>());
            }
        }
    }
    b
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RealTensor {
    RealTensor::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    LabelMap::new(h, w, (0..h * w).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

/// Batch norm centered on the spread of agreement counts over `n` random
/// bits, with γ of both signs and occasionally exactly zero.
pub fn random_bn(rng: &mut ChaCha8Rng, channels: usize, center: f64, spread: f64) -> BNParams {
    let mut gamma = Vec::with_capacity(channels);
    let mut beta = Vec::with_capacity(channels);
    let mut mean = Vec::with_capacity(channels);
    let mut var = Vec::with_capacity(channels);
    for _ in 0..channels {
        let g = match rng.random_range(0..20) {
            0 => 0.0,
            1..=6 => -rng.random_range(0.1..2.0),
            _ => rng.random_range(0.1..2.0),
        };
        gamma.push(g);
        beta.push(rng.random_range(-1.0..1.0));
        mean.push(center + rng.random_range(-1.0..1.0) * spread);
        var.push(spread * spread * rng.random_range(0.5..2.0));
    }
    BNParams::new(gamma, beta, mean, var, 1e-5).unwrap()
}

/// Random weights with batch norm matched to each layer's count range, so
/// that activations are mixed rather than saturated.
pub fn calibrated_network(config: NetConfig, seed: u64) -> Network {
    let mut net = Network::build(config, seed).unwrap();
    let mut r = rng(seed ^ 0x5eed);
    let c = net.adapter().out_channels;
    net.adapter_mut().bn = random_bn(&mut r, c, 0.0, 1.0);
    for id in 1..net.config().blocks.len() {
        let layer = net.binary_layer_mut(id);
        let n = layer.kernel_volume() as f64;
        let bn = random_bn(&mut r, layer.out_channels(), n / 2.0, n.sqrt() / 2.0);
        *layer.bn_mut() = bn;
        layer.refresh_thresholds().unwrap();
    }
    net
}

/// Training state with latents spread over [−1, 1] and small γ of both
/// signs. Small γ keeps most activations inside the linear range of the
/// clamp, so ties between pooling candidates do not occur.
pub fn gradient_state(config: NetConfig, seed: u64) -> TrainState {
    let mut st = TrainState::new(config, seed, &TrainOptions::default()).unwrap();
    let mut r = rng(seed + 100);
    for l in st.params.latent.layers.iter_mut() {
        l.values.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    }
    for (g, b) in st.params.gamma.iter_mut().zip(st.params.beta.iter_mut()) {
        g.iter_mut().for_each(|v| *v = r.random_range(0.2..0.4) * if r.random::<bool>() { 1.0 } else { -1.0 });
        b.iter_mut().for_each(|v| *v = r.random_range(-0.5..0.5));
    }
    st
}

pub fn gradient_batch(config: &NetConfig, seed: u64, n: usize) -> (Vec<RealTensor>, Vec<LabelMap>) {
    let mut r = rng(seed);
    let (h, w) = (config.input_h, config.input_w);
    (0..n)
        .map(|_| (random_image(&mut r, h, w), random_labels(&mut r, h, w, config.num_classes as u8)))
        .unzip()
}

fn batch_loss(st: &TrainState, p: &ParamSet, imgs: &[RealTensor], lbls: &[LabelMap], relax: Relaxation) -> f64 {
    let i: Vec<_> = imgs.iter().collect();
    let l: Vec<_> = lbls.iter().collect();
    batch_gradients(&st.config, p, st.epsilon, &i, &l, relax).unwrap().loss
}

/// Central finite differences against the analytic gradient over every
/// entry of the listed arrays. Returns the worst relative error and the
/// number of entries checked.
pub fn fd_check(
    st: &TrainState,
    relax: Relaxation,
    arrays: &[usize],
    imgs: &[RealTensor],
    lbls: &[LabelMap],
) -> (f64, usize) {
    let i: Vec<_> = imgs.iter().collect();
    let l: Vec<_> = lbls.iter().collect();
    let analytic = batch_gradients(&st.config, &st.params, st.epsilon, &i, &l, relax).unwrap().grads;
    let analytic: Vec<Vec<f64>> = analytic.arrays().iter().map(|a| a.to_vec()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for &a in arrays {
        for (e, &g) in analytic[a].iter().enumerate() {
            let theta = st.params.arrays()[a][e];
            let h = 1e-4 * theta.abs().max(1e-2);
            let mut plus = st.params.clone();
            plus.arrays_mut()[a][e] = theta + h;
            let mut minus = st.params.clone();
            minus.arrays_mut()[a][e] = theta - h;
            let fd = (batch_loss(st, &plus, imgs, lbls, relax) - batch_loss(st, &minus, imgs, lbls, relax)) / (2.0 * h);
            // Below 1e-6 the loss round-off (about 1e-11 after division by
            // 2h) dominates the difference.
            let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-6);
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}
