//! The assembled encoder-decoder and its three forward paths.
//!
//! - [`ForwardMode::Real`]: ±1 convolutions as single-precision GEMM over
//!   im2col buffers, then batch norm, pool and binarize on reals. This is
//!   the matrix-multiplication baseline.
//! - [`ForwardMode::PackedUnfolded`]: XNOR-popcount convolutions, then the
//!   same real-valued batch norm, pool and binarize.
//! - [`ForwardMode::PackedFolded`]: XNOR-popcount convolutions with batch
//!   norm and binarization fused into integer thresholds.
//!
//! All three agree bit for bit on every binary activation and on the label
//! map. Block 0 is the same full-precision code in every mode.

mod config;

pub use config::{BlockKind, BlockShape, BlockSpec, NetConfig};

use std::time::{Duration, Instant};

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bintensor::{pack, BitTensor, PoolIndexMap, RealTensor};
use crate::error::{Error, Result};
use crate::nnlayers::{
    batchnorm_infer, binarize, binconv, binconv_counts, conv2d_real, maxpool2x2, pm_conv_gemm,
    softmax_pixels, threshold_counts, unpool2x2, unpool_bits, BNParams, BinConvLayer,
    RealConvLayer,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ForwardMode {
    Real,
    PackedUnfolded,
    PackedFolded,
}

impl ForwardMode {
    pub const ALL: [ForwardMode; 3] = [
        ForwardMode::Real,
        ForwardMode::PackedUnfolded,
        ForwardMode::PackedFolded,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ForwardMode::Real => "real",
            ForwardMode::PackedUnfolded => "packed_unfolded",
            ForwardMode::PackedFolded => "packed_folded",
        }
    }
}

impl std::str::FromStr for ForwardMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "real" => Ok(ForwardMode::Real),
            "packed_unfolded" => Ok(ForwardMode::PackedUnfolded),
            "packed_folded" => Ok(ForwardMode::PackedFolded),
            other => Err(format!(
                "unknown mode {other:?} (real, packed_unfolded, packed_folded)"
            )),
        }
    }
}

/// Per-pixel class posteriors, `H × W × num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SalienceMap(RealTensor);

impl SalienceMap {
    pub fn from_probs(probs: RealTensor) -> Self {
        Self(probs)
    }

    pub fn probs(&self) -> &RealTensor {
        &self.0
    }

    pub fn into_inner(self) -> RealTensor {
        self.0
    }

    /// Largest deviation of any pixel's probability sum from 1, or `None`
    /// when a probability is negative or non-finite.
    pub fn simplex_error(&self) -> Option<f64> {
        let c = self.0.channels();
        let mut worst: f64 = 0.0;
        for px in self.0.values().chunks_exact(c) {
            if px.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return None;
            }
            worst = worst.max((px.iter().sum::<f64>() - 1.0).abs());
        }
        Some(worst)
    }
}

/// Hard per-pixel class decisions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, class: u8) {
        self.labels[y * self.width + x] = class;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }
}

/// Per-pixel argmax over classes; ties resolve to the lowest class index.
pub fn predict_labels(p: &SalienceMap) -> LabelMap {
    let t = p.probs();
    let c = t.channels();
    let labels = t
        .values()
        .chunks_exact(c)
        .map(|px| {
            let mut best = 0usize;
            for (k, v) in px.iter().enumerate().skip(1) {
                if *v > px[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect();
    LabelMap {
        height: t.height(),
        width: t.width(),
        labels,
    }
}

/// Everything a forward pass produced on the way to the salience map.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Binarized output of every block except the last (blocks 0..=N-2).
    pub activations: Vec<BitTensor>,
    /// Pool indices, present for pooling encoder blocks.
    pub pool_indices: Vec<Option<PoolIndexMap>>,
    /// Batch-normalized outputs of the final block.
    pub logits: RealTensor,
}

/// Instantiated network: full-precision block 0 followed by binary blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: NetConfig,
    adapter: RealConvLayer,
    blocks: Vec<BinConvLayer>,
}

enum Act {
    /// `{0, 1}` activations carried as reals (real mode).
    Dense(RealTensor),
    Packed(BitTensor),
}

impl Network {
    /// Random network: adapter weights uniform in [−1, 1], binary weights
    /// the signs of uniform [−1, 1] latents, identity batch norm.
    pub fn build(config: NetConfig, seed: u64) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = &config.blocks[0];
        let adapter = RealConvLayer::new(
            a.kernel_h,
            a.kernel_w,
            1,
            a.out_channels,
            (0..a.kernel_h * a.kernel_w * a.out_channels)
                .map(|_| rng.random_range(-1.0..=1.0))
                .collect(),
            BNParams::identity(a.out_channels),
        )?;
        let mut blocks = Vec::with_capacity(config.blocks.len() - 1);
        for (spec, shape) in config.blocks.iter().zip(&shapes).skip(1) {
            let filters = (0..spec.out_channels)
                .map(|_| {
                    let mut f = BitTensor::zeros(spec.kernel_h, spec.kernel_w, shape.in_c);
                    for ky in 0..spec.kernel_h {
                        for kx in 0..spec.kernel_w {
                            for c in 0..shape.in_c {
                                let latent: f64 = rng.random_range(-1.0..=1.0);
                                f.set_bit(ky, kx, c, latent > 0.0);
                            }
                        }
                    }
                    f
                })
                .collect();
            blocks.push(BinConvLayer::new(filters, BNParams::identity(spec.out_channels))?);
        }
        Ok(Self {
            config,
            adapter,
            blocks,
        })
    }

    /// Assembles a network from parts, checking the channel chain.
    pub fn from_parts(config: NetConfig, adapter: RealConvLayer, blocks: Vec<BinConvLayer>) -> Result<Self> {
        let shapes = config.shapes()?;
        if blocks.len() + 1 != config.blocks.len() {
            return Err(Error::Config(format!(
                "{} binary layers for {} blocks",
                blocks.len(),
                config.blocks.len()
            )));
        }
        let a = &config.blocks[0];
        if (adapter.kernel_h, adapter.kernel_w, adapter.in_channels, adapter.out_channels)
            != (a.kernel_h, a.kernel_w, 1, a.out_channels)
        {
            return Err(Error::Config("adapter layer does not match block 0".into()));
        }
        for (i, layer) in blocks.iter().enumerate() {
            let spec = &config.blocks[i + 1];
            let shape = &shapes[i + 1];
            if (layer.kernel_h(), layer.kernel_w(), layer.in_channels(), layer.out_channels())
                != (spec.kernel_h, spec.kernel_w, shape.in_c, spec.out_channels)
            {
                return Err(Error::Config(format!(
                    "layer for block {} is {}x{}x{}->{}, config wants {}x{}x{}->{}",
                    i + 1,
                    layer.kernel_h(),
                    layer.kernel_w(),
                    layer.in_channels(),
                    layer.out_channels(),
                    spec.kernel_h,
                    spec.kernel_w,
                    shape.in_c,
                    spec.out_channels
                )));
            }
        }
        Ok(Self {
            config,
            adapter,
            blocks,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn adapter(&self) -> &RealConvLayer {
        &self.adapter
    }

    pub fn adapter_mut(&mut self) -> &mut RealConvLayer {
        &mut self.adapter
    }

    /// Binary layers of blocks 1..N, in block order.
    pub fn binary_layers(&self) -> &[BinConvLayer] {
        &self.blocks
    }

    /// Binary layer of block `id` (1-based; block 0 is the adapter).
    pub fn binary_layer_mut(&mut self, id: usize) -> &mut BinConvLayer {
        assert!(id >= 1, "block 0 is the real-valued adapter");
        &mut self.blocks[id - 1]
    }

    pub fn refresh_thresholds(&mut self) -> Result<()> {
        self.blocks.iter_mut().try_for_each(|b| b.refresh_thresholds())
    }

    pub fn thresholds_fresh(&self) -> bool {
        self.blocks.iter().all(|b| b.thresholds_fresh())
    }

    pub fn binary_param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.kernel_volume() * b.out_channels())
            .sum()
    }

    pub fn real_weight_count(&self) -> usize {
        self.adapter.weights.len()
    }

    /// Number of batch-norm channels across all blocks.
    pub fn bn_channel_count(&self) -> usize {
        self.adapter.bn.channels() + self.blocks.iter().map(|b| b.bn().channels()).sum::<usize>()
    }

    pub fn forward(&self, image: &RealTensor, mode: ForwardMode) -> Result<SalienceMap> {
        self.run(image, mode, None, None)
    }

    /// Forward pass that also returns every binary activation and pool map.
    pub fn forward_traced(&self, image: &RealTensor, mode: ForwardMode) -> Result<(SalienceMap, Trace)> {
        let mut trace = Trace {
            activations: Vec::new(),
            pool_indices: Vec::new(),
            logits: RealTensor::zeros(1, 1, 1),
        };
        let p = self.run(image, mode, Some(&mut trace), None)?;
        Ok((p, trace))
    }

    /// Forward pass accumulating wall time per block into `timings`.
    pub fn forward_profiled(
        &self,
        image: &RealTensor,
        mode: ForwardMode,
        timings: &mut [Duration],
    ) -> Result<SalienceMap> {
        if timings.len() != self.config.blocks.len() {
            return Err(Error::shape("one timing slot per block required"));
        }
        self.run(image, mode, None, Some(timings))
    }

    pub fn check_image(&self, image: &RealTensor) -> Result<()> {
        if image.dims() != (self.config.input_h, self.config.input_w, 1) {
            return Err(Error::shape(format!(
                "image is {:?}, network expects {}x{}x1",
                image.dims(),
                self.config.input_h,
                self.config.input_w
            )));
        }
        if let Some(v) = image.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    fn run(
        &self,
        image: &RealTensor,
        mode: ForwardMode,
        mut trace: Option<&mut Trace>,
        mut timings: Option<&mut [Duration]>,
    ) -> Result<SalienceMap> {
        self.check_image(image)?;
        if mode != ForwardMode::Real && !self.thresholds_fresh() {
            return Err(Error::StaleThresholds);
        }
        let mut clock = Instant::now();
        let mut lap = |slot: usize, timings: &mut Option<&mut [Duration]>| {
            if let Some(t) = timings.as_deref_mut() {
                let now = Instant::now();
                t[slot] += now - clock;
                clock = now;
            }
        };

        let a0 = batchnorm_infer(&conv2d_real(image, &self.adapter)?, &self.adapter.bn)?;
        let mut act = match mode {
            ForwardMode::Real => Act::Dense(a0.map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
            _ => Act::Packed(binarize(&a0)),
        };
        record(&mut trace, &act, None)?;
        lap(0, &mut timings);

        let mut pools: Vec<Option<PoolIndexMap>> = vec![None; self.config.blocks.len()];
        let last = self.blocks.len();
        let mut logits = None;
        for (i, layer) in self.blocks.iter().enumerate() {
            let id = i + 1;
            let spec = &self.config.blocks[id];
            if let Some(src) = spec.unpool_source {
                let idx = pools[src]
                    .as_ref()
                    .ok_or_else(|| Error::Config(format!("block {src} produced no pool indices")))?;
                act = match act {
                    Act::Dense(t) => Act::Dense(unpool2x2(&t, idx)?),
                    Act::Packed(b) => Act::Packed(unpool_bits(&b, idx)?),
                };
            }
            let is_last = id == last;
            let (h, w) = match &act {
                Act::Dense(t) => (t.height(), t.width()),
                Act::Packed(b) => (b.height(), b.width()),
            };
            match (mode, &act) {
                (ForwardMode::PackedFolded, Act::Packed(bits)) => {
                    let counts = binconv_counts(bits, layer)?;
                    if is_last {
                        let s = RealTensor::from_vec(
                            h,
                            w,
                            layer.out_channels(),
                            counts.into_iter().map(f64::from).collect(),
                        )?;
                        logits = Some(batchnorm_infer(&s, layer.bn())?);
                    } else {
                        let (bits, idx) = threshold_counts(&counts, h, w, layer, spec.pool)?;
                        pools[id] = idx;
                        act = Act::Packed(bits);
                    }
                }
                _ => {
                    let s = match &act {
                        Act::Dense(t) => {
                            let n = layer.kernel_volume() as f64;
                            let pm = pm_conv_gemm(t, layer)?;
                            RealTensor::from_vec(
                                h,
                                w,
                                layer.out_channels(),
                                pm.into_iter().map(|v| (f64::from(v) + n) / 2.0).collect(),
                            )?
                        }
                        Act::Packed(bits) => binconv(bits, layer)?,
                    };
                    let mut a = batchnorm_infer(&s, layer.bn())?;
                    if is_last {
                        logits = Some(a);
                    } else {
                        if spec.pool {
                            let (pooled, idx) = maxpool2x2(&a)?;
                            a = pooled;
                            pools[id] = Some(idx);
                        }
                        act = match act {
                            Act::Dense(_) => Act::Dense(a.map(|v| if v > 0.0 { 1.0 } else { 0.0 })),
                            Act::Packed(_) => Act::Packed(binarize(&a)),
                        };
                    }
                }
            }
            if !is_last {
                record(&mut trace, &act, pools[id].clone())?;
            }
            lap(id, &mut timings);
        }
        let logits = logits.expect("final block always produces logits");
        let probs = softmax_pixels(&logits);
        if let Some(t) = trace {
            t.logits = logits;
        }
        lap(last, &mut timings);
        Ok(SalienceMap(probs))
    }
}

fn record(trace: &mut Option<&mut Trace>, act: &Act, idx: Option<PoolIndexMap>) -> Result<()> {
    if let Some(t) = trace.as_deref_mut() {
        let bits = match act {
            Act::Dense(d) => pack(d)?,
            Act::Packed(b) => b.clone(),
        };
        t.activations.push(bits);
        t.pool_indices.push(idx);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetConfig {
        NetConfig::symmetric(8, 16, 27, 8, 16, 2)
    }

    fn image(seed: u64, h: usize, w: usize) -> RealTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealTensor::from_vec(h, w, 1, (0..h * w).map(|_| rng.random_range(0.0..=1.0)).collect()).unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = Network::build(tiny(), 5).unwrap();
        let b = Network::build(tiny(), 5).unwrap();
        let c = Network::build(tiny(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn default_parameter_counts() {
        let net = Network::build(NetConfig::default_config(), 0).unwrap();
        assert_eq!(net.binary_param_count(), 17_085_952);
        assert_eq!(net.real_weight_count(), 576);
        assert_eq!(net.bn_channel_count(), 64 + 9 * 512 + 27);
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let net = Network::build(tiny(), 1).unwrap();
        for mode in ForwardMode::ALL {
            let p = net.forward(&image(2, 8, 16), mode).unwrap();
            assert_eq!(p.probs().dims(), (8, 16, 27));
            assert!(p.simplex_error().unwrap() < 1e-6);
        }
    }

    #[test]
    fn modes_agree_on_tiny_net() {
        let mut net = Network::build(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in 1..net.config().blocks.len() {
            let layer = net.binary_layer_mut(id);
            let n = layer.kernel_volume() as f64;
            let bn = layer.bn_mut();
            for c in 0..bn.channels() {
                bn.mean[c] = n / 2.0 + rng.random_range(-2.0..2.0);
                bn.var[c] = n / 4.0;
                bn.gamma[c] = rng.random_range(-1.0..1.0);
                bn.beta[c] = rng.random_range(-0.5..0.5);
            }
        }
        assert!(matches!(
            net.forward(&image(0, 8, 16), ForwardMode::PackedFolded),
            Err(Error::StaleThresholds)
        ));
        net.refresh_thresholds().unwrap();
        for seed in 0..5 {
            let img = image(seed, 8, 16);
            let (p_real, t_real) = net.forward_traced(&img, ForwardMode::Real).unwrap();
            for mode in [ForwardMode::PackedUnfolded, ForwardMode::PackedFolded] {
                let (p, t) = net.forward_traced(&img, mode).unwrap();
                assert_eq!(t.activations, t_real.activations);
                assert_eq!(t.pool_indices, t_real.pool_indices);
                assert_eq!(t.logits, t_real.logits);
                assert_eq!(predict_labels(&p), predict_labels(&p_real));
            }
        }
    }

    #[test]
    fn forward_rejects_bad_images() {
        let net = Network::build(tiny(), 1).unwrap();
        assert!(net.forward(&RealTensor::zeros(8, 8, 1), ForwardMode::Real).is_err());
        assert!(net.forward(&RealTensor::filled(8, 16, 1, 1.5), ForwardMode::Real).is_err());
    }

    #[test]
    fn predict_labels_ties_and_one_hot() {
        let p = SalienceMap::from_probs(RealTensor::filled(2, 3, 27, 1.0 / 27.0));
        assert!(predict_labels(&p).labels().iter().all(|&l| l == 0));
        let mut t = RealTensor::zeros(2, 3, 27);
        for y in 0..2 {
            for x in 0..3 {
                t.set(y, x, 13, 1.0);
            }
        }
        assert!(predict_labels(&SalienceMap::from_probs(t)).labels().iter().all(|&l| l == 13));
    }

    #[test]
    fn from_parts_checks_chain() {
        let net = Network::build(tiny(), 1).unwrap();
        let mut layers = net.binary_layers().to_vec();
        layers.swap(0, 1);
        assert!(Network::from_parts(net.config().clone(), net.adapter().clone(), layers).is_err());
        let ok = Network::from_parts(
            net.config().clone(),
            net.adapter().clone(),
            net.binary_layers().to_vec(),
        )
        .unwrap();
        assert_eq!(ok, net);
    }
}
