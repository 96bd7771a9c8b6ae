//! Binary-constrained training.
//!
//! Binary layers keep real latent weights in [−1, 1]; the forward pass uses
//! their signs and gradients reach them straight through. Batch norm runs on
//! mini-batch statistics and keeps running averages for inference. Updates use
//! AdaMax with the learning rate decayed once per epoch.

mod adamax;
mod graph;
mod ops;

use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bintensor::RealTensor;
use crate::error::{Error, Result};
use crate::evalbench::evaluate;
use crate::netgraph::{ForwardMode, LabelMap, NetConfig, Network};
use crate::nnlayers::{BNParams, BinConvLayer, RealConvLayer, DEFAULT_EPSILON};

pub use adamax::{adamax_step, AdaMaxState, BETA1, BETA2, U_FLOOR};
pub use graph::{batch_gradients, BatchOutput, ParamSet, Relaxation};
pub use ops::{binarize_weights, loss_ce, ste_binarize_backward, LatentLayer, LatentWeights};

/// Half-width of the uniform latent initialization.
pub const LATENT_INIT: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    /// Weight of the old value in the running batch-norm averages.
    pub bn_momentum: f64,
    pub relaxation: Relaxation,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            batch_size: 20,
            learning_rate: 0.002,
            lr_decay: 0.9,
            bn_momentum: 0.9,
            relaxation: Relaxation::Sign,
        }
    }
}

/// Everything needed to continue training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: NetConfig,
    pub params: ParamSet,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    pub epsilon: f64,
    /// One slot per array of [`ParamSet::arrays`].
    pub optimizer: Vec<AdaMaxState>,
    /// Completed epochs.
    pub epoch: usize,
    /// Learning rate for the next epoch.
    pub learning_rate: f64,
}

impl TrainState {
    /// Fresh state: block-0 weights uniform in [−1, 1], latents uniform in
    /// [−0.1, 0.1], γ = 1, β = 0.
    pub fn new(config: NetConfig, seed: u64, options: &TrainOptions) -> Result<Self> {
        let shapes = config.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = &config.blocks[0];
        let adapter = (0..a.kernel_h * a.kernel_w * a.out_channels)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        let layers = config
            .blocks
            .iter()
            .zip(&shapes)
            .skip(1)
            .map(|(b, s)| LatentLayer {
                kernel_h: b.kernel_h,
                kernel_w: b.kernel_w,
                in_channels: s.in_c,
                out_channels: b.out_channels,
                values: (0..b.kernel_h * b.kernel_w * s.in_c * b.out_channels)
                    .map(|_| rng.random_range(-LATENT_INIT..=LATENT_INIT))
                    .collect(),
            })
            .collect();
        let channels: Vec<usize> = config.blocks.iter().map(|b| b.out_channels).collect();
        let params = ParamSet {
            adapter,
            latent: LatentWeights { layers },
            gamma: channels.iter().map(|&c| vec![1.0; c]).collect(),
            beta: channels.iter().map(|&c| vec![0.0; c]).collect(),
        };
        let optimizer = params.arrays().iter().map(|a| AdaMaxState::new(a.len())).collect();
        Ok(Self {
            config,
            params,
            running_mean: channels.iter().map(|&c| vec![0.0; c]).collect(),
            running_var: channels.iter().map(|&c| vec![1.0; c]).collect(),
            epsilon: DEFAULT_EPSILON,
            optimizer,
            epoch: 0,
            learning_rate: options.learning_rate,
        })
    }

    fn bn(&self, b: usize) -> Result<BNParams> {
        BNParams::new(
            self.params.gamma[b].clone(),
            self.params.beta[b].clone(),
            self.running_mean[b].clone(),
            self.running_var[b].clone(),
            self.epsilon,
        )
    }

    /// Inference network: signs of the latents, running batch-norm statistics,
    /// freshly folded thresholds.
    pub fn export(&self) -> Result<Network> {
        let a = &self.config.blocks[0];
        let adapter = RealConvLayer::new(
            a.kernel_h,
            a.kernel_w,
            1,
            a.out_channels,
            self.params.adapter.clone(),
            self.bn(0)?,
        )?;
        let blocks = self
            .params
            .latent
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| BinConvLayer::new(binarize_weights(l)?, self.bn(i + 1)?))
            .collect::<Result<Vec<_>>>()?;
        Network::from_parts(self.config.clone(), adapter, blocks)
    }

    /// Structural agreement between state, config and optimizer slots.
    pub fn validate(&self) -> Result<()> {
        let fresh = TrainState::new(self.config.clone(), 0, &TrainOptions::default())?;
        let lens = |p: &ParamSet| p.arrays().iter().map(|a| a.len()).collect::<Vec<_>>();
        let ok = lens(&fresh.params) == lens(&self.params)
            && self.optimizer.len() == self.params.arrays().len()
            && self
                .optimizer
                .iter()
                .zip(self.params.arrays())
                .all(|(o, a)| o.m.len() == a.len() && o.u.len() == a.len())
            && self.running_mean.iter().map(Vec::len).eq(fresh.running_mean.iter().map(Vec::len))
            && self.running_var.iter().map(Vec::len).eq(fresh.running_var.iter().map(Vec::len));
        if ok {
            Ok(())
        } else {
            Err(Error::Config("training state does not match its network config".into()))
        }
    }
}

#[derive(Clone, Debug)]
pub struct EpochRecord {
    /// 1-based epoch number, counting across resumed runs.
    pub epoch: usize,
    pub loss: f64,
    /// Pixel accuracy of the training forward passes (batch statistics).
    pub train_accuracy: f64,
    /// Pixel accuracy of the exported network on the held-out set.
    pub val_accuracy: Option<f64>,
    pub learning_rate: f64,
    pub wall_time: Duration,
}

/// Wall time is not compared.
impl PartialEq for EpochRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.loss == other.loss
            && self.train_accuracy == other.train_accuracy
            && self.val_accuracy == other.val_accuracy
            && self.learning_rate == other.learning_rate
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Borrowed images with their label maps.
#[derive(Clone, Copy, Debug)]
pub struct Samples<'a> {
    pub images: &'a [RealTensor],
    pub labels: &'a [LabelMap],
}

impl<'a> Samples<'a> {
    pub fn new(images: &'a [RealTensor], labels: &'a [LabelMap]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Empty("training or validation set".into()));
        }
        if images.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} images but {} label maps",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub struct Trainer {
    pub state: TrainState,
    pub options: TrainOptions,
}

impl Trainer {
    pub fn new(config: NetConfig, seed: u64, options: TrainOptions) -> Result<Self> {
        Ok(Self {
            state: TrainState::new(config, seed, &options)?,
            options,
        })
    }

    pub fn resume(state: TrainState, options: TrainOptions) -> Result<Self> {
        state.validate()?;
        Ok(Self { state, options })
    }

    /// One optimizer step on a batch; returns the batch output.
    pub fn step(&mut self, images: &[&RealTensor], labels: &[&LabelMap]) -> Result<BatchOutput> {
        let st = &mut self.state;
        let out = batch_gradients(&st.config, &st.params, st.epsilon, images, labels, self.options.relaxation)?;
        let lr = st.learning_rate;
        let grads = out.grads.arrays();
        for (i, (p, g)) in st.params.arrays_mut().into_iter().zip(&grads).enumerate() {
            adamax_step(&mut st.optimizer[i], p, g, lr)?;
        }
        for layer in st.params.latent.layers.iter_mut() {
            layer.values.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        }
        let m = self.options.bn_momentum;
        for (b, (mean, var)) in out.stats.iter().enumerate() {
            for (r, v) in st.running_mean[b].iter_mut().zip(mean) {
                *r = m * *r + (1.0 - m) * v;
            }
            for (r, v) in st.running_var[b].iter_mut().zip(var) {
                *r = m * *r + (1.0 - m) * v;
            }
        }
        Ok(out)
    }

    /// Mean loss over `data` in batch-statistics mode, without updating anything.
    pub fn loss_on(&self, data: Samples) -> Result<f64> {
        let st = &self.state;
        let bs = self.options.batch_size.max(1);
        let mut total = 0.0;
        for start in (0..data.len()).step_by(bs) {
            let end = (start + bs).min(data.len());
            let imgs: Vec<&RealTensor> = data.images[start..end].iter().collect();
            let lbls: Vec<&LabelMap> = data.labels[start..end].iter().collect();
            let out = batch_gradients(&st.config, &st.params, st.epsilon, &imgs, &lbls, Relaxation::Sign)?;
            total += out.loss * (end - start) as f64;
        }
        Ok(total / data.len() as f64)
    }

    /// Trains for `epochs` more epochs. Shuffling depends only on `seed` and
    /// the absolute epoch number, so a resumed run matches an uninterrupted
    /// one. `on_epoch` sees each record as it completes.
    pub fn fit(
        &mut self,
        train: Samples,
        val: Option<Samples>,
        epochs: usize,
        seed: u64,
        mut on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<TrainReport> {
        if train.is_empty() {
            return Err(Error::Empty("training set".into()));
        }
        if self.options.batch_size == 0 {
            return Err(Error::InvalidValue("batch size must be at least 1".into()));
        }
        let mut report = TrainReport::default();
        for _ in 0..epochs {
            let started = Instant::now();
            let epoch = self.state.epoch + 1;
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)));
            let lr = self.state.learning_rate;
            let (mut loss, mut correct, mut pixels) = (0.0, 0usize, 0usize);
            for batch in order.chunks(self.options.batch_size) {
                let imgs: Vec<&RealTensor> = batch.iter().map(|&i| &train.images[i]).collect();
                let lbls: Vec<&LabelMap> = batch.iter().map(|&i| &train.labels[i]).collect();
                let out = self.step(&imgs, &lbls)?;
                loss += out.loss * batch.len() as f64;
                correct += out.correct;
                pixels += out.pixels;
            }
            self.state.epoch = epoch;
            self.state.learning_rate *= self.options.lr_decay;
            let val_accuracy = match val {
                Some(v) => {
                    let net = self.state.export()?;
                    Some(evaluate(&net, v.images, v.labels, ForwardMode::PackedFolded)?.pixel_accuracy())
                }
                None => None,
            };
            let record = EpochRecord {
                epoch,
                loss: loss / train.len() as f64,
                train_accuracy: correct as f64 / pixels as f64,
                val_accuracy,
                learning_rate: lr,
                wall_time: started.elapsed(),
            };
            on_epoch(&record);
            report.epochs.push(record);
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textgen::{render_sample, RenderParams};

    fn tiny_data(n: usize) -> (Vec<RealTensor>, Vec<LabelMap>) {
        let params = RenderParams {
            height: 16,
            width: 32,
            max_len: 2,
            noise_sigma: 0.0,
            ..RenderParams::default()
        };
        (0..n as u64)
            .map(|i| {
                let s = render_sample(i, &params).unwrap();
                (s.image.to_tensor(), s.labels)
            })
            .unzip()
    }

    fn tiny_config() -> NetConfig {
        NetConfig::symmetric(16, 32, 27, 8, 8, 2)
    }

    #[test]
    fn latents_stay_clipped_and_runs_are_deterministic() {
        let (imgs, lbls) = tiny_data(6);
        let data = Samples::new(&imgs, &lbls).unwrap();
        let opts = TrainOptions {
            batch_size: 3,
            learning_rate: 0.05,
            ..TrainOptions::default()
        };
        let mut a = Trainer::new(tiny_config(), 1, opts.clone()).unwrap();
        let ra = a.fit(data, Some(data), 3, 9, |_| {}).unwrap();
        assert!(a.state.params.latent.max_abs() <= 1.0);
        let mut b = Trainer::new(tiny_config(), 1, opts).unwrap();
        let rb = b.fit(data, Some(data), 3, 9, |_| {}).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.state, b.state);
        assert_eq!(ra.epochs.len(), 3);
        assert!((ra.epochs[2].learning_rate - 0.05 * 0.81).abs() < 1e-15);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (imgs, lbls) = tiny_data(4);
        let data = Samples::new(&imgs, &lbls).unwrap();
        let opts = TrainOptions {
            batch_size: 2,
            ..TrainOptions::default()
        };
        let mut whole = Trainer::new(tiny_config(), 3, opts.clone()).unwrap();
        let full = whole.fit(data, None, 2, 5, |_| {}).unwrap();
        let mut first = Trainer::new(tiny_config(), 3, opts.clone()).unwrap();
        first.fit(data, None, 1, 5, |_| {}).unwrap();
        let mut second = Trainer::resume(first.state.clone(), opts).unwrap();
        let rest = second.fit(data, None, 1, 5, |_| {}).unwrap();
        assert_eq!(rest.epochs[0].epoch, 2);
        assert_eq!(rest.epochs[0], full.epochs[1]);
        assert_eq!(second.state, whole.state);
    }

    #[test]
    fn export_builds_a_consistent_network() {
        let t = Trainer::new(tiny_config(), 2, TrainOptions::default()).unwrap();
        let net = t.state.export().unwrap();
        assert!(net.thresholds_fresh());
        let l = &t.state.params.latent.layers[0];
        let w = &net.binary_layers()[0].weights()[0];
        assert_eq!(w.bit(0, 0, 0), l.values[0] > 0.0);
    }
}
