//! Unsupervised same-image training: both branches receive one image and the
//! network learns to reconstruct it.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{total_loss, total_loss_grad, LossWeights};
use crate::math;
use crate::model::{AblationFlags, FusionNet, NetworkConfig};
use crate::params::Gradients;
use crate::tensor::{Dims4, FeatureMap, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub crop_size: usize,
    pub lambda_1: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip_norm: f64,
    pub ablation: AblationFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_final: 1e-8,
            batch_size: 16,
            epochs: 8,
            crop_size: 256,
            lambda_1: 10.0,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            adam_eps: 1e-8,
            grad_clip_norm: 1.0,
            ablation: AblationFlags::FULL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr_init.is_finite() && self.lr_final.is_finite()) || self.lr_final < 0.0 || self.lr_final > self.lr_init {
            return bad("learning rates must satisfy 0 <= lr_final <= lr_init");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.crop_size == 0 {
            return bad("batch_size, epochs and crop_size must be at least 1");
        }
        if !(self.lambda_1.is_finite() && self.lambda_1 >= 0.0) {
            return bad("lambda_1 must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.adam_eps <= 0.0 || self.grad_clip_norm < 0.0 {
            return bad("weight_decay, adam_eps and grad_clip_norm must be non-negative (adam_eps positive)");
        }
        Ok(())
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { lambda_1: self.lambda_1 }
    }

    /// Number of optimizer steps `fit` performs on a corpus of `n` images.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * n.div_ceil(self.batch_size)
    }
}

/// Cosine-annealed learning rate from `lr_init` at step 0 to `lr_final` at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_init;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    let c = 0.5 * (1.0 + math::cos(core::f64::consts::PI * progress));
    // convex combination keeps both endpoints exact
    cfg.lr_init * c + cfg.lr_final * (1.0 - c)
}

/// Independent random streams derived from one seed.
#[derive(Debug, Clone)]
pub struct SeedStreams {
    /// Parameter initialization.
    pub init: ChaCha8Rng,
    /// Shuffling, cropping, flipping and batch padding.
    pub data: ChaCha8Rng,
}

pub fn seed_all(seed: u64) -> SeedStreams {
    let init = ChaCha8Rng::seed_from_u64(seed);
    let mut data = ChaCha8Rng::seed_from_u64(seed);
    data.set_stream(1);
    SeedStreams { init, data }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(model: &FusionNet, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .entries()
            .iter()
            .map(|e| alloc::vec![0.0; e.tensor.len()])
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(&mut self, model: &mut FusionNet, grads: &Gradients, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        let params = model.params_mut();
        for ((id, m), v) in params.ids().collect::<Vec<_>>().into_iter().zip(&mut self.m).zip(&mut self.v) {
            let g = grads.get(id);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * (1.0 - lr * self.weight_decay) - lr * m_hat / (math::sqrt(v_hat) + self.eps);
            }
        }
    }
}

/// What one training step fed to the network; passed to step observers.
#[derive(Debug)]
pub struct StepView<'a> {
    pub branch_1: &'a FeatureMap,
    pub branch_2: &'a FeatureMap,
    pub target: &'a FeatureMap,
}

fn sample_loss_and_grads(model: &FusionNet, image: &FeatureMap, weights: LossWeights) -> Result<(f64, Gradients)> {
    let (out, trace) = model.forward_traced(image, image)?;
    let (loss, grad_out) = total_loss_grad(&out, image, weights)?;
    let mut grads = Gradients::zeros_like(model.params());
    model.backward(&trace, &grad_out, &mut grads);
    Ok((loss, grads))
}

/// Mean same-image loss over the batch and the matching parameter gradient.
/// Samples are processed independently (in parallel with `std`) and reduced
/// in batch order, so the result does not depend on scheduling.
pub fn batch_loss_and_grads(model: &FusionNet, batch: &FeatureMap, weights: LossWeights) -> Result<(f64, Gradients)> {
    let n = batch.dims().batch;
    let samples: Vec<FeatureMap> = (0..n).map(|b| batch.split_sample(b)).collect();
    #[cfg(feature = "std")]
    let parts: Vec<Result<(f64, Gradients)>> = {
        use rayon::prelude::*;
        samples.par_iter().map(|s| sample_loss_and_grads(model, s, weights)).collect()
    };
    #[cfg(not(feature = "std"))]
    let parts: Vec<Result<(f64, Gradients)>> = samples.iter().map(|s| sample_loss_and_grads(model, s, weights)).collect();

    let mut loss = 0.0;
    let mut grads = Gradients::zeros_like(model.params());
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.add_assign(&g);
    }
    let inv = 1.0 / n as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Mean same-image loss of `model` over `images`, without gradients.
pub fn validation_loss(model: &FusionNet, images: &[FeatureMap], weights: LossWeights) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut sum = 0.0;
    for img in images {
        let out = model.fuse(img, img)?;
        sum += total_loss(&out, img, weights)?;
    }
    Ok(sum / images.len() as f64)
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossRecord {
    /// 1-based step number.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// A named parameter array.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Trained parameters with the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    /// Rebuilds the model; every stored array must match the layout implied
    /// by the configuration.
    pub fn restore(&self) -> Result<FusionNet> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = FusionNet::new(self.network.clone(), self.train.ablation, self.train.seed)?;
        if model.params().len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                model.params().len(),
                self.params.len()
            )));
        }
        for arr in &self.params {
            let id = model
                .params()
                .find(&arr.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", arr.name)))?;
            if model.params().get(id).shape() != arr.shape.as_slice() {
                return Err(Error::Checkpoint(format!("shape mismatch for `{}`", arr.name)));
            }
            *model.params_mut().get_mut(id) = Tensor::from_vec(&arr.shape, arr.data.clone())?;
        }
        Ok(model)
    }
}

/// Random `size x size` crop (after upscaling images that are too small)
/// with a random horizontal flip.
fn augment<R: Rng + ?Sized>(image: &FeatureMap, size: usize, rng: &mut R) -> FeatureMap {
    let d = image.dims();
    let resized;
    let src = if d.height < size || d.width < size {
        let scale = size as f64 / d.height.min(d.width) as f64;
        let h = (math::ceil(d.height as f64 * scale) as usize).max(size);
        let w = (math::ceil(d.width as f64 * scale) as usize).max(size);
        resized = resize_bilinear(image, h, w);
        &resized
    } else {
        image
    };
    let d = src.dims();
    let y0 = rng.random_range(0..=d.height - size);
    let x0 = rng.random_range(0..=d.width - size);
    let flip = rng.random::<bool>();
    FeatureMap::from_fn(Dims4::new(1, 1, size, size), |_, _, y, x| {
        let sx = if flip { size - 1 - x } else { x };
        src.at(0, 0, y0 + y, x0 + sx)
    })
}

/// Bilinear resampling of a single-channel map (pixel-centre aligned).
pub fn resize_bilinear(image: &FeatureMap, height: usize, width: usize) -> FeatureMap {
    let d = image.dims();
    let sy = d.height as f64 / height as f64;
    let sx = d.width as f64 / width as f64;
    FeatureMap::from_fn(Dims4::new(d.batch, d.channels, height, width), |b, c, y, x| {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (d.height - 1) as f64);
        let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (d.width - 1) as f64);
        let (y0, x0) = (math::floor(fy) as usize, math::floor(fx) as usize);
        let (y1, x1) = ((y0 + 1).min(d.height - 1), (x0 + 1).min(d.width - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = image.at(b, c, y0, x0) * (1.0 - tx) + image.at(b, c, y0, x1) * tx;
        let bottom = image.at(b, c, y1, x0) * (1.0 - tx) + image.at(b, c, y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

/// Owns the model, optimizer and data stream of one training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    model: FusionNet,
    cfg: TrainConfig,
    optimizer: AdamW,
    data_rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(network: NetworkConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut streams = seed_all(cfg.seed);
        let model = FusionNet::with_rng(network, cfg.ablation, &mut streams.init)?;
        let optimizer = AdamW::new(&model, &cfg);
        Ok(Self {
            model,
            cfg,
            optimizer,
            data_rng: streams.data,
            step: 0,
        })
    }

    pub fn model(&self) -> &FusionNet {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut FusionNet {
        &mut self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One optimizer step on `batch` (`[B, 1, H, W]` in `[-1, 1]`); returns
    /// the batch loss measured before the update.
    pub fn train_step(&mut self, batch: &FeatureMap, lr: f64) -> Result<f64> {
        self.train_step_observed(batch, lr, &mut |_| {})
    }

    pub fn train_step_observed(&mut self, batch: &FeatureMap, lr: f64, observer: &mut dyn FnMut(&StepView<'_>)) -> Result<f64> {
        // the same tensor is both branch inputs and the reconstruction target
        observer(&StepView {
            branch_1: batch,
            branch_2: batch,
            target: batch,
        });
        let (loss, mut grads) = batch_loss_and_grads(&self.model, batch, self.cfg.loss_weights())?;
        if !loss.is_finite() {
            let name = grads
                .first_non_finite()
                .map_or_else(|| "<none: loss only>".to_string(), |id| self.model.params().name(id).to_string());
            return Err(Error::Diverged(name));
        }
        if self.cfg.grad_clip_norm > 0.0 {
            let norm = grads.global_norm();
            let coef = self.cfg.grad_clip_norm / (norm + 1e-6);
            if coef < 1.0 {
                grads.scale(coef);
            }
        }
        self.optimizer.apply(&mut self.model, &grads, lr);
        self.step += 1;
        Ok(loss)
    }

    /// Runs `epochs x ceil(N / batch_size)` steps over `corpus`. Each epoch
    /// visits a fresh permutation; a short final batch is topped up with
    /// randomly resampled images.
    pub fn fit(&mut self, corpus: &[FeatureMap], on_step: &mut dyn FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        for img in corpus {
            let d = img.dims();
            if d.batch != 1 || d.channels != 1 {
                return Err(Error::Config(format!("corpus images must be [1, 1, H, W], got {d:?}")));
            }
        }
        let total = self.cfg.total_steps(corpus.len());
        let batch = self.cfg.batch_size;
        let mut log = Vec::with_capacity(total);
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        let mut done = 0;
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.data_rng);
            for chunk in order.chunks(batch) {
                let mut picks = chunk.to_vec();
                while picks.len() < batch {
                    picks.push(self.data_rng.random_range(0..corpus.len()));
                }
                let crops: Vec<FeatureMap> = picks
                    .iter()
                    .map(|&i| augment(&corpus[i], self.cfg.crop_size, &mut self.data_rng))
                    .collect();
                let stacked = FeatureMap::stack(&crops)?;
                let lr = lr_at(done, total, &self.cfg);
                let loss = self.train_step(&stacked, lr)?;
                done += 1;
                let rec = LossRecord { step: done, lr, loss };
                on_step(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            network: self.model.config().clone(),
            train: self.cfg.clone(),
            step: self.step,
            params: self
                .model
                .params()
                .entries()
                .iter()
                .map(|e| NamedArray {
                    name: e.name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    data: e.tensor.data().to_vec(),
                })
                .collect(),
        }
    }
}

/// Exponential moving average of a loss trace (`smoothed[0] = trace[0]`).
pub fn smooth(trace: &[f64], beta: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, &v) in trace.iter().enumerate() {
        acc = if i == 0 { v } else { beta * acc + (1.0 - beta) * v };
        out.push(acc);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tiny_net() -> NetworkConfig {
        NetworkConfig {
            encoder_channels: 4,
            encoder_dilations: vec![1, 2, 1],
            embed_dim: 8,
            num_heads: 2,
            window_size: 4,
            ..NetworkConfig::default()
        }
    }

    fn tiny_train(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 1,
            crop_size: 12,
            seed,
            ..TrainConfig::default()
        }
    }

    fn corpus(n: usize, size: usize) -> Vec<FeatureMap> {
        (0..n)
            .map(|k| {
                FeatureMap::from_fn(Dims4::new(1, 1, size, size), |_, _, y, x| {
                    libm::sin((x as f64) * 0.4 + k as f64) * libm::cos((y as f64) * 0.3) * 0.8
                })
            })
            .collect()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 100, &cfg), 1e-4);
        assert_eq!(lr_at(100, 100, &cfg), 1e-8);
        assert!((lr_at(50, 100, &cfg) - 5.0005e-5).abs() < 1e-9);
        assert_eq!(lr_at(3, 0, &cfg), 1e-4);
    }

    #[test]
    fn validation_rejects_bad_values() {
        let cfg = TrainConfig {
            lr_final: 1.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut t = Trainer::new(tiny_net(), tiny_train(1)).unwrap();
        let before = t.model().params().clone();
        let batch = FeatureMap::stack(&corpus(2, 12)).unwrap();
        let loss = t.train_step(&batch, 0.0).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        assert_eq!(t.model().params(), &before);
    }

    #[test]
    fn observer_sees_identical_branches_and_target() {
        let mut t = Trainer::new(tiny_net(), tiny_train(1)).unwrap();
        let batch = FeatureMap::stack(&corpus(2, 12)).unwrap();
        let mut seen = 0;
        t.train_step_observed(&batch, 1e-4, &mut |v| {
            assert_eq!(v.branch_1, v.target);
            assert_eq!(v.branch_2, v.target);
            seen += 1;
        })
        .unwrap();
        assert_eq!(seen, 1);
    }

    #[test]
    fn seeds_control_initialization() {
        let a = Trainer::new(tiny_net(), tiny_train(5)).unwrap();
        let b = Trainer::new(tiny_net(), tiny_train(5)).unwrap();
        let c = Trainer::new(tiny_net(), tiny_train(6)).unwrap();
        assert_eq!(a.model().params(), b.model().params());
        assert_ne!(a.model().params(), c.model().params());
        assert_eq!(a.checkpoint().seed(), 5);
    }

    #[test]
    fn small_corpus_pads_the_batch() {
        let cfg = TrainConfig {
            batch_size: 4,
            epochs: 2,
            ..tiny_train(2)
        };
        let mut t = Trainer::new(tiny_net(), cfg).unwrap();
        let mut shapes = Vec::new();
        let images = corpus(3, 12);
        let log = t
            .fit(&images, &mut |r| shapes.push(r.step))
            .unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(shapes, vec![1, 2]);
    }

    #[test]
    fn undersized_images_are_upscaled_for_cropping() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = corpus(1, 8).remove(0);
        let crop = augment(&img, 12, &mut rng);
        assert_eq!(crop.dims(), Dims4::new(1, 1, 12, 12));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let mut t = Trainer::new(tiny_net(), tiny_train(0)).unwrap();
        assert!(matches!(t.fit(&[], &mut |_| {}), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn checkpoint_restores_identical_model() {
        let mut t = Trainer::new(tiny_net(), tiny_train(3)).unwrap();
        let images = corpus(2, 12);
        t.fit(&images, &mut |_| {}).unwrap();
        let restored = t.checkpoint().restore().unwrap();
        assert_eq!(restored.params(), t.model().params());
        let w = LossWeights::default();
        assert_eq!(
            validation_loss(&restored, &images, w).unwrap().to_bits(),
            validation_loss(t.model(), &images, w).unwrap().to_bits()
        );
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0], 0.5), vec![1.0, 2.0]);
    }
}
