//! Harmonizer network `h(x) = α·x + β`: a shallow U-Net whose bottleneck
//! yields one scalar `α` per image (global average pooling and a linear
//! unit) and whose top decoder level yields a bias map `β`.
//!
//! Both heads start at the identity (`α = 1`, `β = 0`).

use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{AugmentationSampler, AugmentationSpec};
use crate::autograd::{Graph, Var};
use crate::checkpoint::{architecture_tag, Checkpoint};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::{accumulate, clip_global_norm, Activation, Adam, Bound, ParamId, ParamSet, StepDecay, UNet, UNetSpec};
use crate::rng::{child_seed, child_seed_idx, rng};
use crate::scalar::Scalar;
use crate::synth::{DomainDataset, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "harmonizer";

const INFERENCE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizerConfig {
    pub widths: Vec<usize>,
    pub convs_per_level: usize,
}

impl Default for HarmonizerConfig {
    fn default() -> Self {
        HarmonizerConfig { widths: vec![16, 32, 48, 64, 64], convs_per_level: 2 }
    }
}

impl HarmonizerConfig {
    fn unet(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            out_channels: 1,
            widths: self.widths.clone(),
            convs_per_level: self.convs_per_level,
            activation: Activation::ConcatElu,
            norm: false,
            zero_head: true,
        }
    }

    pub fn tag(&self) -> String {
        architecture_tag(CHECKPOINT_KIND, self)
    }
}

/// Graph outputs of one harmonizer pass.
pub struct HarmonizerPass {
    pub y: Var,
    /// `[N, 1, 1, 1]`.
    pub alpha: Var,
    /// `[N, 1, H, W]`.
    pub beta: Var,
}

/// Harmonized batch with the per-image readouts that produced it.
pub struct Harmonized<T> {
    pub images: ImageBatch<T>,
    pub alpha: Vec<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct Harmonizer<T> {
    config: HarmonizerConfig,
    unet: UNet,
    alpha_head: (ParamId, ParamId),
    params: ParamSet<T>,
}

/// `α·x + β` with `α` broadcast per sample.
pub fn apply_affine<T: Scalar>(x: &Tensor<T>, alpha: &[T], beta: &Tensor<T>) -> Tensor<T> {
    assert_eq!(x.shape(), beta.shape(), "bias map must match the input");
    let mut out = beta.clone();
    let plane = x.sample_len();
    for (s, &a) in alpha.iter().enumerate() {
        for (o, &v) in out.data_mut()[s * plane..(s + 1) * plane].iter_mut().zip(x.sample(s)) {
            *o = a * v + *o;
        }
    }
    out
}

impl<T: Scalar> Harmonizer<T> {
    pub fn new(config: HarmonizerConfig, seed: u64) -> Result<Self> {
        let spec = config.unet();
        let mut params = ParamSet::new();
        let mut r = rng(seed);
        let unet = UNet::new(spec, "h", &mut params, &mut r)?;
        let deepest = *config.widths.last().expect("validated widths");
        let w = params.add("h.alpha.w", Tensor::zeros([1, deepest, 1, 1]));
        let b = params.add("h.alpha.b", Tensor::full([1, 1, 1, 1], T::one()));
        Ok(Harmonizer { config, unet, alpha_head: (w, b), params })
    }

    pub fn config(&self) -> &HarmonizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Harmonizer<U> {
        Harmonizer {
            config: self.config.clone(),
            unet: self.unet.clone(),
            alpha_head: self.alpha_head,
            params: self.params.cast(),
        }
    }

    /// Spatial dims must be divisible by `2^(levels − 1)`.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        self.unet.spec().check_input(h, w)
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<HarmonizerPass> {
        let out = self.unet.forward(g, p, x)?;
        let pooled = g.global_avg_pool(out.bottleneck);
        let alpha = g.conv2d(pooled, p[self.alpha_head.0], Some(p[self.alpha_head.1]), 0);
        let beta = out.out;
        let ax = g.mul(x, alpha);
        let y = g.add(ax, beta);
        Ok(HarmonizerPass { y, alpha, beta })
    }

    /// Harmonizes a continuous batch. Outputs are not clipped.
    pub fn harmonize(&self, x: &ImageBatch<T>) -> Result<Harmonized<T>> {
        if x.is_discrete() {
            return Err(Error::invalid("harmonize expects a continuous batch"));
        }
        self.check_input(x.height(), x.width())?;
        let mut alpha = Vec::with_capacity(x.len());
        let mut betas = Vec::new();
        let idx: Vec<usize> = (0..x.len()).collect();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.input(x.tensor().select(chunk));
            let pass = self.forward_graph(&mut g, &p, xv)?;
            alpha.extend_from_slice(g.value(pass.alpha).data());
            betas.push(g.value(pass.beta).clone());
        }
        if let Some(a) = alpha.iter().find(|a| **a <= T::zero()) {
            warn!("harmonizer produced non-positive alpha {a}");
        }
        let refs: Vec<&Tensor<T>> = betas.iter().collect();
        let beta = Tensor::stack(&refs)?;
        let y = apply_affine(x.tensor(), &alpha, &beta);
        Ok(Harmonized { images: ImageBatch::continuous(y)?, alpha, beta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: HarmonizerConfig = ck.architecture(CHECKPOINT_KIND)?;
        let mut net = Harmonizer::new(config, 0)?;
        ck.restore(&net.config.tag(), &mut net.params)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarmonizerTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub clip_norm: f64,
    pub augmentation: AugmentationSampler,
    /// Fixed augmentations drawn per held-out image.
    pub eval_augmentations: usize,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HarmonizerTrainConfig {
    fn default() -> Self {
        HarmonizerTrainConfig {
            epochs: 200,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_period: 30,
            batch_size: 32,
            micro_batch: 8,
            clip_norm: 100.0,
            augmentation: AugmentationSampler::default(),
            eval_augmentations: 4,
            seed: 0,
        }
    }
}

impl HarmonizerTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid("harmonizer training: lr and lr_decay must be positive"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 || self.eval_augmentations == 0 {
            return Err(Error::invalid("harmonizer training: batch sizes and eval_augmentations must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { base: self.lr, factor: self.lr_decay, period: self.decay_period }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarmonizerEpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub lr: f64,
}

pub struct HarmonizerTrainOutcome<T> {
    pub net: Harmonizer<T>,
    pub log: Vec<HarmonizerEpochRecord>,
    /// `MSE(f_aug(x), x)` on the held-out augmentations.
    pub identity_mse: f64,
    /// `MSE(h(f_aug(x)), x)` on the same set after training.
    pub heldout_mse: f64,
}

/// Augmented inputs paired with their clean targets.
struct Pairs<T> {
    input: ImageBatch<T>,
    target: ImageBatch<T>,
    specs: Vec<AugmentationSpec>,
}

fn augment_pairs<T: Scalar>(
    clean: &ImageBatch<T>,
    copies: usize,
    sampler: &AugmentationSampler,
    seed: u64,
) -> Result<Pairs<T>> {
    let mut r = rng(seed);
    let mut inputs = Vec::with_capacity(clean.len() * copies);
    let mut targets = Vec::with_capacity(clean.len() * copies);
    let mut specs = Vec::with_capacity(clean.len() * copies);
    for i in 0..clean.len() {
        let x = clean.select(&[i]);
        for _ in 0..copies {
            let (y, spec) = sampler.sample_pretrain_augmentation(&x, &mut r)?;
            inputs.push(y.into_tensor());
            targets.push(x.tensor().clone());
            specs.push(spec);
        }
    }
    let stack = |v: &[Tensor<T>]| Tensor::stack(&v.iter().collect::<Vec<_>>());
    Ok(Pairs {
        input: ImageBatch::continuous(stack(&inputs)?)?,
        target: ImageBatch::continuous(stack(&targets)?)?,
        specs,
    })
}

/// Mean squared reconstruction error of `net` on `(input, target)` pairs.
pub fn reconstruction_mse<T: Scalar>(net: &Harmonizer<T>, input: &ImageBatch<T>, target: &ImageBatch<T>) -> Result<f64> {
    let y = net.harmonize(input)?;
    Ok(crate::augment::mse(&y.images, target))
}

/// Pretrains a fresh harmonizer to undo random intensity augmentations of
/// the source training images. Held-out error is measured on fixed
/// augmentations of the validation split.
pub fn pretrain_harmonizer<T: Scalar>(
    config: HarmonizerConfig,
    data: &DomainDataset,
    cfg: &HarmonizerTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<HarmonizerTrainOutcome<T>> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid(format!("site {} has no training images", data.domain_id)));
    }
    let mut val_idx = data.indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    let mut net = Harmonizer::<T>::new(config, child_seed(cfg.seed, "harmonizer-init"))?;
    net.check_input(data.height, data.width)?;
    let held = augment_pairs(
        &data.batch::<T>(&val_idx).to_continuous(),
        cfg.eval_augmentations,
        &cfg.augmentation,
        child_seed(cfg.seed, "heldout-aug"),
    )?;
    let identity_mse = crate::augment::mse(&held.input, &held.target);
    let mut adam = Adam::new(net.params());
    let schedule = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng(child_seed_idx(cfg.seed, "order", epoch as u64)));
        let mut sq_sum = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let clean = data.batch::<T>(batch_idx).to_continuous();
            let pairs = augment_pairs(&clean, 1, &cfg.augmentation, child_seed_idx(cfg.seed, "aug", step as u64))?;
            let n = pairs.input.len();
            let mut grads = Vec::new();
            let all: Vec<usize> = (0..n).collect();
            for chunk in all.chunks(cfg.micro_batch) {
                let mut g = Graph::new();
                let p = net.params().bind(&mut g, true);
                let x = g.input(pairs.input.tensor().select(chunk));
                let t = g.input(pairs.target.tensor().select(chunk));
                let pass = net.forward_graph(&mut g, &p, x)?;
                let d = g.sub(pass.y, t);
                let sq = g.square(d);
                let mean = g.mean_all(sq);
                let value = g.value(mean).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { what: "harmonizer loss", batch: step });
                }
                sq_sum += value * chunk.len() as f64;
                let weighted = g.scale(mean, T::lit(chunk.len() as f64 / n as f64));
                let gr = g.backward(weighted);
                accumulate(&mut grads, p.gradients(&g, &gr));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(net.params_mut(), &grads, lr);
            step += 1;
        }
        let val_mse = reconstruction_mse(&net, &held.input, &held.target)?;
        let rec = HarmonizerEpochRecord { epoch, train_mse: sq_sum / train_idx.len() as f64, val_mse, lr };
        info!("harmonizer epoch {} train {:.5} val {:.5} lr {:.2e}", epoch, rec.train_mse, val_mse, lr);
        log.push(rec);
        if let Some(dir) = checkpoint_dir {
            if cfg.decay_period > 0 && (epoch + 1) % cfg.decay_period == 0 {
                net.save(dir.join(format!("harmonizer_epoch{:05}.json", epoch + 1)))?;
            }
        }
    }
    let heldout_mse = reconstruction_mse(&net, &held.input, &held.target)?;
    info!(
        "harmonizer held-out mse {:.5} (identity {:.5}) over {} augmentations",
        heldout_mse,
        identity_mse,
        held.specs.len()
    );
    Ok(HarmonizerTrainOutcome { net, log, identity_mse, heldout_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentationKind;
    use crate::synth::{build_sites, PhantomSpec, SiteConfig};

    fn small() -> HarmonizerConfig {
        HarmonizerConfig { widths: vec![4, 4, 6], convs_per_level: 1 }
    }

    fn ramp(n: usize, h: usize, w: usize) -> ImageBatch<f64> {
        let t = Tensor::from_fn([n, 1, h, w], |[s, _, i, j]| ((s + i * w + j) % 97) as f64 / 97.0);
        ImageBatch::continuous(t).unwrap()
    }

    fn sites(n: usize) -> Vec<DomainDataset> {
        let cfg = SiteConfig {
            images_per_site: n,
            phantom: PhantomSpec { height: 16, width: 16, ..Default::default() },
            ..Default::default()
        };
        build_sites(3, &cfg).unwrap()
    }

    #[test]
    fn initialization_is_identity() {
        let net = Harmonizer::<f64>::new(small(), 1).unwrap();
        let x = ramp(3, 8, 8);
        let out = net.harmonize(&x).unwrap();
        assert_eq!(out.images, x);
        assert!(out.alpha.iter().all(|&a| a == 1.0));
        assert!(out.beta.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_input_returns_beta() {
        let mut net = Harmonizer::<f64>::new(small(), 1).unwrap();
        net.params_mut().jitter(0.3, &mut rng(4));
        let x = ImageBatch::continuous(Tensor::zeros([2, 1, 8, 8])).unwrap();
        let out = net.harmonize(&x).unwrap();
        assert_eq!(out.images.tensor(), &out.beta);
    }

    #[test]
    fn output_is_affine_in_input_for_fixed_readouts() {
        let mut net = Harmonizer::<f64>::new(small(), 2).unwrap();
        net.params_mut().jitter(0.2, &mut rng(5));
        let x = ramp(2, 8, 8);
        let out = net.harmonize(&x).unwrap();
        assert_eq!(out.images.tensor(), &apply_affine(x.tensor(), &out.alpha, &out.beta));
        let eps = 1e-6;
        let mut bumped = x.tensor().clone();
        bumped.data_mut()[0] += eps;
        bumped.data_mut()[64 + 17] += eps;
        let moved = apply_affine(&bumped, &out.alpha, &out.beta);
        let d0 = (moved.data()[0] - out.images.tensor().data()[0]) / eps;
        let d1 = (moved.data()[64 + 17] - out.images.tensor().data()[64 + 17]) / eps;
        assert!((d0 - out.alpha[0]).abs() < 1e-8, "{d0} vs {}", out.alpha[0]);
        assert!((d1 - out.alpha[1]).abs() < 1e-8, "{d1} vs {}", out.alpha[1]);
        assert_eq!(moved.data()[1], out.images.tensor().data()[1]);
    }

    #[test]
    fn resolution_is_preserved_and_divisibility_enforced() {
        let net = Harmonizer::<f32>::new(HarmonizerConfig::default(), 0).unwrap();
        let x = ImageBatch::continuous(Tensor::full([1, 1, 32, 16], 0.4f32)).unwrap();
        let out = net.harmonize(&x).unwrap();
        assert_eq!(out.images.tensor().shape(), [1, 1, 32, 16]);
        let bad = ImageBatch::continuous(Tensor::full([1, 1, 24, 16], 0.4f32)).unwrap();
        assert!(matches!(net.harmonize(&bad), Err(Error::InvalidArgument(_))));
        let disc = ImageBatch::discrete(Tensor::full([1, 1, 16, 16], 3.0f32)).unwrap();
        assert!(net.harmonize(&disc).is_err());
    }

    #[test]
    fn identity_augmentation_keeps_identity() {
        let s = sites(6);
        let cfg = HarmonizerTrainConfig {
            epochs: 3,
            batch_size: 4,
            augmentation: AugmentationSampler {
                shift: [0.0, 0.0],
                kinds: vec![AugmentationKind::Brightness],
                depths: vec![1],
                ..Default::default()
            },
            ..Default::default()
        };
        let out = pretrain_harmonizer::<f64>(small(), &s[0], &cfg, None).unwrap();
        assert_eq!(out.identity_mse, 0.0);
        assert!(out.heldout_mse < 1e-20, "{}", out.heldout_mse);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let s = sites(6);
        let cfg = HarmonizerTrainConfig { epochs: 0, seed: 8, ..Default::default() };
        let out = pretrain_harmonizer::<f32>(small(), &s[0], &cfg, None).unwrap();
        let fresh = Harmonizer::<f32>::new(small(), child_seed(8, "harmonizer-init")).unwrap();
        assert_eq!(out.net.params(), fresh.params());
        assert!(out.log.is_empty());
    }

    #[test]
    fn empty_training_split_is_rejected() {
        let mut s = sites(6).remove(0);
        s.splits.iter_mut().for_each(|sp| *sp = Split::Test);
        let r = pretrain_harmonizer::<f32>(small(), &s, &HarmonizerTrainConfig::default(), None);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn pretraining_beats_identity() {
        let s = sites(10);
        let cfg = HarmonizerTrainConfig {
            epochs: 60,
            lr: 3e-3,
            batch_size: 6,
            decay_period: 40,
            augmentation: AugmentationSampler {
                kinds: vec![AugmentationKind::Brightness, AugmentationKind::Multiplication],
                depths: vec![1],
                ..Default::default()
            },
            seed: 2,
            ..Default::default()
        };
        let out = pretrain_harmonizer::<f32>(small(), &s[0], &cfg, None).unwrap();
        assert!(out.heldout_mse < out.identity_mse, "{} vs {}", out.heldout_mse, out.identity_mse);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.json");
        let mut net = Harmonizer::<f32>::new(small(), 3).unwrap();
        net.params_mut().jitter(0.1, &mut rng(1));
        net.save(&path).unwrap();
        let back = Harmonizer::<f32>::load(&path).unwrap();
        assert_eq!(back.params(), net.params());
        assert!(matches!(crate::flow::FlowModel::<f32>::load(&path), Err(Error::ArchitectureMismatch { .. })));
    }
}
