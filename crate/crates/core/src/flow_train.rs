//! Flow training: negative log-likelihood on source images minus a
//! margin-clamped likelihood term on strongly augmented source images.
//!
//! ```text
//! L = mean_src[bpd(x)] − mean_aug[min(c, bpd(f_aug(x)))]
//! ```
//!
//! Both terms are in bits per dimension; with [`MarginUnit::ImageNats`] the
//! clamp is applied to the whole-image negative log-likelihood in nats
//! instead, and the clamped value is converted back to bits per dimension.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationSampler;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::image::ImageBatch;
use crate::nn::{accumulate, clip_global_norm, Adam, StepDecay};
use crate::rng::{child_seed, child_seed_idx, rng};
use crate::scalar::Scalar;
use crate::synth::{DomainDataset, Split};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginUnit {
    BitsPerDim,
    ImageNats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    /// Disable to train on the likelihood term alone.
    pub guided: bool,
    pub margin_c: f64,
    pub margin_unit: MarginUnit,
    /// Share of each batch made of guided augmentations.
    pub aug_fraction: f64,
    pub aug_threshold: f64,
    pub aug_max_tries: usize,
    pub augmentation: AugmentationSampler,
    pub clip_norm: f64,
    /// Images per graph; gradients are accumulated across micro-batches.
    pub micro_batch: usize,
    /// Derived from the run seed, never read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FlowTrainConfig {
    fn default() -> Self {
        FlowTrainConfig {
            epochs: 1600,
            lr: 1e-3,
            lr_decay: 0.5,
            decay_period: 200,
            batch_size: 32,
            guided: true,
            margin_c: 1.2,
            margin_unit: MarginUnit::BitsPerDim,
            aug_fraction: 0.25,
            aug_threshold: 0.01,
            aug_max_tries: 50,
            augmentation: AugmentationSampler::default(),
            clip_norm: 100.0,
            micro_batch: 4,
            seed: 0,
        }
    }
}

impl FlowTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("flow training: {m}")));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(self.margin_c > 0.0) {
            return bad("margin_c must be positive");
        }
        if !(self.aug_fraction > 0.0 && self.aug_fraction < 1.0) {
            return bad("aug_fraction must lie in (0, 1)");
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return bad("batch sizes must be positive");
        }
        if !(self.lr_decay > 0.0) {
            return bad("lr_decay must be positive");
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { base: self.lr, factor: self.lr_decay, period: self.decay_period }
    }

    /// Guided augmentations accompanying `n_src` source images.
    pub fn aug_count(&self, n_src: usize) -> usize {
        ((n_src as f64 * self.aug_fraction / (1.0 - self.aug_fraction)).round() as usize).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowEpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub source_bpd: f64,
    pub aug_bpd: Option<f64>,
    pub val_bpd: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct FlowTrainOutcome<T> {
    pub model: FlowModel<T>,
    pub log: Vec<FlowEpochRecord>,
    pub initial_val_bpd: f64,
    /// Bits per dimension of the continuous source validation images: the
    /// target the adaptation stopping rule compares against.
    pub source_bpd_ref: f64,
}

/// Per-sample clamped guiding values in bits per dimension, from per-sample
/// bits per dimension `bpd` of shape `[N, 1, 1, 1]`.
pub fn clamped_margin<T: Scalar>(g: &mut Graph<T>, bpd: Var, c: f64, unit: MarginUnit, dims: usize) -> Var {
    match unit {
        MarginUnit::BitsPerDim => g.min_const(bpd, T::lit(c)),
        MarginUnit::ImageNats => {
            let k = dims as f64 * std::f64::consts::LN_2;
            let nats = g.scale(bpd, T::lit(k));
            let m = g.min_const(nats, T::lit(c));
            g.scale(m, T::lit(1.0 / k))
        }
    }
}

/// Mean bits per dimension of a batch.
pub fn nf_loss<T: Scalar>(model: &FlowModel<T>, batch: &ImageBatch<T>, noise_seed: u64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let bpd = model.bits_per_dim(batch, noise_seed)?;
    Ok(bpd.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / bpd.len() as f64)
}

/// Value of the guided objective for one source batch and one augmented batch.
pub fn guided_loss<T: Scalar>(
    model: &FlowModel<T>,
    source: &ImageBatch<T>,
    augmented: &ImageBatch<T>,
    c: f64,
    unit: MarginUnit,
    noise_seed: u64,
) -> Result<f64> {
    let src = nf_loss(model, source, child_seed(noise_seed, "source"))?;
    let bpd = model.bits_per_dim(augmented, child_seed(noise_seed, "augmented"))?;
    let k = model.dims() as f64 * std::f64::consts::LN_2;
    let clamp = |b: f64| match unit {
        MarginUnit::BitsPerDim => b.min(c),
        MarginUnit::ImageNats => (b * k).min(c) / k,
    };
    let aug = bpd.iter().map(|v| clamp(v.to_f64_lossy())).sum::<f64>() / bpd.len() as f64;
    Ok(src - aug)
}

/// Builds guided augmentations of randomly chosen images of `source`,
/// re-quantized to 256 levels.
fn guided_batch<T: Scalar>(source: &ImageBatch<T>, count: usize, cfg: &FlowTrainConfig, seed: u64) -> Result<ImageBatch<T>> {
    let mut r = rng(seed);
    let cont = source.to_continuous();
    let mut parts = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = r.random_range(0..source.len());
        let (aug, spec) = cfg.augmentation.sample_guided_augmentation(
            &cont.select(&[pick]),
            cfg.aug_threshold,
            cfg.aug_max_tries,
            &mut r,
        )?;
        debug!("guided augmentation {}", spec.record());
        parts.push(aug.quantize().into_tensor());
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    ImageBatch::discrete(Tensor::stack(&refs)?)
}

/// Accumulates gradients of `weight · Σ_i term_i` over micro-batches, where
/// `term_i` is the per-sample bits per dimension, optionally clamped.
/// Returns the summed (unweighted) per-sample values.
#[allow(clippy::too_many_arguments)]
fn accumulate_term<T: Scalar>(
    model: &FlowModel<T>,
    batch: &ImageBatch<T>,
    weight: f64,
    clamp: Option<(f64, MarginUnit)>,
    micro: usize,
    noise_seed: u64,
    batch_index: usize,
    grads: &mut Vec<Tensor<T>>,
) -> Result<(f64, f64)> {
    let mut raw_sum = 0.0;
    let mut term_sum = 0.0;
    let idx: Vec<usize> = (0..batch.len()).collect();
    for (ci, chunk) in idx.chunks(micro).enumerate() {
        let part = batch.select(chunk);
        let noise = model.sample_noise(part.tensor().shape(), child_seed_idx(noise_seed, "micro", ci as u64));
        let mut g = Graph::new();
        let p = model.params().bind(&mut g, true);
        let x = g.input(part.tensor().clone());
        let bpd = model.bpd_graph(&mut g, &p, x, part.is_discrete(), noise.as_ref())?;
        let term = match clamp {
            Some((c, unit)) => clamped_margin(&mut g, bpd, c, unit, model.dims()),
            None => bpd,
        };
        let total = g.sum_all(term);
        let raw = g.value(bpd).sum().to_f64_lossy();
        let value = g.value(total).data()[0].to_f64_lossy();
        if !raw.is_finite() || !value.is_finite() {
            return Err(Error::NonFiniteLoss { what: "flow loss", batch: batch_index });
        }
        raw_sum += raw;
        term_sum += value;
        let scaled = g.scale(total, T::lit(weight));
        let gr = g.backward(scaled);
        accumulate(grads, p.gradients(&g, &gr));
    }
    Ok((raw_sum, term_sum))
}

/// Trains a fresh flow of architecture `arch` on the training split of
/// `data`. With `checkpoint_dir`, the model is saved every decay period and
/// whenever validation bits per dimension improve.
pub fn train_flow<T: Scalar>(
    arch: FlowConfig,
    data: &DomainDataset,
    cfg: &FlowTrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<FlowTrainOutcome<T>> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid(format!("site {} has no training images", data.domain_id)));
    }
    let val_idx = {
        let v = data.indices(Split::Val);
        if v.is_empty() {
            train_idx.clone()
        } else {
            v
        }
    };
    let val = data.batch::<T>(&val_idx);
    let val_seed = child_seed(cfg.seed, "val-noise");

    let mut model = FlowModel::<T>::new(arch, child_seed(cfg.seed, "flow-init"))?;
    let initial_val_bpd = nf_loss(&model, &val, val_seed)?;
    let mut adam = Adam::new(model.params());
    let schedule = cfg.schedule();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best = f64::INFINITY;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng(child_seed_idx(cfg.seed, "order", epoch as u64)));
        let (mut loss_sum, mut src_sum, mut aug_sum, mut n_src_total, mut n_aug_total) = (0.0, 0.0, 0.0, 0, 0);
        let mut norm = 0.0;
        for batch_idx in order.chunks(cfg.batch_size) {
            let source = data.batch::<T>(batch_idx);
            let n_src = source.len();
            let mut grads = Vec::new();
            let (src_bpd, _) = accumulate_term(
                &model,
                &source,
                1.0 / n_src as f64,
                None,
                cfg.micro_batch,
                child_seed_idx(cfg.seed, "noise-src", step as u64),
                step,
                &mut grads,
            )?;
            let mut loss = src_bpd / n_src as f64;
            src_sum += src_bpd;
            n_src_total += n_src;
            if cfg.guided {
                let n_aug = cfg.aug_count(n_src);
                let aug = guided_batch(&source, n_aug, cfg, child_seed_idx(cfg.seed, "aug", step as u64))?;
                let (aug_bpd, clamped) = accumulate_term(
                    &model,
                    &aug,
                    -1.0 / n_aug as f64,
                    Some((cfg.margin_c, cfg.margin_unit)),
                    cfg.micro_batch,
                    child_seed_idx(cfg.seed, "noise-aug", step as u64),
                    step,
                    &mut grads,
                )?;
                loss -= clamped / n_aug as f64;
                aug_sum += aug_bpd;
                n_aug_total += n_aug;
            }
            norm = clip_global_norm(&mut grads, cfg.clip_norm);
            if !norm.is_finite() {
                return Err(Error::NonFiniteLoss { what: "flow gradient", batch: step });
            }
            adam.step(model.params_mut(), &grads, lr);
            loss_sum += loss * n_src as f64;
            step += 1;
        }
        let val_bpd = nf_loss(&model, &val, val_seed)?;
        let rec = FlowEpochRecord {
            epoch,
            train_loss: loss_sum / n_src_total as f64,
            source_bpd: src_sum / n_src_total as f64,
            aug_bpd: (n_aug_total > 0).then(|| aug_sum / n_aug_total as f64),
            val_bpd,
            lr,
            grad_norm: norm,
        };
        info!(
            "flow epoch {} loss {:.4} src {:.4} aug {:?} val {:.4} lr {:.2e}",
            epoch, rec.train_loss, rec.source_bpd, rec.aug_bpd, val_bpd, lr
        );
        if let Some(dir) = checkpoint_dir {
            if val_bpd < best {
                model.save(dir.join("flow_best.json"))?;
            }
            if cfg.decay_period > 0 && (epoch + 1) % cfg.decay_period == 0 {
                model.save(dir.join(format!("flow_epoch{:05}.json", epoch + 1)))?;
            }
        }
        best = best.min(val_bpd);
        log.push(rec);
    }

    let source_bpd_ref = nf_loss(&model, &val.to_continuous(), val_seed)?;
    Ok(FlowTrainOutcome { model, log, initial_val_bpd, source_bpd_ref })
}
