//! Source-trained segmentation U-Net and per-image scoring.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{dice, modified_hausdorff, prediction_entropy, LabelMask};
use crate::autograd::{softmax_channels, Graph};
use crate::checkpoint::{architecture_tag, Checkpoint};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::nn::{accumulate, clip_global_norm, Activation, Adam, ParamSet, StepDecay, UNet, UNetSpec};
use crate::rng::{child_seed, child_seed_idx, rng};
use crate::scalar::Scalar;
use crate::synth::{DomainDataset, Split};
use crate::tensor::Tensor;

pub const CHECKPOINT_KIND: &str = "segmenter";

const INFERENCE_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterConfig {
    pub classes: usize,
    pub widths: Vec<usize>,
    pub convs_per_level: usize,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        SegmenterConfig { classes: 6, widths: vec![16, 32, 64, 128], convs_per_level: 2 }
    }
}

impl SegmenterConfig {
    fn unet(&self) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            out_channels: self.classes,
            widths: self.widths.clone(),
            convs_per_level: self.convs_per_level,
            activation: Activation::Elu,
            norm: false,
            zero_head: false,
        }
    }

    pub fn tag(&self) -> String {
        architecture_tag(CHECKPOINT_KIND, self)
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter<T> {
    config: SegmenterConfig,
    unet: UNet,
    params: ParamSet<T>,
}

impl<T: Scalar> Segmenter<T> {
    pub fn new(config: SegmenterConfig, seed: u64) -> Result<Self> {
        if config.classes < 2 {
            return Err(Error::invalid("a segmenter needs at least two classes"));
        }
        let mut params = ParamSet::new();
        let unet = UNet::new(config.unet(), "s", &mut params, &mut rng(seed))?;
        Ok(Segmenter { config, unet, params })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    fn input(x: &ImageBatch<T>) -> ImageBatch<T> {
        if x.is_discrete() {
            x.to_continuous()
        } else {
            x.clone()
        }
    }

    /// Class probabilities `[N, K, H, W]`. Discrete input is mapped to level
    /// centres first.
    pub fn predict_probs(&self, x: &ImageBatch<T>) -> Result<Tensor<T>> {
        let x = Self::input(x);
        self.unet.spec().check_input(x.height(), x.width())?;
        let idx: Vec<usize> = (0..x.len()).collect();
        let mut parts = Vec::new();
        for chunk in idx.chunks(INFERENCE_CHUNK) {
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.input(x.tensor().select(chunk));
            let out = self.unet.forward(&mut g, &p, xv)?;
            parts.push(softmax_channels(g.value(out.out)));
        }
        Tensor::stack(&parts.iter().collect::<Vec<_>>())
    }

    pub fn segment(&self, x: &ImageBatch<T>) -> Result<Vec<LabelMask>> {
        let probs = self.predict_probs(x)?;
        Ok(argmax_masks(&probs, x.height(), x.width()))
    }

    /// Mean per-pixel prediction entropy (nats) over the batch.
    pub fn mean_entropy(&self, x: &ImageBatch<T>) -> Result<f64> {
        let probs = self.predict_probs(x)?;
        let k = self.classes();
        let total: f64 = (0..x.len())
            .map(|s| {
                let p: Vec<f64> = probs.sample(s).iter().map(|v| v.to_f64_lossy()).collect();
                prediction_entropy(&p, k)
            })
            .sum();
        Ok(total / x.len() as f64)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: SegmenterConfig = ck.architecture(CHECKPOINT_KIND)?;
        let mut net = Segmenter::new(config, 0)?;
        ck.restore(&net.config.tag(), &mut net.params)?;
        Ok(net)
    }
}

fn argmax_masks<T: Scalar>(probs: &Tensor<T>, h: usize, w: usize) -> Vec<LabelMask> {
    let [n, k, _, _] = probs.shape();
    let plane = h * w;
    (0..n)
        .map(|s| {
            let p = probs.sample(s);
            let data = (0..plane)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if p[c * plane + i] > p[best * plane + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMask::new(h, w, k, data).expect("argmax labels are in range")
        })
        .collect()
}

/// Scores of one predicted mask against its ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    /// Dice per foreground class, in `[0, 1]`.
    pub class_dice: Vec<f64>,
    /// Mean foreground Dice in percent.
    pub dsc: f64,
    /// Modified Hausdorff averaged over foreground classes present in the
    /// ground truth, in pixels.
    pub hd: f64,
}

/// Class 0 is background and excluded from both means.
pub fn score_mask(pred: &LabelMask, gt: &LabelMask) -> Result<ImageScore> {
    let k = gt.classes();
    let mut class_dice = Vec::with_capacity(k.saturating_sub(1));
    let mut hd_sum = 0.0;
    let mut hd_n = 0;
    for c in 1..k as u8 {
        class_dice.push(dice(pred, gt, c)?);
        if gt.count(c) > 0 {
            hd_sum += modified_hausdorff(pred, gt, c)?;
            hd_n += 1;
        }
    }
    let dsc = 100.0 * class_dice.iter().sum::<f64>() / class_dice.len().max(1) as f64;
    let hd = if hd_n > 0 { hd_sum / hd_n as f64 } else { 0.0 };
    Ok(ImageScore { class_dice, dsc, hd })
}

pub fn score_masks(pred: &[LabelMask], gt: &[LabelMask]) -> Result<Vec<ImageScore>> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("{} predictions for {} ground-truth masks", pred.len(), gt.len())));
    }
    pred.iter().zip(gt).map(|(p, g)| score_mask(p, g)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmenterTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_period: usize,
    pub batch_size: usize,
    pub micro_batch: usize,
    pub clip_norm: f64,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SegmenterTrainConfig {
    fn default() -> Self {
        SegmenterTrainConfig {
            epochs: 60,
            lr: 2e-3,
            lr_decay: 0.5,
            decay_period: 30,
            batch_size: 2,
            micro_batch: 2,
            clip_norm: 100.0,
            seed: 0,
        }
    }
}

impl SegmenterTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr_decay > 0.0) {
            return Err(Error::invalid("segmenter training: lr and lr_decay must be positive"));
        }
        if self.batch_size == 0 || self.micro_batch == 0 {
            return Err(Error::invalid("segmenter training: batch sizes must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay { base: self.lr, factor: self.lr_decay, period: self.decay_period }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmenterEpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

pub struct SegmenterTrainOutcome<T> {
    pub net: Segmenter<T>,
    pub log: Vec<SegmenterEpochRecord>,
    /// Mean Dice (%) on the validation split (training split if empty).
    pub val_dsc: f64,
}

/// Mean DSC (%) and HD of `net` on `images` against `masks`.
pub fn evaluate_segmenter<T: Scalar>(net: &Segmenter<T>, images: &ImageBatch<T>, masks: &[LabelMask]) -> Result<(f64, f64)> {
    let scores = score_masks(&net.segment(images)?, masks)?;
    let n = scores.len().max(1) as f64;
    Ok((scores.iter().map(|s| s.dsc).sum::<f64>() / n, scores.iter().map(|s| s.hd).sum::<f64>() / n))
}

/// Trains a segmenter on the source training split with pixelwise
/// cross-entropy.
pub fn train_segmenter<T: Scalar>(
    config: SegmenterConfig,
    data: &DomainDataset,
    cfg: &SegmenterTrainConfig,
) -> Result<SegmenterTrainOutcome<T>> {
    cfg.validate()?;
    if data.masks.len() != data.len() {
        return Err(Error::invalid(format!("site {} has {} masks for {} images", data.domain_id, data.masks.len(), data.len())));
    }
    if config.classes != data.classes {
        return Err(Error::invalid(format!("segmenter has {} classes, site {} has {}", config.classes, data.domain_id, data.classes)));
    }
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid(format!("site {} has no training images", data.domain_id)));
    }
    let mut net = Segmenter::<T>::new(config, child_seed(cfg.seed, "segmenter-init"))?;
    let mut adam = Adam::new(net.params());
    let schedule = cfg.schedule();
    let plane = data.height * data.width;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = schedule.lr(epoch);
        let mut order = train_idx.clone();
        order.shuffle(&mut rng(child_seed_idx(cfg.seed, "order", epoch as u64)));
        let mut loss_sum = 0.0;
        for (b, batch_idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Vec::new();
            for chunk in batch_idx.chunks(cfg.micro_batch) {
                let x = data.batch::<T>(chunk).to_continuous();
                let labels: Vec<usize> =
                    chunk.iter().flat_map(|&i| data.masks[i].data().iter().map(|&v| usize::from(v))).collect();
                debug_assert_eq!(labels.len(), chunk.len() * plane);
                let mut g = Graph::new();
                let p = net.params.bind(&mut g, true);
                let xv = g.input(x.into_tensor());
                let out = net.unet.forward(&mut g, &p, xv)?;
                let ce = g.softmax_cross_entropy(out.out, &labels);
                let value = g.value(ce).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { what: "segmentation loss", batch: b });
                }
                loss_sum += value * chunk.len() as f64;
                let weighted = g.scale(ce, T::lit(chunk.len() as f64 / batch_idx.len() as f64));
                let gr = g.backward(weighted);
                accumulate(&mut grads, p.gradients(&g, &gr));
            }
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut net.params, &grads, lr);
        }
        let rec = SegmenterEpochRecord { epoch, loss: loss_sum / train_idx.len() as f64, lr };
        info!("segmenter epoch {} loss {:.4} lr {:.2e}", epoch, rec.loss, lr);
        log.push(rec);
    }
    let mut val_idx = data.indices(Split::Val);
    if val_idx.is_empty() {
        val_idx = train_idx;
    }
    let masks: Vec<LabelMask> = val_idx.iter().map(|&i| data.masks[i].clone()).collect();
    let (val_dsc, _) = evaluate_segmenter(&net, &data.batch::<T>(&val_idx), &masks)?;
    info!("segmenter validation DSC {:.2}", val_dsc);
    Ok(SegmenterTrainOutcome { net, log, val_dsc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_sites, PhantomSpec, SiteConfig};

    fn small(classes: usize) -> SegmenterConfig {
        SegmenterConfig { classes, widths: vec![8, 16], convs_per_level: 1 }
    }

    fn site(n: usize, classes: usize) -> DomainDataset {
        let cfg = SiteConfig {
            images_per_site: n,
            phantom: PhantomSpec { height: 16, width: 16, classes, ..Default::default() },
            ..Default::default()
        };
        build_sites(5, &cfg).unwrap().remove(0)
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let net = Segmenter::<f64>::new(small(4), 1).unwrap();
        let x = ImageBatch::continuous(Tensor::from_fn([2, 1, 8, 8], |[s, _, i, j]| (s + i * j) as f64 / 50.0)).unwrap();
        let p = net.predict_probs(&x).unwrap();
        assert_eq!(p.shape(), [2, 4, 8, 8]);
        for s in 0..2 {
            for i in 0..64 {
                let sum: f64 = (0..4).map(|c| p.sample(s)[c * 64 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn untrained_output_is_near_uniform() {
        let s = site(6, 6);
        let cfg = SegmenterTrainConfig { epochs: 0, ..Default::default() };
        let out = train_segmenter::<f32>(SegmenterConfig::default(), &s, &cfg).unwrap();
        let h = out.net.mean_entropy(&s.split_batch(Split::Val)).unwrap();
        let ln_k = 6f64.ln();
        assert!(h > 0.8 * ln_k && h <= ln_k + 1e-6, "entropy {h} vs ln K {ln_k}");
    }

    #[test]
    fn score_of_perfect_prediction() {
        let s = site(4, 6);
        let sc = score_mask(&s.masks[0], &s.masks[0]).unwrap();
        assert_eq!(sc.dsc, 100.0);
        assert_eq!(sc.hd, 0.0);
        assert_eq!(sc.class_dice.len(), 5);
    }

    #[test]
    fn hd_skips_classes_absent_from_ground_truth() {
        let gt = LabelMask::new(4, 4, 3, vec![0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]).unwrap();
        let mut pd = gt.data().to_vec();
        pd[0] = 2;
        let pred = LabelMask::new(4, 4, 3, pd).unwrap();
        let sc = score_mask(&pred, &gt).unwrap();
        assert_eq!(sc.hd, 0.0);
        assert_eq!(sc.class_dice, vec![1.0, 0.0]);
        assert_eq!(sc.dsc, 50.0);
    }

    #[test]
    fn missing_masks_are_rejected() {
        let mut s = site(4, 6);
        s.masks.clear();
        let r = train_segmenter::<f32>(SegmenterConfig::default(), &s, &SegmenterTrainConfig::default());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let s = site(10, 3);
        let cfg = SegmenterTrainConfig { epochs: 40, batch_size: 6, seed: 4, ..Default::default() };
        let a = train_segmenter::<f32>(small(3), &s, &cfg).unwrap();
        let b = train_segmenter::<f32>(small(3), &s, &cfg).unwrap();
        assert_eq!(a.net.params(), b.net.params());
        assert_eq!(a.val_dsc, b.val_dsc);
        assert!(a.log.last().unwrap().loss < a.log[0].loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.json");
        let net = Segmenter::<f32>::new(small(3), 9).unwrap();
        net.save(&path).unwrap();
        assert_eq!(Segmenter::<f32>::load(&path).unwrap().params(), net.params());
    }
}
