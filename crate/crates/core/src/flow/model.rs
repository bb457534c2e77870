//! The composed flow, its architecture description and likelihood evaluation.
//!
//! Direction convention: `forward` maps data to latent (the inverse of the
//! generative map), `inverse` maps latent to data.

use serde::{Deserialize, Serialize};

use std::path::Path;

use crate::autograd::{Graph, Var};
use crate::checkpoint::{architecture_tag, Checkpoint};
use crate::error::{Error, Result};
use crate::flow::coupling::CouplingLayer;
use crate::flow::dequant::{DequantMode, Dequantizer};
use crate::flow::mask::{CouplingMask, MaskKind};
use crate::image::{ImageBatch, LEVELS};
use crate::nn::{Bound, ParamSet};
use crate::rng::{child_seed_idx, rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Coupling subnet widths: `base_width · 2^level`, capped at `max_width`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubnetConfig {
    pub levels: usize,
    pub base_width: usize,
    pub max_width: usize,
}

impl SubnetConfig {
    /// Widths for an `h×w` input; the level count shrinks when the spatial
    /// dims cannot be halved `levels − 1` times.
    pub fn widths_for(&self, h: usize, w: usize) -> Vec<usize> {
        let feasible = (h.trailing_zeros().min(w.trailing_zeros()) + 1) as usize;
        let levels = self.levels.min(feasible).max(1);
        (0..levels).map(|l| (self.base_width << l).min(self.max_width)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DequantConfig {
    pub mode: DequantMode,
    pub layers: usize,
    pub subnet: SubnetConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Apply a factor-2 squeeze before this stage's couplings.
    pub squeeze: bool,
    pub layers: usize,
    pub mask: MaskKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub height: usize,
    pub width: usize,
    pub dequantization: Option<DequantConfig>,
    pub stages: Vec<StageConfig>,
    pub subnet: SubnetConfig,
    /// Upper bound of `|s|` in every coupling layer.
    pub scale_bound: f64,
}

impl FlowConfig {
    /// Four variational-dequantization couplings, four checkerboard
    /// couplings, squeeze, four channel couplings, squeeze, four channel
    /// couplings; subnets of four levels with widths 32/64/128/128.
    pub fn standard(height: usize, width: usize) -> Self {
        let subnet = SubnetConfig { levels: 4, base_width: 32, max_width: 128 };
        FlowConfig {
            height,
            width,
            dequantization: Some(DequantConfig {
                mode: DequantMode::Variational,
                layers: 4,
                subnet: subnet.clone(),
            }),
            stages: vec![
                StageConfig { squeeze: false, layers: 4, mask: MaskKind::Checkerboard },
                StageConfig { squeeze: true, layers: 4, mask: MaskKind::Channel },
                StageConfig { squeeze: true, layers: 4, mask: MaskKind::Channel },
            ],
            subnet,
            scale_bound: 3.0,
        }
    }

    /// Same layout with `layers` couplings per stage and narrow subnets.
    pub fn compact(height: usize, width: usize, layers: usize, levels: usize, base_width: usize) -> Self {
        let mut c = Self::standard(height, width);
        let subnet = SubnetConfig { levels, base_width, max_width: base_width * 4 };
        if let Some(d) = c.dequantization.as_mut() {
            d.layers = layers;
            d.subnet = subnet.clone();
        }
        for s in &mut c.stages {
            s.layers = layers;
        }
        c.subnet = subnet;
        c
    }

    /// No transforms at all: the density is the standard Gaussian.
    pub fn empty(height: usize, width: usize) -> Self {
        FlowConfig {
            height,
            width,
            dequantization: None,
            stages: Vec::new(),
            subnet: SubnetConfig { levels: 1, base_width: 1, max_width: 1 },
            scale_bound: 3.0,
        }
    }

    pub fn squeezes(&self) -> usize {
        self.stages.iter().filter(|s| s.squeeze).count()
    }

    /// Short fingerprint of the architecture, stored in checkpoints.
    pub fn tag(&self) -> String {
        architecture_tag(CHECKPOINT_KIND, self)
    }

    fn validate(&self) -> Result<()> {
        let f = 1usize << self.squeezes();
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(f) || !self.width.is_multiple_of(f) {
            return Err(Error::invalid(format!(
                "{}×{} input is not divisible by {f} ({} squeezes)",
                self.height,
                self.width,
                self.squeezes()
            )));
        }
        if !(self.scale_bound > 0.0) {
            return Err(Error::invalid("scale_bound must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum Transform {
    Dequantize(Dequantizer),
    Coupling(CouplingLayer),
    Squeeze,
}

/// Result of a data → latent pass on a graph.
pub struct FlowPass {
    pub z: Var,
    /// Sum of all transform log-determinants (and the dequantization
    /// correction, for discrete input), shape `[N, 1, 1, 1]`.
    pub logdet: Var,
}

#[derive(Clone, Debug)]
pub struct FlowModel<T> {
    config: FlowConfig,
    transforms: Vec<Transform>,
    params: ParamSet<T>,
}

const INFERENCE_CHUNK: usize = 8;

pub const CHECKPOINT_KIND: &str = "flow";

fn check_finite<T: Scalar>(g: &Graph<T>, vars: &[Var], transform: usize) -> Result<()> {
    if vars.iter().all(|&v| g.value(v).is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteTransform { transform })
    }
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let mut r = rng(seed);
        let mut transforms = Vec::new();
        if let Some(dq) = &config.dequantization {
            let mut layers = Vec::new();
            if dq.mode == DequantMode::Variational {
                let widths = dq.subnet.widths_for(config.height, config.width);
                for i in 0..dq.layers {
                    let mask = CouplingMask::new(MaskKind::Checkerboard, i % 2 == 1, 1, config.height, config.width)?;
                    layers.push(CouplingLayer::new(
                        mask,
                        widths.clone(),
                        1,
                        config.scale_bound,
                        &format!("deq{i}"),
                        &mut ps,
                        &mut r,
                    )?);
                }
            }
            transforms.push(Transform::Dequantize(Dequantizer::new(dq.mode, layers)));
        }
        let (mut c, mut h, mut w) = (1, config.height, config.width);
        for (si, stage) in config.stages.iter().enumerate() {
            if stage.squeeze {
                transforms.push(Transform::Squeeze);
                c *= 4;
                h /= 2;
                w /= 2;
            }
            let widths = config.subnet.widths_for(h, w);
            for li in 0..stage.layers {
                let mask = CouplingMask::new(stage.mask, li % 2 == 1, c, h, w)?;
                transforms.push(Transform::Coupling(CouplingLayer::new(
                    mask,
                    widths.clone(),
                    0,
                    config.scale_bound,
                    &format!("s{si}c{li}"),
                    &mut ps,
                    &mut r,
                )?));
            }
        }
        Ok(FlowModel { config, transforms, params: ps })
    }

    /// Builds a model around externally supplied transforms and parameters
    /// (used by tests to assemble single layers).
    pub fn from_parts(config: FlowConfig, transforms: Vec<Transform>, params: ParamSet<T>) -> Self {
        FlowModel { config, transforms, params }
    }

    pub fn config(&self) -> &FlowConfig {
        &self.config
    }

    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// `|Ω|`.
    pub fn dims(&self) -> usize {
        self.config.height * self.config.width
    }

    pub fn dequantizer(&self) -> Option<&Dequantizer> {
        self.transforms.iter().find_map(|t| match t {
            Transform::Dequantize(d) => Some(d),
            _ => None,
        })
    }

    pub fn cast<U: Scalar>(&self) -> FlowModel<U> {
        FlowModel { config: self.config.clone(), transforms: self.transforms.clone(), params: self.params.cast() }
    }

    fn check_input(&self, shape: [usize; 4]) -> Result<()> {
        if shape[1] != 1 || shape[2] != self.config.height || shape[3] != self.config.width {
            return Err(Error::invalid(format!(
                "flow built for 1×{}×{} images, got {:?}",
                self.config.height,
                self.config.width,
                &shape[1..]
            )));
        }
        Ok(())
    }

    /// Dequantization noise for a discrete batch of `shape`.
    pub fn sample_noise(&self, shape: [usize; 4], seed: u64) -> Option<Tensor<T>> {
        self.dequantizer().map(|d| d.sample_noise(shape, seed))
    }

    /// Data → latent on `g`. `noise` is required for discrete input.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        discrete: bool,
        noise: Option<&Tensor<T>>,
    ) -> Result<FlowPass> {
        let shape = g.shape(x);
        self.check_input(shape)?;
        if discrete && self.dequantizer().is_none() {
            return Err(Error::invalid("discrete input given to a flow without a dequantization transform"));
        }
        let mut cur = x;
        let mut total = g.input(Tensor::zeros([shape[0], 1, 1, 1]));
        for (i, tr) in self.transforms.iter().enumerate() {
            match tr {
                Transform::Dequantize(d) => {
                    if !discrete {
                        continue;
                    }
                    let noise = noise.ok_or_else(|| Error::invalid("discrete input needs dequantization noise"))?;
                    let (xc, corr) = d.dequantize(g, p, cur, noise)?;
                    cur = xc;
                    total = g.add(total, corr);
                }
                Transform::Coupling(layer) => {
                    let (y, ld) = layer.forward(g, p, cur, None)?;
                    cur = y;
                    total = g.add(total, ld);
                }
                Transform::Squeeze => cur = g.space_to_depth(cur),
            }
            check_finite(g, &[cur, total], i)?;
        }
        Ok(FlowPass { z: cur, logdet: total })
    }

    /// Latent → continuous data on `g`; returns `(x, logdet)` of the inverse pass.
    pub fn inverse_graph(&self, g: &mut Graph<T>, p: &Bound, z: Var) -> Result<(Var, Var)> {
        let n = g.shape(z)[0];
        let mut cur = z;
        let mut total = g.input(Tensor::zeros([n, 1, 1, 1]));
        for (i, tr) in self.transforms.iter().enumerate().rev() {
            match tr {
                Transform::Dequantize(_) => {}
                Transform::Coupling(layer) => {
                    let (x, ld) = layer.inverse(g, p, cur, None)?;
                    cur = x;
                    total = g.add(total, ld);
                }
                Transform::Squeeze => cur = g.depth_to_space(cur),
            }
            check_finite(g, &[cur, total], i)?;
        }
        Ok((cur, total))
    }

    /// `log p(x)` per sample (nats) on `g`, shape `[N, 1, 1, 1]`.
    pub fn log_likelihood_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        discrete: bool,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let pass = self.forward_graph(g, p, x, discrete, noise)?;
        let dims = g.value(pass.z).sample_len() as f64;
        let sq = g.square(pass.z);
        let sq = g.sum_per_sample(sq);
        let base = g.scale(sq, T::lit(-0.5));
        let base = g.offset(base, T::lit(-0.5 * dims * (2.0 * std::f64::consts::PI).ln()));
        let ll = g.add(base, pass.logdet);
        check_finite(g, &[ll], self.transforms.len())?;
        Ok(ll)
    }

    /// Bits per dimension on `g`, shape `[N, 1, 1, 1]`. Continuous input is
    /// measured on the 256-level scale so it is comparable with dequantized
    /// discrete input.
    pub fn bpd_graph(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        discrete: bool,
        noise: Option<&Tensor<T>>,
    ) -> Result<Var> {
        let ll = self.log_likelihood_graph(g, p, x, discrete, noise)?;
        let dims = self.dims() as f64;
        let ll = if discrete { ll } else { g.offset(ll, T::lit(-dims * (LEVELS as f64).ln())) };
        Ok(g.scale(ll, T::lit(-1.0 / (std::f64::consts::LN_2 * dims))))
    }

    fn noise_for_chunk(&self, x: &ImageBatch<T>, idx: &[usize], seed: u64, chunk: usize) -> Option<Tensor<T>> {
        if !x.is_discrete() {
            return None;
        }
        let shape = [idx.len(), 1, x.height(), x.width()];
        self.sample_noise(shape, child_seed_idx(seed, "dequant-chunk", chunk as u64))
    }

    fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
        (0..n.div_ceil(INFERENCE_CHUNK))
            .map(move |c| (c * INFERENCE_CHUNK..((c + 1) * INFERENCE_CHUNK).min(n)).collect())
    }

    /// Data → latent without gradients. Returns the latent batch and the
    /// per-sample total log-determinant.
    pub fn forward(&self, x: &ImageBatch<T>, noise_seed: u64) -> Result<(Tensor<T>, Vec<T>)> {
        let mut zs = Vec::new();
        let mut lds = Vec::new();
        for (ci, idx) in Self::chunks(x.len()).enumerate() {
            let part = x.select(&idx);
            let noise = self.noise_for_chunk(x, &idx, noise_seed, ci);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.input(part.tensor().clone());
            let pass = self.forward_graph(&mut g, &p, xv, x.is_discrete(), noise.as_ref())?;
            zs.push(g.value(pass.z).clone());
            lds.extend_from_slice(g.value(pass.logdet).data());
        }
        let refs: Vec<&Tensor<T>> = zs.iter().collect();
        Ok((Tensor::stack(&refs)?, lds))
    }

    /// Latent → continuous data without gradients.
    pub fn inverse(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let zv = g.input(z.clone());
        let (x, _) = self.inverse_graph(&mut g, &p, zv)?;
        Ok(g.value(x).clone())
    }

    /// Per-sample `log p(x)` in nats. Discrete batches are dequantized with
    /// noise derived from `noise_seed`.
    pub fn log_likelihood(&self, x: &ImageBatch<T>, noise_seed: u64) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(x.len());
        for (ci, idx) in Self::chunks(x.len()).enumerate() {
            let part = x.select(&idx);
            let noise = self.noise_for_chunk(x, &idx, noise_seed, ci);
            let mut g = Graph::new();
            let p = self.params.bind(&mut g, false);
            let xv = g.input(part.tensor().clone());
            let ll = self.log_likelihood_graph(&mut g, &p, xv, x.is_discrete(), noise.as_ref())?;
            out.extend_from_slice(g.value(ll).data());
        }
        Ok(out)
    }

    /// Per-sample bits per dimension, on the 256-level scale for both
    /// discrete and continuous input (see [`FlowModel::bpd_graph`]).
    pub fn bits_per_dim(&self, x: &ImageBatch<T>, noise_seed: u64) -> Result<Vec<T>> {
        let dims = x.pixels();
        let shift = if x.is_discrete() { 0.0 } else { dims as f64 * (LEVELS as f64).ln() };
        Ok(self
            .log_likelihood(x, noise_seed)?
            .into_iter()
            .map(|ll| bits_per_dim(ll - T::lit(shift), dims))
            .collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Checkpoint::new(CHECKPOINT_KIND, &self.config, &self.params)?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config: FlowConfig = ck.architecture(CHECKPOINT_KIND)?;
        let mut model = FlowModel::new(config, 0)?;
        ck.restore(&model.config.tag(), &mut model.params)?;
        Ok(model)
    }

    /// Dequantizes a discrete batch: `(x_cont, log_correction)`.
    pub fn dequantize(&self, x: &ImageBatch<T>, noise_seed: u64) -> Result<(ImageBatch<T>, Vec<T>)> {
        if !x.is_discrete() {
            return Err(Error::invalid("dequantize expects a discrete batch"));
        }
        self.check_input(x.tensor().shape())?;
        let d = self.dequantizer().ok_or_else(|| Error::invalid("flow has no dequantization transform"))?;
        let noise = d.sample_noise(x.tensor().shape(), noise_seed);
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let xv = g.input(x.tensor().clone());
        let (xc, corr) = d.dequantize(&mut g, &p, xv, &noise)?;
        Ok((ImageBatch::continuous(g.value(xc).clone())?, g.value(corr).data().to_vec()))
    }
}

/// `−log p · (ln 2 · |Ω|)⁻¹`.
pub fn bits_per_dim<T: Scalar>(log_likelihood: T, dims: usize) -> T {
    -log_likelihood / T::lit(std::f64::consts::LN_2 * dims as f64)
}
