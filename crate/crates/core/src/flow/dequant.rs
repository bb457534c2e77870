//! Dequantization of 256-level images.
//!
//! Noise `q ∈ (0, 1)` is added to each level and the result is rescaled by
//! `1/256`. In variational mode `q` is produced by a conditional flow:
//! `ε ~ N(0, I)` passes through checkerboard coupling layers conditioned on
//! the image, then a logistic map. The returned log-correction is
//! `−|Ω|·ln 256 − log q(noise | x)`, so that adding it to the continuous
//! log-density yields a lower bound on the discrete log-probability.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::flow::coupling::CouplingLayer;
use crate::image::LEVELS;
use crate::rng::rng;
use crate::scalar::Scalar;
use crate::nn::Bound;
use crate::tensor::{Shape, Tensor};

/// Uniform noise is drawn from `(UNIFORM_MARGIN, 1 − UNIFORM_MARGIN)` so the
/// rescaled image stays strictly inside `(0, 1)` in single precision.
pub const UNIFORM_MARGIN: f64 = 1e-4;

/// Pre-logistic noise is clamped to this magnitude for the same reason.
pub const LOGIT_CLAMP: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequantMode {
    Uniform,
    Variational,
}

#[derive(Clone, Debug)]
pub struct Dequantizer {
    mode: DequantMode,
    layers: Vec<CouplingLayer>,
}

impl Dequantizer {
    pub fn new(mode: DequantMode, layers: Vec<CouplingLayer>) -> Self {
        let layers = if mode == DequantMode::Uniform { Vec::new() } else { layers };
        Dequantizer { mode, layers }
    }

    pub fn mode(&self) -> DequantMode {
        self.mode
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    /// Base noise for one call: standard normal (variational) or uniform.
    pub fn sample_noise<T: Scalar>(&self, shape: Shape, seed: u64) -> Tensor<T> {
        let mut r = rng(seed);
        match self.mode {
            DequantMode::Variational => Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut r);
                T::lit(z)
            }),
            DequantMode::Uniform => Tensor::from_fn(shape, |_| {
                T::lit(UNIFORM_MARGIN + (1.0 - 2.0 * UNIFORM_MARGIN) * r.random::<f64>())
            }),
        }
    }

    /// `(x_cont, log_correction)` for integer levels `x`.
    pub fn dequantize<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        noise: &Tensor<T>,
    ) -> Result<(Var, Var)> {
        let [n, c, h, w] = g.shape(x);
        let dims = (c * h * w) as f64;
        let scale_logdet = -dims * (LEVELS as f64).ln();
        let (q, log_q) = match self.mode {
            DequantMode::Uniform => {
                let q = g.input(noise.clone());
                let log_q = g.input(Tensor::zeros([n, 1, 1, 1]));
                (q, log_q)
            }
            DequantMode::Variational => {
                let cond = g.scale(x, T::lit(2.0 / (LEVELS - 1) as f64));
                let cond = g.offset(cond, -T::one());
                let eps = g.input(noise.clone());
                let half_log_2pi = T::lit(0.5 * (2.0 * std::f64::consts::PI).ln() * dims);
                let sq = g.square(eps);
                let sq = g.sum_per_sample(sq);
                let base = g.scale(sq, T::lit(-0.5));
                let mut log_q = g.offset(base, -half_log_2pi);
                let mut v = eps;
                for layer in &self.layers {
                    let (nv, ld) = layer.forward(g, p, v, Some(cond))?;
                    v = nv;
                    log_q = g.sub(log_q, ld);
                }
                let v = g.clamp(v, T::lit(-LOGIT_CLAMP), T::lit(LOGIT_CLAMP));
                let q = g.sigmoid(v);
                // dq/dv = σ(v)·σ(−v)
                let ls_pos = g.log_sigmoid(v);
                let nv = g.neg(v);
                let ls_neg = g.log_sigmoid(nv);
                let ljac = g.add(ls_pos, ls_neg);
                let ljac = g.sum_per_sample(ljac);
                let log_q = g.sub(log_q, ljac);
                (q, log_q)
            }
        };
        let shifted = g.add(x, q);
        let x_cont = g.scale(shifted, T::lit(1.0 / LEVELS as f64));
        let neg = g.neg(log_q);
        let corr = g.offset(neg, T::lit(scale_logdet));
        Ok((x_cont, corr))
    }
}
