//! Affine coupling layer.
//!
//! With `m` the partition-A indicator, the subnet sees `z ⊙ m` (plus an
//! optional conditioning map) and emits raw scale and shift maps. Both are
//! zeroed on A, the scale is squashed to `amp · tanh(raw)` with a learnable
//! per-channel amplitude `amp = bound · sigmoid(ρ)`, so
//!
//! ```text
//! forward:  y = z ⊙ exp(s) + t,      logdet = Σ s
//! inverse:  z = (y − t) ⊙ exp(−s),   logdet = −Σ s
//! ```
//!
//! and `y` equals `z` on A.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::mask::CouplingMask;
use crate::nn::{Activation, Bound, ParamId, ParamSet, UNet, UNetSpec};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct CouplingLayer {
    mask: CouplingMask,
    net: UNet,
    amp_logit: ParamId,
    scale_bound: f64,
    cond_channels: usize,
    name: String,
}

impl CouplingLayer {
    /// `widths` are the subnet's per-level channel counts. The subnet head is
    /// zero-initialized so a fresh layer is the identity.
    pub fn new<T: Scalar>(
        mask: CouplingMask,
        widths: Vec<usize>,
        cond_channels: usize,
        scale_bound: f64,
        name: &str,
        ps: &mut ParamSet<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        if scale_bound <= 0.0 {
            return Err(Error::invalid("coupling scale bound must be positive"));
        }
        let [c, _, _] = mask.shape();
        let spec = UNetSpec {
            in_channels: c + cond_channels,
            out_channels: 2 * c,
            widths,
            convs_per_level: 1,
            activation: Activation::ConcatElu,
            norm: true,
            zero_head: true,
        };
        let net = UNet::new(spec, &format!("{name}.net"), ps, rng)?;
        // amp starts at 1: bound · sigmoid(ρ) = 1.
        let rho = if scale_bound > 1.0 { (1.0 / (scale_bound - 1.0)).ln() } else { 0.0 };
        let amp_logit = ps.add(format!("{name}.amp"), Tensor::full([1, c, 1, 1], T::lit(rho)));
        Ok(CouplingLayer { mask, net, amp_logit, scale_bound, cond_channels, name: name.to_string() })
    }

    pub fn mask(&self) -> &CouplingMask {
        &self.mask
    }

    pub fn subnet(&self) -> &UNet {
        &self.net
    }

    /// Parameter-name prefix of this layer inside its [`ParamSet`].
    pub fn name(&self) -> &str {
        &self.name
    }

    fn check(&self, shape: [usize; 4], cond: Option<[usize; 4]>) -> Result<()> {
        let [_, c, h, w] = shape;
        if [c, h, w] != self.mask.shape() {
            return Err(Error::invalid(format!(
                "coupling input {:?} does not match mask shape {:?}",
                &shape[1..],
                self.mask.shape()
            )));
        }
        match (cond, self.cond_channels) {
            (None, 0) => Ok(()),
            (Some([n, cc, ch, cw]), k) if k > 0 && cc == k && ch == h && cw == w && n == shape[0] => Ok(()),
            _ => Err(Error::invalid("coupling conditioning input missing or mis-shaped")),
        }
    }

    /// Masked `(s, t)` computed from partition A of `z`.
    pub fn scale_shift<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        self.check(g.shape(z), cond.map(|c| g.shape(c)))?;
        let c = self.mask.shape()[0];
        let m = g.input(self.mask.tensor());
        let mb = g.input(self.mask.complement_tensor());
        let za = g.mul(z, m);
        let inp = match cond {
            Some(cv) => g.concat(za, cv),
            None => za,
        };
        let raw = self.net.forward(g, p, inp)?.out;
        let s_raw = g.slice_channels(raw, 0, c);
        let t_raw = g.slice_channels(raw, c, c);
        let amp = g.sigmoid(p[self.amp_logit]);
        let amp = g.scale(amp, T::lit(self.scale_bound));
        let s = g.tanh(s_raw);
        let s = g.mul(s, amp);
        let s = g.mul(s, mb);
        let t = g.mul(t_raw, mb);
        Ok((s, t))
    }

    /// Data → latent. Returns `(y, logdet)` with `logdet` of shape `[N, 1, 1, 1]`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        z: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (s, t) = self.scale_shift(g, p, z, cond)?;
        let e = g.exp(s);
        let y = g.mul(z, e);
        let y = g.add(y, t);
        let logdet = g.sum_per_sample(s);
        Ok((y, logdet))
    }

    /// Latent → data.
    pub fn inverse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        y: Var,
        cond: Option<Var>,
    ) -> Result<(Var, Var)> {
        let (s, t) = self.scale_shift(g, p, y, cond)?;
        let d = g.sub(y, t);
        let ns = g.neg(s);
        let e = g.exp(ns);
        let z = g.mul(d, e);
        let ld = g.sum_per_sample(s);
        let logdet = g.neg(ld);
        Ok((z, logdet))
    }
}
