//! Configurable U-shaped convolutional network.
//!
//! Each level runs `convs_per_level` pre-activation blocks
//! (activation → 3×3 convolution → optional instance normalization), levels
//! are separated by 2×2 average pooling, the decoder upsamples by nearest
//! neighbour and concatenates the matching encoder features. A 1×1 head maps
//! the top decoder features to `out_channels`.

use serde::{Deserialize, Serialize};

use super::{Bound, ParamId, ParamSet};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// `concat(ELU(x), ELU(−x))`; doubles the channel count.
    ConcatElu,
    Elu,
}

impl Activation {
    fn multiplier(self) -> usize {
        match self {
            Activation::ConcatElu => 2,
            Activation::Elu => 1,
        }
    }

    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::ConcatElu => g.concat_elu(x),
            Activation::Elu => g.elu(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width per level, top to bottom.
    pub widths: Vec<usize>,
    pub convs_per_level: usize,
    pub activation: Activation,
    pub norm: bool,
    /// Zero-initialize the output head.
    pub zero_head: bool,
}

impl UNetSpec {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Spatial dims must survive `levels − 1` halvings.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let f = 1usize << (self.levels().saturating_sub(1));
        if !h.is_multiple_of(f) || !w.is_multiple_of(f) || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "{}-level U-Net needs spatial dims divisible by {f}, got {h}×{w}",
                self.levels()
            )));
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) || self.convs_per_level == 0 {
            return Err(Error::invalid(format!("degenerate U-Net spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
    norm: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct UNet {
    spec: UNetSpec,
    encoder: Vec<Vec<Block>>,
    decoder: Vec<Vec<Block>>,
    head: (ParamId, ParamId),
}

pub struct UNetOutput {
    pub out: Var,
    /// Deepest encoder features.
    pub bottleneck: Var,
}

fn conv_params<T: Scalar>(
    ps: &mut ParamSet<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero: bool,
    rng: &mut Rng,
) -> (ParamId, ParamId) {
    let fan_in = cin * k * k;
    let w = if zero {
        ps.add(format!("{name}.w"), Tensor::zeros([cout, cin, k, k]))
    } else {
        ps.add_normal(format!("{name}.w"), [cout, cin, k, k], (1.0 / fan_in as f64).sqrt(), rng)
    };
    let b = ps.add(format!("{name}.b"), Tensor::zeros([1, cout, 1, 1]));
    (w, b)
}

impl UNet {
    /// Registers all parameters under `prefix` in `ps`.
    pub fn new<T: Scalar>(spec: UNetSpec, prefix: &str, ps: &mut ParamSet<T>, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mult = spec.activation.multiplier();
        let block = |ps: &mut ParamSet<T>, name: String, cin: usize, cout: usize, rng: &mut Rng| {
            let (w, b) = conv_params(ps, &name, cin * mult, cout, 3, false, rng);
            let norm = spec.norm.then(|| {
                let g = ps.add(format!("{name}.gamma"), Tensor::full([1, cout, 1, 1], T::one()));
                let be = ps.add(format!("{name}.beta"), Tensor::zeros([1, cout, 1, 1]));
                (g, be)
            });
            Block { w, b, norm }
        };
        let levels = spec.levels();
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let mut blocks = Vec::new();
            for j in 0..spec.convs_per_level {
                let cin = if j > 0 {
                    spec.widths[l]
                } else if l == 0 {
                    spec.in_channels
                } else {
                    spec.widths[l - 1]
                };
                blocks.push(block(ps, format!("{prefix}.enc{l}.{j}"), cin, spec.widths[l], rng));
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::with_capacity(levels.saturating_sub(1));
        for l in (0..levels.saturating_sub(1)).rev() {
            let mut blocks = Vec::new();
            for j in 0..spec.convs_per_level {
                let cin = if j == 0 { spec.widths[l + 1] + spec.widths[l] } else { spec.widths[l] };
                blocks.push(block(ps, format!("{prefix}.dec{l}.{j}"), cin, spec.widths[l], rng));
            }
            decoder.push(blocks);
        }
        let head =
            conv_params(ps, &format!("{prefix}.head"), spec.widths[0] * mult, spec.out_channels, 1, spec.zero_head, rng);
        Ok(UNet { spec, encoder, decoder, head })
    }

    pub fn spec(&self) -> &UNetSpec {
        &self.spec
    }

    fn run_block<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, blk: &Block, x: Var) -> Var {
        let a = self.spec.activation.apply(g, x);
        let y = g.conv2d(a, p[blk.w], Some(p[blk.b]), 1);
        match blk.norm {
            Some((gamma, beta)) => g.instance_norm(y, p[gamma], p[beta]),
            None => y,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<UNetOutput> {
        let [_, c, h, w] = g.shape(x);
        if c != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "U-Net expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        self.spec.check_input(h, w)?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x;
        for (l, blocks) in self.encoder.iter().enumerate() {
            if l > 0 {
                cur = g.avg_pool2(cur);
            }
            for blk in blocks {
                cur = self.run_block(g, p, blk, cur);
            }
            skips.push(cur);
        }
        let bottleneck = cur;
        let levels = self.encoder.len();
        for (i, blocks) in self.decoder.iter().enumerate() {
            let l = levels - 2 - i;
            let up = g.upsample2(cur);
            cur = g.concat(up, skips[l]);
            for blk in blocks {
                cur = self.run_block(g, p, blk, cur);
            }
        }
        let a = self.spec.activation.apply(g, cur);
        let out = g.conv2d(a, p[self.head.0], Some(p[self.head.1]), 0);
        Ok(UNetOutput { out, bottleneck })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn spec(levels: usize) -> UNetSpec {
        UNetSpec {
            in_channels: 1,
            out_channels: 3,
            widths: (0..levels).map(|l| 4 << l).collect(),
            convs_per_level: 2,
            activation: Activation::ConcatElu,
            norm: true,
            zero_head: false,
        }
    }

    #[test]
    fn output_preserves_resolution() {
        let mut ps = ParamSet::<f32>::new();
        let net = UNet::new(spec(3), "u", &mut ps, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.input(Tensor::full([2, 1, 8, 12], 0.3));
        let out = net.forward(&mut g, &p, x).unwrap();
        assert_eq!(g.shape(out.out), [2, 3, 8, 12]);
        assert_eq!(g.shape(out.bottleneck), [2, 16, 2, 3]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut ps = ParamSet::<f32>::new();
        let net = UNet::new(spec(3), "u", &mut ps, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.input(Tensor::zeros([1, 1, 6, 8]));
        assert!(net.forward(&mut g, &p, x).is_err());
    }

    #[test]
    fn zero_head_outputs_zero() {
        let mut s = spec(2);
        s.zero_head = true;
        let mut ps = ParamSet::<f64>::new();
        let net = UNet::new(s, "u", &mut ps, &mut rng(1)).unwrap();
        let mut g = Graph::new();
        let p = ps.bind(&mut g, false);
        let x = g.input(Tensor::full([1, 1, 4, 4], 0.7));
        let out = net.forward(&mut g, &p, x).unwrap();
        assert!(g.value(out.out).data().iter().all(|&v| v == 0.0));
    }
}
