//! Intensity augmentations.
//!
//! A spec is a composition of elementwise remaps applied in order, with a
//! single clip to `[0, 1]` at the end. Contrast raises the clamped-at-zero
//! value to `γ`; the monotone map is piecewise linear over its control
//! points, with input clamped to the knot range.

use rand::seq::index::sample as sample_indices;
use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::Rng;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Contrast,
    Brightness,
    Multiplication,
    MonotoneMap,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 4] = [
        AugmentationKind::Contrast,
        AugmentationKind::Brightness,
        AugmentationKind::Multiplication,
        AugmentationKind::MonotoneMap,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IntensityOp {
    Contrast { gamma: f64 },
    Brightness { shift: f64 },
    Multiplication { factor: f64 },
    MonotoneMap { points: Vec<[f64; 2]> },
}

impl IntensityOp {
    pub fn kind(&self) -> AugmentationKind {
        match self {
            IntensityOp::Contrast { .. } => AugmentationKind::Contrast,
            IntensityOp::Brightness { .. } => AugmentationKind::Brightness,
            IntensityOp::Multiplication { .. } => AugmentationKind::Multiplication,
            IntensityOp::MonotoneMap { .. } => AugmentationKind::MonotoneMap,
        }
    }

    pub fn identity(kind: AugmentationKind) -> Self {
        match kind {
            AugmentationKind::Contrast => IntensityOp::Contrast { gamma: 1.0 },
            AugmentationKind::Brightness => IntensityOp::Brightness { shift: 0.0 },
            AugmentationKind::Multiplication => IntensityOp::Multiplication { factor: 1.0 },
            AugmentationKind::MonotoneMap => IntensityOp::MonotoneMap { points: vec![[0.0, 0.0], [1.0, 1.0]] },
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            IntensityOp::Contrast { gamma } => gamma.is_finite() && *gamma > 0.0,
            IntensityOp::Brightness { shift } => shift.is_finite(),
            IntensityOp::Multiplication { factor } => factor.is_finite(),
            IntensityOp::MonotoneMap { points } => {
                points.len() >= 2
                    && points.iter().all(|p| p[0].is_finite() && p[1].is_finite())
                    && points.windows(2).all(|w| w[1][0] > w[0][0] && w[1][1] > w[0][1])
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid augmentation parameters: {self:?}")))
        }
    }

    fn apply(&self, v: f64) -> f64 {
        match self {
            IntensityOp::Contrast { gamma } => v.max(0.0).powf(*gamma),
            IntensityOp::Brightness { shift } => v + shift,
            IntensityOp::Multiplication { factor } => v * factor,
            IntensityOp::MonotoneMap { points } => {
                let (first, last) = (points[0], points[points.len() - 1]);
                let v = v.clamp(first[0], last[0]);
                let i = points.partition_point(|p| p[0] <= v).clamp(1, points.len() - 1);
                let ([x0, y0], [x1, y1]) = (points[i - 1], points[i]);
                y0 + (y1 - y0) * (v - x0) / (x1 - x0)
            }
        }
    }
}

/// An ordered composition of intensity remaps, with the seed it was drawn
/// from (zero for hand-built specs).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub ops: Vec<IntensityOp>,
    pub seed: u64,
}

impl AugmentationSpec {
    pub fn new(ops: Vec<IntensityOp>) -> Result<Self> {
        let spec = AugmentationSpec { ops, seed: 0 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        self.ops.iter().try_for_each(IntensityOp::validate)
    }

    /// The remap of one `[0, 1]` intensity.
    pub fn apply_value(&self, v: f64) -> f64 {
        self.ops.iter().fold(v, |acc, op| op.apply(acc)).clamp(0.0, 1.0)
    }

    /// One-line record for run logs.
    pub fn record(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }
}

/// Applies `spec` to a continuous batch; the output is continuous and clipped.
pub fn apply_augmentation<T: Scalar>(x: &ImageBatch<T>, spec: &AugmentationSpec) -> Result<ImageBatch<T>> {
    if x.is_discrete() {
        return Err(Error::invalid("augmentations act on continuous [0, 1] images"));
    }
    spec.validate()?;
    let data = x.tensor().map(|v| T::lit(spec.apply_value(v.to_f64_lossy())));
    ImageBatch::continuous(data)
}

pub fn mse<T: Scalar>(a: &ImageBatch<T>, b: &ImageBatch<T>) -> f64 {
    let (a, b) = (a.tensor().data(), b.tensor().data());
    assert_eq!(a.len(), b.len(), "mse of differently sized batches");
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x.to_f64_lossy() - y.to_f64_lossy()).powi(2)).sum();
    s / a.len() as f64
}

/// Parameter ranges and composition depths of the random augmentation family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationSampler {
    pub gamma: [f64; 2],
    pub shift: [f64; 2],
    pub factor: [f64; 2],
    pub monotone_points: usize,
    /// Output jitter of each monotone control point around the diagonal.
    pub monotone_jitter: f64,
    pub kinds: Vec<AugmentationKind>,
    /// Composition depths, drawn uniformly.
    pub depths: Vec<usize>,
}

impl Default for AugmentationSampler {
    fn default() -> Self {
        AugmentationSampler {
            gamma: [0.4, 2.5],
            shift: [-0.3, 0.3],
            factor: [0.5, 1.5],
            monotone_points: 5,
            monotone_jitter: 0.15,
            kinds: AugmentationKind::ALL.to_vec(),
            depths: vec![1, 2, 3],
        }
    }
}

/// Smallest output gap between consecutive monotone control points.
const MONOTONE_MIN_GAP: f64 = 1e-3;

impl AugmentationSampler {
    fn draw_op(&self, kind: AugmentationKind, r: &mut Rng) -> IntensityOp {
        match kind {
            AugmentationKind::Contrast => {
                // Log-uniform, so contraction and expansion are equally likely.
                let (lo, hi) = (self.gamma[0].ln(), self.gamma[1].ln());
                IntensityOp::Contrast { gamma: r.random_range(lo..=hi).exp() }
            }
            AugmentationKind::Brightness => IntensityOp::Brightness { shift: r.random_range(self.shift[0]..=self.shift[1]) },
            AugmentationKind::Multiplication => {
                IntensityOp::Multiplication { factor: r.random_range(self.factor[0]..=self.factor[1]) }
            }
            AugmentationKind::MonotoneMap => {
                let n = self.monotone_points.max(2);
                let xs: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
                let mut ys: Vec<f64> = xs
                    .iter()
                    .map(|&x| (x + r.random_range(-self.monotone_jitter..=self.monotone_jitter)).clamp(0.0, 1.0))
                    .collect();
                ys.sort_by(f64::total_cmp);
                for i in 1..n {
                    ys[i] = ys[i].max(ys[i - 1] + MONOTONE_MIN_GAP);
                }
                IntensityOp::MonotoneMap { points: xs.into_iter().zip(ys).map(|(x, y)| [x, y]).collect() }
            }
        }
    }

    /// Spec drawn entirely from `seed`: a depth, that many distinct kinds in
    /// random order, then their parameters.
    pub fn spec_from_seed(&self, seed: u64) -> AugmentationSpec {
        let mut r = Rng::seed_from_u64(seed);
        let depth = self.depths[r.random_range(0..self.depths.len())].clamp(1, self.kinds.len());
        let kinds: Vec<AugmentationKind> =
            sample_indices(&mut r, self.kinds.len(), depth).into_iter().map(|i| self.kinds[i]).collect();
        let ops = kinds.into_iter().map(|k| self.draw_op(k, &mut r)).collect();
        AugmentationSpec { ops, seed }
    }

    pub fn sample_spec(&self, r: &mut Rng) -> AugmentationSpec {
        self.spec_from_seed(r.random())
    }

    /// Unconstrained draw, used for harmonizer pretraining.
    pub fn sample_pretrain_augmentation<T: Scalar>(
        &self,
        x: &ImageBatch<T>,
        r: &mut Rng,
    ) -> Result<(ImageBatch<T>, AugmentationSpec)> {
        let spec = self.sample_spec(r);
        Ok((apply_augmentation(x, &spec)?, spec))
    }

    /// Rejection sampling until `MSE(x, f_aug(x)) > tau`.
    pub fn sample_guided_augmentation<T: Scalar>(
        &self,
        x: &ImageBatch<T>,
        tau: f64,
        max_tries: usize,
        r: &mut Rng,
    ) -> Result<(ImageBatch<T>, AugmentationSpec)> {
        if !(tau >= 0.0) {
            return Err(Error::invalid(format!("guided threshold must be non-negative, got {tau}")));
        }
        for _ in 0..max_tries {
            let spec = self.sample_spec(r);
            let y = apply_augmentation(x, &spec)?;
            let d = mse(x, &y);
            if d > tau {
                assert!(mse(x, &y) > tau, "accepted augmentation violates the threshold");
                return Ok((y, spec));
            }
        }
        Err(Error::SamplingFailure { threshold: tau, tries: max_tries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn ramp(n: usize) -> ImageBatch<f64> {
        let t = Tensor::from_fn([1, 1, 1, n], |[_, _, _, j]| j as f64 / (n - 1) as f64);
        ImageBatch::continuous(t).unwrap()
    }

    #[test]
    fn identity_parameters_leave_input_unchanged() {
        let x = ramp(33);
        let ops = AugmentationKind::ALL.iter().map(|&k| IntensityOp::identity(k)).collect();
        let y = apply_augmentation(&x, &AugmentationSpec::new(ops).unwrap()).unwrap();
        assert!(y.tensor().max_abs_diff(x.tensor()) < 1e-15);
    }

    #[test]
    fn composition_clips_once_at_the_end() {
        let x = ramp(101);
        let spec = AugmentationSpec::new(vec![
            IntensityOp::Brightness { shift: 0.2 },
            IntensityOp::Multiplication { factor: 0.8 },
        ])
        .unwrap();
        let y = apply_augmentation(&x, &spec).unwrap();
        for (a, b) in x.tensor().data().iter().zip(y.tensor().data()) {
            assert!((b - (0.8 * (a + 0.2)).clamp(0.0, 1.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn non_monotone_points_are_rejected() {
        let bad = IntensityOp::MonotoneMap { points: vec![[0.0, 0.0], [0.5, 0.6], [1.0, 0.5]] };
        assert!(AugmentationSpec::new(vec![bad]).is_err());
        let flat = IntensityOp::MonotoneMap { points: vec![[0.0, 0.2], [0.5, 0.2], [1.0, 1.0]] };
        assert!(AugmentationSpec::new(vec![flat]).is_err());
    }

    #[test]
    fn discrete_input_is_rejected() {
        let x = ImageBatch::<f64>::discrete(Tensor::zeros([1, 1, 2, 2])).unwrap();
        assert!(apply_augmentation(&x, &AugmentationSpec::new(vec![]).unwrap()).is_err());
    }

    #[test]
    fn zero_threshold_accepts_first_non_identity_draw() {
        let x = ramp(64);
        let s = AugmentationSampler::default();
        let mut r1 = rng(5);
        let (_, spec) = s.sample_guided_augmentation(&x, 0.0, 1, &mut r1).unwrap();
        let mut r2 = rng(5);
        assert_eq!(spec, s.sample_spec(&mut r2));
    }

    #[test]
    fn identity_draws_are_rejected() {
        let s = AugmentationSampler { gamma: [1.0, 1.0], kinds: vec![AugmentationKind::Contrast], ..Default::default() };
        let x = ramp(16);
        let err = s.sample_guided_augmentation(&x, 1e-12, 10, &mut rng(1)).unwrap_err();
        assert!(matches!(err, Error::SamplingFailure { tries: 10, .. }));
    }

    #[test]
    fn guided_samples_exceed_threshold() {
        let x = ramp(64);
        let s = AugmentationSampler::default();
        let mut r = rng(9);
        for _ in 0..200 {
            let (y, _) = s.sample_guided_augmentation(&x, 0.01, 50, &mut r).unwrap();
            assert!(mse(&x, &y) > 0.01);
        }
    }

    /// Acceptance rate of single-kind draws at τ = 0.01, by Monte Carlo over
    /// the sampler and by exhaustive enumeration of a fine parameter grid.
    #[test]
    fn acceptance_rate_matches_grid_enumeration() {
        let x = ramp(64);
        let kinds = vec![AugmentationKind::Contrast, AugmentationKind::Brightness, AugmentationKind::Multiplication];
        let s = AugmentationSampler { kinds: kinds.clone(), depths: vec![1], ..Default::default() };
        let tau = 0.01;
        let draws = 10_000;
        let mut r = rng(17);
        let accepted = (0..draws)
            .filter(|_| {
                let spec = s.sample_spec(&mut r);
                mse(&x, &apply_augmentation(&x, &spec).unwrap()) > tau
            })
            .count();
        let mc = accepted as f64 / draws as f64;

        let grid = 20_000;
        let frac = |make: &dyn Fn(f64) -> IntensityOp| {
            let ok = (0..grid)
                .filter(|&i| {
                    let u = (i as f64 + 0.5) / grid as f64;
                    let spec = AugmentationSpec::new(vec![make(u)]).unwrap();
                    mse(&x, &apply_augmentation(&x, &spec).unwrap()) > tau
                })
                .count();
            ok as f64 / grid as f64
        };
        let (g0, g1) = (s.gamma[0].ln(), s.gamma[1].ln());
        let oracle = (frac(&|u| IntensityOp::Contrast { gamma: (g0 + u * (g1 - g0)).exp() })
            + frac(&|u| IntensityOp::Brightness { shift: s.shift[0] + u * (s.shift[1] - s.shift[0]) })
            + frac(&|u| IntensityOp::Multiplication { factor: s.factor[0] + u * (s.factor[1] - s.factor[0]) }))
            / 3.0;
        let se = (oracle * (1.0 - oracle) / draws as f64).sqrt();
        assert!((mc - oracle).abs() < 4.0 * se, "monte carlo {mc} vs grid {oracle}");
    }

    #[test]
    fn pretrain_mean_shift_takes_both_signs() {
        let x = ramp(64);
        let s = AugmentationSampler::default();
        let mut r = rng(23);
        let (mut neg, mut pos) = (0, 0);
        for _ in 0..10_000 {
            let (y, _) = s.sample_pretrain_augmentation(&x, &mut r).unwrap();
            let shift = y.tensor().sum() - x.tensor().sum();
            if shift < 0.0 {
                neg += 1;
            } else if shift > 0.0 {
                pos += 1;
            }
        }
        assert!(neg > 1000 && pos > 1000, "negative {neg}, positive {pos}");
    }

    #[test]
    fn record_round_trips() {
        let spec = AugmentationSampler::default().spec_from_seed(77);
        let back: AugmentationSpec = serde_json::from_str(&spec.record()).unwrap();
        assert_eq!(back, spec);
    }

    proptest! {
        #[test]
        fn sampled_maps_preserve_order_and_range(seed: u64, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let s = AugmentationSampler { kinds: vec![AugmentationKind::MonotoneMap], depths: vec![1], ..Default::default() };
            let spec = s.spec_from_seed(seed);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (ylo, yhi) = (spec.apply_value(lo), spec.apply_value(hi));
            prop_assert!(ylo <= yhi);
            prop_assert!((0.0..=1.0).contains(&ylo) && (0.0..=1.0).contains(&yhi));
        }

        #[test]
        fn any_spec_is_deterministic_and_bounded(seed: u64, v in 0.0f64..1.0) {
            let s = AugmentationSampler::default();
            let spec = s.spec_from_seed(seed);
            prop_assert_eq!(&spec, &s.spec_from_seed(seed));
            let y = spec.apply_value(v);
            prop_assert!((0.0..=1.0).contains(&y));
        }

        #[test]
        fn augmentation_commutes_with_pixel_permutation(seed: u64, vals in proptest::collection::vec(0.0f64..1.0, 8)) {
            let spec = AugmentationSampler::default().spec_from_seed(seed);
            let x = ImageBatch::continuous(Tensor::from_vec([1, 1, 2, 4], vals.clone()).unwrap()).unwrap();
            let mut rev = vals.clone();
            rev.reverse();
            let xr = ImageBatch::continuous(Tensor::from_vec([1, 1, 2, 4], rev).unwrap()).unwrap();
            let y = apply_augmentation(&x, &spec).unwrap();
            let mut yr = apply_augmentation(&xr, &spec).unwrap().into_tensor().into_vec();
            yr.reverse();
            prop_assert_eq!(y.tensor().data(), &yr[..]);
        }
    }
}
