//! Batched single-channel images and the 256-level quantization helpers.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const LEVELS: usize = 256;

/// Continuous value at the centre of quantization cell `k`.
#[inline]
pub fn level_center(k: u8) -> f64 {
    (f64::from(k) + 0.5) / LEVELS as f64
}

/// Maps a `[0, 1]`-scaled intensity to its 256-level cell.
#[inline]
pub fn quantize_value(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (v * LEVELS as f64).floor().clamp(0.0, (LEVELS - 1) as f64) as u8
}

/// `N×1×H×W` images. Discrete batches hold integer levels in `[0, 255]`,
/// continuous batches hold `[0, 1]`-scaled intensities (not enforced, since
/// harmonizer outputs may leave the unit interval).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    data: Tensor<T>,
    discrete: bool,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Tensor<T>, discrete: bool) -> Result<Self> {
        let shape = data.shape();
        if shape[1] != 1 {
            return Err(Error::invalid(format!("images must have one channel, got shape {shape:?}")));
        }
        if !data.is_finite() {
            return Err(Error::invalid("image batch contains non-finite values"));
        }
        if discrete {
            let max = T::lit((LEVELS - 1) as f64);
            if let Some(v) = data.data().iter().find(|&&v| v.fract() != T::zero() || v < T::zero() || v > max) {
                return Err(Error::invalid(format!("discrete image holds non-level value {v}")));
            }
        }
        Ok(ImageBatch { data, discrete })
    }

    pub fn continuous(data: Tensor<T>) -> Result<Self> {
        Self::new(data, false)
    }

    pub fn discrete(data: Tensor<T>) -> Result<Self> {
        Self::new(data, true)
    }

    /// Builds a discrete batch from 8-bit images of size `h×w`.
    pub fn from_levels(images: &[&[u8]], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.len() != h * w {
                return Err(Error::invalid(format!("image of {} pixels is not {h}×{w}", img.len())));
            }
            data.extend(img.iter().map(|&v| T::lit(f64::from(v))));
        }
        Self::discrete(Tensor::from_vec([images.len(), 1, h, w], data)?)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.data
    }

    pub fn is_discrete(&self) -> bool {
        self.discrete
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    /// `|Ω|`, pixels per image.
    pub fn pixels(&self) -> usize {
        self.height() * self.width()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        ImageBatch { data: self.data.select(idx), discrete: self.discrete }
    }

    /// Continuous view: discrete levels map to their cell centres.
    pub fn to_continuous(&self) -> Self {
        if !self.discrete {
            return self.clone();
        }
        let data = self.data.map(|v| T::lit(level_center(v.to_f64_lossy() as u8)));
        ImageBatch { data, discrete: false }
    }

    /// Re-quantizes to 256 levels; discrete batches are returned unchanged.
    pub fn quantize(&self) -> Self {
        if self.discrete {
            return self.clone();
        }
        let data = self.data.map(|v| T::lit(f64::from(quantize_value(v.to_f64_lossy()))));
        ImageBatch { data, discrete: true }
    }

    /// Clipped to `[0, 1]`, for export.
    pub fn clipped(&self) -> Self {
        if self.discrete {
            return self.clone();
        }
        ImageBatch { data: self.data.map(|v| v.max(T::zero()).min(T::one())), discrete: false }
    }

    pub fn cast<U: Scalar>(&self) -> ImageBatch<U> {
        ImageBatch { data: self.data.cast(), discrete: self.discrete }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn discrete_validation() {
        assert!(ImageBatch::<f32>::discrete(Tensor::full([1, 1, 2, 2], 3.5)).is_err());
        assert!(ImageBatch::<f32>::discrete(Tensor::full([1, 1, 2, 2], 256.0)).is_err());
        assert!(ImageBatch::<f32>::discrete(Tensor::full([1, 1, 2, 2], 255.0)).is_ok());
        assert!(ImageBatch::<f32>::continuous(Tensor::full([1, 2, 2, 2], 0.5)).is_err());
        assert!(ImageBatch::<f32>::continuous(Tensor::full([1, 1, 2, 2], f32::NAN)).is_err());
    }

    proptest! {
        #[test]
        fn quantization_is_idempotent(v in -0.5f64..1.5) {
            let q = quantize_value(v);
            prop_assert_eq!(quantize_value(level_center(q)), q);
        }
    }
}
