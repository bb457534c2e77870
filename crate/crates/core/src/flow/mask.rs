use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Checkerboard,
    Channel,
}

/// Binary partition of a `C×H×W` feature map. Elements where the mask is 1
/// form partition A (passed through, fed to the subnet); the rest form B.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingMask {
    kind: MaskKind,
    parity: bool,
    shape: [usize; 3],
    bits: Vec<bool>,
}

impl CouplingMask {
    pub fn new(kind: MaskKind, parity: bool, channels: usize, h: usize, w: usize) -> Result<Self> {
        if channels == 0 || h == 0 || w == 0 {
            return Err(Error::invalid("empty mask shape"));
        }
        let bits: Vec<bool> = match kind {
            MaskKind::Checkerboard => {
                if h * w < 2 {
                    return Err(Error::invalid("checkerboard mask needs at least two spatial positions"));
                }
                (0..channels)
                    .flat_map(|_| (0..h).flat_map(move |i| (0..w).map(move |j| ((i + j) % 2 == 0) != parity)))
                    .collect()
            }
            MaskKind::Channel => {
                if !channels.is_multiple_of(2) {
                    return Err(Error::invalid(format!("channel mask needs an even channel count, got {channels}")));
                }
                (0..channels)
                    .flat_map(|c| std::iter::repeat_n((c < channels / 2) != parity, h * w))
                    .collect()
            }
        };
        Ok(CouplingMask { kind, parity, shape: [channels, h, w], bits })
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn parity(&self) -> bool {
        self.parity
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of elements in partition B.
    pub fn transformed_count(&self) -> usize {
        self.bits.iter().filter(|&&b| !b).count()
    }

    pub fn complement(&self) -> Self {
        CouplingMask {
            kind: self.kind,
            parity: !self.parity,
            shape: self.shape,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    /// `[1, C, H, W]` tensor of ones on A.
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        let [c, h, w] = self.shape;
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec([1, c, h, w], data).expect("mask shape")
    }

    /// `[1, C, H, W]` tensor of ones on B.
    pub fn complement_tensor<T: Scalar>(&self) -> Tensor<T> {
        self.complement().tensor()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn checkerboard_alternates() {
        let m = CouplingMask::new(MaskKind::Checkerboard, false, 1, 2, 3).unwrap();
        assert_eq!(m.bits(), &[true, false, true, false, true, false]);
        let m = CouplingMask::new(MaskKind::Checkerboard, true, 1, 2, 2).unwrap();
        assert_eq!(m.bits(), &[false, true, true, false]);
    }

    #[test]
    fn channel_mask_splits_in_half() {
        let m = CouplingMask::new(MaskKind::Channel, false, 4, 1, 2).unwrap();
        assert_eq!(m.bits(), &[true, true, true, true, false, false, false, false]);
        assert!(CouplingMask::new(MaskKind::Channel, false, 3, 2, 2).is_err());
    }

    proptest! {
        #[test]
        fn mask_and_complement_partition(c in 1usize..5, h in 1usize..6, w in 2usize..6, parity: bool, chan: bool) {
            let kind = if chan { MaskKind::Channel } else { MaskKind::Checkerboard };
            let c = if chan { 2 * c } else { c };
            let m = CouplingMask::new(kind, parity, c, h, w).unwrap();
            let mc = m.complement();
            prop_assert!(m.bits().iter().zip(mc.bits()).all(|(a, b)| a != b));
            prop_assert_eq!(m.bits().len(), c * h * w);
            prop_assert!(m.transformed_count() > 0 && mc.transformed_count() > 0);
        }
    }
}
