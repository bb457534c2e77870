//! Exact-likelihood normalizing flow: affine couplings, squeezes and
//! variational dequantization.

mod coupling;
mod dequant;
mod mask;
mod model;

pub use coupling::CouplingLayer;
pub use dequant::{DequantMode, Dequantizer, LOGIT_CLAMP, UNIFORM_MARGIN};
pub use mask::{CouplingMask, MaskKind};
pub use model::{
    bits_per_dim, DequantConfig, FlowConfig, FlowModel, FlowPass, StageConfig, SubnetConfig, Transform,
};

#[cfg(test)]
mod tests;
