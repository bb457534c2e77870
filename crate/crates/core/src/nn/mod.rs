//! Parameter storage, layers, the shared U-shaped network and the optimizer.

mod optim;
mod params;
mod unet;

pub use optim::{accumulate, clip_global_norm, Adam, StepDecay};
pub use params::{Bound, ParamId, ParamSet};
pub use unet::{Activation, UNet, UNetOutput, UNetSpec};
