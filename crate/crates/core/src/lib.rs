//! Unsupervised test-time harmonization of multi-site images, guided by a
//! normalizing flow trained on the source site.
//!
//! The numeric core is generic over [`scalar::Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod adapt;
pub mod augment;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod flow_train;
pub mod harmonizer;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod seg;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type ImageBatchF32 = image::ImageBatch<f32>;
pub type ImageBatchF64 = image::ImageBatch<f64>;
pub type FlowModelF32 = flow::FlowModel<f32>;
pub type FlowModelF64 = flow::FlowModel<f64>;
pub type HarmonizerF32 = harmonizer::Harmonizer<f32>;
pub type HarmonizerF64 = harmonizer::Harmonizer<f64>;
pub type SegmenterF32 = seg::Segmenter<f32>;
pub type SegmenterF64 = seg::Segmenter<f64>;
