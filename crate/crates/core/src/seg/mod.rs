//! Segmentation network, overlap and boundary metrics.

mod metrics;
mod net;

pub use metrics::{dice, modified_hausdorff, prediction_entropy, LabelMask};
pub use net::{
    evaluate_segmenter, score_mask, score_masks, train_segmenter, ImageScore, Segmenter, SegmenterConfig,
    SegmenterEpochRecord, SegmenterTrainConfig, SegmenterTrainOutcome, CHECKPOINT_KIND,
};
