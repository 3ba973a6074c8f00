//! Prediction grids, default boxes, the detector model and its supervised loss.

pub mod boxes;
pub mod checkpoint;
pub mod grid;
pub mod model;
pub mod multibox;

pub use boxes::{
    build_default_boxes, decode_offsets, decode_predictions, encode_gt, encode_offsets, AnchorLevel, DefaultBoxSet,
    LevelShape, Location, MatchTargets,
};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use grid::{GridGrad, PredictionGrid};
pub use model::{ArchConfig, ConvDetector, ConvSpec, DetectorModel, HeadSpec, Tape};
pub use multibox::{mine_hard_negatives, multibox_batch, multibox_loss, MultiboxItem, MultiboxLoss};
