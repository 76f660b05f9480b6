//! Patch-grid decoders: the shared adaptation stem, the anchor-free detection
//! head (one box hypothesis per patch), the patch-to-pixel segmentation head, and
//! box encoding between grid offsets and image pixels.

mod checkpoint;
mod det;
pub mod layers;
mod model;
mod seg;
mod stem;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use det::{decode_boxes, encode_targets, DetGrid, DetHead, DetHeadConfig, DetTargets, Detection, GtBox};
pub use model::{HeadConfig, ModelCache, ModelConfig, PatchModel, Task};
pub use seg::{DenseMask, SegHead, SegHeadConfig};
pub use stem::{Activation, Stem, StemConfig};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate ground-truth box for instance {0}")]
    DegenerateBox(u64),
    #[error("checkpoint i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid checkpoint: {0}")]
    BadCheckpoint(String),
}
