//! Anchor-free detection on the neck output: per-pixel class logits, box
//! distances and centerness, focal/GIoU/BCE training loss, greedy NMS
//! decoding, and a COCO-style average-precision evaluator.

pub mod eval;
mod head;
pub mod reference;

pub use eval::{average_precision, iou, read_boxes, write_boxes, EvalResult, IOU_THRESHOLDS};
pub use head::{compute_loss, decode, decode_image, DetectionHead, HeadConfig, HeadOutput};

use serde::{Deserialize, Serialize};

use crate::sensing::Box2D;

/// A scored, classified box prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub rect: Box2D,
    pub class: usize,
    pub score: f64,
}

/// A labelled ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub rect: Box2D,
    pub class: usize,
}
