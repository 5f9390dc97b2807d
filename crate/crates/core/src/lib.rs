//! Fusion of object detections from an ensemble of models trained on
//! different source domains.
//!
//! * [`fusion`]: NMS, soft-NMS, weighted box fusion and the class-gated
//!   knowledge vote.
//! * [`consensus`]: leave-one-out consensus quality, per-source weights and
//!   weighted fusion into pseudo-labels.
//! * [`eval`]: precision, recall, AP/mAP and F1 curves.
//! * [`io`]: text and JSON formats.
//! * [`synth`]: seeded synthetic scenarios.
//! * [`pipeline`]: the stages behind the `efuse` binary.

pub mod consensus;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod pipeline;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{iou, BBox, ClassId, DetectionSet, Rect};
