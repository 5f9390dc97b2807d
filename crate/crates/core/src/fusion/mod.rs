//! Box-combination algorithms: NMS, soft-NMS, weighted box fusion and the
//! class-gated knowledge vote.

pub mod gates;
mod nms;
mod params;
mod wbf;

pub use gates::{apply_gates, ConfidenceGates, LabelSpaceFilter};
pub use nms::{nms, soft_nms};
pub use params::{
    ConfidenceRescale, FusionParams, DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR, DEFAULT_SOFT_NMS_SIGMA,
    DEFAULT_WBF_IOU,
};
pub use wbf::{knowledge_vote, wbf, FusedBox, FusedMember};
