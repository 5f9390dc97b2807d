use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clustering threshold for weighted box fusion.
pub const DEFAULT_WBF_IOU: f64 = 0.55;
/// Default suppression threshold for NMS and soft-NMS.
pub const DEFAULT_NMS_IOU: f64 = 0.5;
pub const DEFAULT_SOFT_NMS_SIGMA: f64 = 0.5;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.001;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceRescale {
    #[default]
    None,
    /// Multiply fused confidence by `min(n_b, N) / N`, `N` being the number
    /// of models with positive weight.
    SupportRatio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub iou_threshold: f64,
    pub soft_nms_sigma: f64,
    pub score_floor: f64,
    /// One weight per model; empty means uniform.
    pub model_weights: Vec<f64>,
    pub confidence_rescale: ConfidenceRescale,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_WBF_IOU,
            soft_nms_sigma: DEFAULT_SOFT_NMS_SIGMA,
            score_floor: DEFAULT_SCORE_FLOOR,
            model_weights: Vec::new(),
            confidence_rescale: ConfidenceRescale::None,
        }
    }
}

impl FusionParams {
    pub fn with_iou_threshold(mut self, t: f64) -> Self {
        self.iou_threshold = t;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.model_weights = weights;
        self
    }

    pub fn with_rescale(mut self, rescale: ConfidenceRescale) -> Self {
        self.confidence_rescale = rescale;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::InvalidParams(format!(
                "iou_threshold {} must lie in (0, 1)",
                self.iou_threshold
            )));
        }
        if !(self.soft_nms_sigma > 0.0 && self.soft_nms_sigma.is_finite()) {
            return Err(Error::InvalidParams(format!(
                "soft_nms_sigma {} must be positive",
                self.soft_nms_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::InvalidParams(format!(
                "score_floor {} must lie in [0, 1]",
                self.score_floor
            )));
        }
        if self.model_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidParams(
                "model weights must be finite and non-negative".into(),
            ));
        }
        if !self.model_weights.is_empty() && !self.model_weights.iter().any(|w| *w > 0.0) {
            return Err(Error::InvalidParams(
                "at least one model weight must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Weights for `n` models, expanding the empty list to uniform ones.
    pub fn weights_for(&self, n: usize) -> Result<Vec<f64>> {
        if self.model_weights.is_empty() {
            return Ok(vec![1.0; n]);
        }
        if self.model_weights.len() != n {
            return Err(Error::WeightArityMismatch {
                expected: n,
                got: self.model_weights.len(),
            });
        }
        Ok(self.model_weights.clone())
    }
}
