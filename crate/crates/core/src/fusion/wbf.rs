//! Weighted box fusion with support counting, and the gated variant built on
//! top of it.
//!
//! Boxes are pooled per class and visited in descending `confidence * weight`
//! order. Each box joins the first cluster whose running fused box overlaps
//! it by more than `iou_threshold`, otherwise it opens a new cluster. The
//! fused box is the `confidence * weight` weighted mean of member corners and
//! its confidence is the `weight` weighted mean of member confidences.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::Result;
use crate::fusion::gates::{apply_gates, ConfidenceGates, LabelSpaceFilter};
use crate::fusion::{ConfidenceRescale, FusionParams};
use crate::geometry::{BBox, ClassId, DetectionSet, Rect};

#[derive(Debug, Clone, PartialEq)]
pub struct FusedMember {
    /// Position of the contributing model in the fused list.
    pub model: usize,
    pub detection: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedBox {
    pub class: ClassId,
    pub rect: Rect,
    /// Fused confidence `p_b`.
    pub confidence: f64,
    /// Number of distinct models in `members` (`n_b`).
    pub support: usize,
    pub members: Vec<FusedMember>,
}

impl FusedBox {
    /// Copy without member provenance, the form that gets serialized.
    pub fn stripped(&self) -> FusedBox {
        FusedBox {
            members: Vec::new(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Copy)]
struct Entry {
    model: usize,
    index: usize,
    weight: f64,
    score: f64,
    det: BBox,
}

fn visit_order(a: &Entry, b: &Entry) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.det.source.cmp(&b.det.source))
        .then(a.index.cmp(&b.index))
        .then(a.model.cmp(&b.model))
}

struct Cluster {
    members: Vec<Entry>,
    rect: Rect,
}

impl Cluster {
    fn new(e: Entry) -> Self {
        Self {
            rect: e.det.rect,
            members: vec![e],
        }
    }

    fn push(&mut self, e: Entry) {
        self.members.push(e);
        self.rect = fused_rect(&self.members);
    }

    fn support(&self) -> usize {
        self.members
            .iter()
            .map(|m| m.model)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

fn fused_rect(members: &[Entry]) -> Rect {
    if let [only] = members {
        return only.det.rect;
    }
    let total: f64 = members.iter().map(|m| m.score).sum();
    // All-zero confidences fall back to plain weight averaging.
    let coef = |m: &Entry| if total > 0.0 { m.score } else { m.weight };
    let norm: f64 = if total > 0.0 {
        total
    } else {
        members.iter().map(|m| m.weight).sum()
    };
    let mut out = [0.0; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        let num: f64 = members
            .iter()
            .map(|m| coef(m) * m.det.rect.as_array()[k])
            .sum();
        let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
            let v = m.det.rect.as_array()[k];
            (lo.min(v), hi.max(v))
        });
        *slot = (num / norm).clamp(lo, hi);
    }
    let mut r = Rect::from_array(out);
    r.x1 = r.x1.min(r.x2);
    r.y1 = r.y1.min(r.y2);
    r
}

fn fused_confidence(members: &[Entry]) -> f64 {
    if let [only] = members {
        return only.det.confidence;
    }
    let wsum: f64 = members.iter().map(|m| m.weight).sum();
    let num: f64 = members.iter().map(|m| m.weight * m.det.confidence).sum();
    let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), m| {
        (lo.min(m.det.confidence), hi.max(m.det.confidence))
    });
    (num / wsum).clamp(lo, hi)
}

/// Fuses one image's detections from several models.
///
/// `per_model[m]` holds model `m`'s boxes; `params.model_weights[m]` is its
/// weight. Models with weight 0 are left out entirely.
pub fn wbf(per_model: &[DetectionSet], params: &FusionParams) -> Result<Vec<FusedBox>> {
    params.validate()?;
    let weights = params.weights_for(per_model.len())?;
    let active = weights.iter().filter(|w| **w > 0.0).count();

    let mut by_class: BTreeMap<ClassId, Vec<Entry>> = BTreeMap::new();
    for (model, (set, &weight)) in per_model.iter().zip(&weights).enumerate() {
        if weight <= 0.0 {
            continue;
        }
        for (index, det) in set.boxes.iter().enumerate() {
            if !det.has_area() {
                continue;
            }
            by_class.entry(det.class).or_default().push(Entry {
                model,
                index,
                weight,
                score: det.confidence * weight,
                det: *det,
            });
        }
    }

    let mut fused = Vec::new();
    for (class, mut entries) in by_class {
        entries.sort_by(visit_order);
        let mut clusters: Vec<Cluster> = Vec::new();
        for e in entries {
            match clusters
                .iter_mut()
                .find(|c| c.rect.iou(&e.det.rect) > params.iou_threshold)
            {
                Some(c) => c.push(e),
                None => clusters.push(Cluster::new(e)),
            }
        }
        for c in clusters {
            let support = c.support();
            let mut confidence = fused_confidence(&c.members);
            if params.confidence_rescale == ConfidenceRescale::SupportRatio {
                confidence *= support.min(active) as f64 / active as f64;
            }
            fused.push(FusedBox {
                class,
                rect: c.rect,
                confidence,
                support,
                members: c
                    .members
                    .iter()
                    .map(|m| FusedMember {
                        model: m.model,
                        detection: m.det,
                    })
                    .collect(),
            });
        }
    }
    // Stable: ties keep class order, then cluster creation order.
    fused.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    Ok(fused)
}

/// Class-gated fusion: each model's boxes pass through the label-space filter
/// and per-class confidence gates before [`wbf`].
pub fn knowledge_vote(
    per_model: &[DetectionSet],
    gates: &ConfidenceGates,
    filter: &LabelSpaceFilter,
    params: &FusionParams,
) -> Result<Vec<FusedBox>> {
    let gated: Vec<DetectionSet> = per_model
        .iter()
        .map(|s| apply_gates(s, gates, filter))
        .collect();
    wbf(&gated, params)
}
