use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::Result;
use crate::fusion::FusionParams;
use crate::geometry::{BBox, ClassId, DetectionSet};

/// Descending confidence, ties broken by (source, ingestion index).
pub(crate) fn by_confidence(a: &(usize, BBox), b: &(usize, BBox)) -> Ordering {
    b.1.confidence
        .total_cmp(&a.1.confidence)
        .then(a.1.source.cmp(&b.1.source))
        .then(a.0.cmp(&b.0))
}

fn per_class(dets: &DetectionSet) -> BTreeMap<ClassId, Vec<(usize, BBox)>> {
    let mut classes: BTreeMap<ClassId, Vec<(usize, BBox)>> = BTreeMap::new();
    for (i, b) in dets.boxes.iter().enumerate() {
        if b.has_area() {
            classes.entry(b.class).or_default().push((i, *b));
        }
    }
    classes
}

fn sorted_output(image_id: &str, mut kept: Vec<(usize, BBox)>) -> DetectionSet {
    kept.sort_by(by_confidence);
    DetectionSet::new(image_id, kept.into_iter().map(|(_, b)| b).collect())
}

/// Greedy per-class non-maximum suppression.
pub fn nms(dets: &DetectionSet, params: &FusionParams) -> Result<DetectionSet> {
    params.validate()?;
    let mut kept = Vec::new();
    for (_, mut boxes) in per_class(dets) {
        boxes.sort_by(by_confidence);
        let mut survivors: Vec<(usize, BBox)> = Vec::new();
        for cand in boxes {
            if survivors
                .iter()
                .all(|(_, k)| k.iou(&cand.1) <= params.iou_threshold)
            {
                survivors.push(cand);
            }
        }
        kept.extend(survivors);
    }
    Ok(sorted_output(&dets.image_id, kept))
}

/// Gaussian soft-NMS: overlapping confidences decay by `exp(-iou² / sigma)`
/// and boxes that fall below `score_floor` are dropped.
pub fn soft_nms(dets: &DetectionSet, params: &FusionParams) -> Result<DetectionSet> {
    params.validate()?;
    let mut kept = Vec::new();
    for (_, mut pending) in per_class(dets) {
        pending.retain(|(_, b)| b.confidence >= params.score_floor);
        while !pending.is_empty() {
            let top = pending
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| by_confidence(a, b))
                .map(|(i, _)| i)
                .expect("non-empty");
            let chosen = pending.swap_remove(top);
            for (_, b) in pending.iter_mut() {
                let ov = chosen.1.iou(b);
                if ov > 0.0 {
                    b.confidence *= (-(ov * ov) / params.soft_nms_sigma).exp();
                }
            }
            pending.retain(|(_, b)| b.confidence >= params.score_floor);
            kept.push(chosen);
        }
    }
    Ok(sorted_output(&dets.image_id, kept))
}
