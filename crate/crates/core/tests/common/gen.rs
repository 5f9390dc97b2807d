//! Seeded random instances. Boxes are scattered around a few shared objects
//! so that different models overlap often enough to form real clusters.

use std::collections::BTreeMap;

use ensemble_fusion::consensus::{SourceDomain, SourceEnsemble};
use ensemble_fusion::fusion::{ConfidenceGates, LabelSpaceFilter};
use ensemble_fusion::synth::SynthRng;
use ensemble_fusion::{BBox, ClassId, DetectionSet, Rect};

pub const CLASSES: u32 = 3;

pub fn rect(rng: &mut SynthRng) -> Rect {
    let w = rng.range(0.02, 0.5);
    let h = rng.range(0.02, 0.5);
    let x1 = rng.uniform() * (1.0 - w);
    let y1 = rng.uniform() * (1.0 - h);
    Rect::new(x1, y1, x1 + w, y1 + h)
}

pub fn jittered(rng: &mut SynthRng, r: &Rect, sd: f64) -> Rect {
    let c = r.as_array().map(|v| (v + sd * rng.normal()).clamp(0.0, 1.0));
    let out = Rect::new(c[0].min(c[2]), c[1].min(c[3]), c[0].max(c[2]), c[1].max(c[3]));
    if out.area() > 0.0 {
        out
    } else {
        *r
    }
}

/// Mostly continuous, sometimes on a coarse grid so that ties occur.
pub fn confidence(rng: &mut SynthRng) -> f64 {
    if rng.uniform() < 0.3 {
        rng.int_inclusive(1, 9) as f64 / 10.0
    } else {
        rng.uniform()
    }
}

pub fn objects(rng: &mut SynthRng, max: usize) -> Vec<(u32, Rect)> {
    (0..rng.int_inclusive(1, max))
        .map(|_| (rng.int_inclusive(0, CLASSES as usize - 1) as u32, rect(rng)))
        .collect()
}

/// One detection set per model for a single image; box `source` tags equal
/// the model index.
pub fn model_sets(rng: &mut SynthRng, models: usize, image_id: &str) -> Vec<DetectionSet> {
    let objs = objects(rng, 5);
    (0..models)
        .map(|m| {
            let mut boxes = Vec::new();
            for (class, r) in &objs {
                if rng.uniform() < 0.75 {
                    let jr = jittered(rng, r, 0.02);
                    boxes.push(BBox::new(*class, jr, confidence(rng), m));
                }
            }
            for _ in 0..rng.int_inclusive(0, 2) {
                let class = rng.int_inclusive(0, CLASSES as usize - 1) as u32;
                let r = rect(rng);
                boxes.push(BBox::new(class, r, confidence(rng), m));
            }
            DetectionSet::new(image_id, boxes)
        })
        .collect()
}

/// Positive weights, occasionally with one model switched off.
pub fn weights(rng: &mut SynthRng, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| rng.range(0.1, 3.0)).collect();
    if k > 1 && rng.uniform() < 0.2 {
        let i = rng.int_inclusive(0, k - 1);
        w[i] = 0.0;
    }
    w
}

pub fn gates(rng: &mut SynthRng) -> ConfidenceGates {
    let mut g = ConfidenceGates::uniform(rng.range(0.0, 0.6));
    for c in 0..CLASSES {
        if rng.uniform() < 0.5 {
            g = g.with_gate(ClassId(c), rng.range(0.0, 0.9));
        }
    }
    g
}

pub fn filter(rng: &mut SynthRng) -> LabelSpaceFilter {
    if rng.uniform() < 0.7 {
        return LabelSpaceFilter::KeepAll;
    }
    let mut keep: Vec<ClassId> = (0..CLASSES).filter(|_| rng.uniform() < 0.5).map(ClassId).collect();
    if keep.is_empty() {
        keep.push(ClassId(rng.int_inclusive(0, CLASSES as usize - 1) as u32));
    }
    LabelSpaceFilter::keep_listed(keep).unwrap()
}

pub fn permutation(rng: &mut SynthRng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.int_inclusive(0, i);
        p.swap(i, j);
    }
    p
}

/// Drops boxes, in input order, that overlap a kept same-class box by more
/// than `iou`. A single detector's post-NMS output looks like this.
pub fn antichain(set: &DetectionSet, iou: f64) -> DetectionSet {
    let mut kept: Vec<BBox> = Vec::new();
    for b in &set.boxes {
        if kept.iter().all(|k| k.class != b.class || k.iou(b) <= iou) {
            kept.push(*b);
        }
    }
    DetectionSet::new(set.image_id.clone(), kept)
}

/// `sources` sources over `images` images, sharing objects per image.
pub fn ensemble(rng: &mut SynthRng, sources: usize, images: usize) -> SourceEnsemble {
    let ids: Vec<String> = (0..images).map(|j| format!("im{j}")).collect();
    let mut per_source: Vec<BTreeMap<String, DetectionSet>> = vec![BTreeMap::new(); sources];
    for id in &ids {
        for (s, set) in model_sets(rng, sources, id).into_iter().enumerate() {
            per_source[s].insert(id.clone(), set);
        }
    }
    let domains = per_source
        .into_iter()
        .enumerate()
        .map(|(i, d)| SourceDomain::new(i as u32 + 1, format!("s{}", i + 1), rng.int_inclusive(1, 500) as u64, d))
        .collect();
    SourceEnsemble::new(domains, ids).unwrap()
}
