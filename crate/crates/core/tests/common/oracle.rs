//! Reference implementations written without the library's fusion or
//! evaluation code, for equivalence checks.

use ensemble_fusion::consensus::SourceDomain;
use ensemble_fusion::eval::GroundTruth;
use ensemble_fusion::fusion::{ConfidenceGates, LabelSpaceFilter};
use ensemble_fusion::{ClassId, Rect};

fn iou(a: &Rect, b: &Rect) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

struct Candidate {
    conf: f64,
    source: usize,
    index: usize,
    model: usize,
    rect: Rect,
}

/// Consensus quality by explicit clustering: gate each model's boxes, then
/// per class visit boxes by descending confidence and put each into the
/// first cluster whose confidence-weighted mean box overlaps it by more than
/// `iou_thr`. Sums `n_b * p_b` with `n_b` the number of distinct models in a
/// cluster and `p_b` the mean member confidence.
pub fn consensus_quality(
    subset: &[&SourceDomain],
    images: &[String],
    gates: &ConfidenceGates,
    filter: &LabelSpaceFilter,
    iou_thr: f64,
) -> f64 {
    let mut q = 0.0;
    for image in images {
        let mut by_class: std::collections::BTreeMap<ClassId, Vec<Candidate>> = Default::default();
        for (model, src) in subset.iter().enumerate() {
            let Some(set) = src.detections.get(image) else { continue };
            let mut index = 0;
            for b in &set.boxes {
                let admitted = match filter {
                    LabelSpaceFilter::KeepAll => true,
                    LabelSpaceFilter::KeepListed(s) => s.contains(&b.class),
                };
                if !admitted || b.confidence < gates.gate(b.class) {
                    continue;
                }
                let this = index;
                index += 1;
                if b.rect.area() <= 0.0 {
                    continue;
                }
                by_class.entry(b.class).or_default().push(Candidate {
                    conf: b.confidence,
                    source: b.source,
                    index: this,
                    model,
                    rect: b.rect,
                });
            }
        }
        for (_, mut cands) in by_class {
            cands.sort_by(|a, b| {
                b.conf
                    .total_cmp(&a.conf)
                    .then(a.source.cmp(&b.source))
                    .then(a.index.cmp(&b.index))
                    .then(a.model.cmp(&b.model))
            });
            let mut clusters: Vec<Vec<&Candidate>> = Vec::new();
            for c in &cands {
                let mut joined = false;
                for cl in clusters.iter_mut() {
                    if iou(&mean_box(cl), &c.rect) > iou_thr {
                        cl.push(c);
                        joined = true;
                        break;
                    }
                }
                if !joined {
                    clusters.push(vec![c]);
                }
            }
            for cl in &clusters {
                let mut models: Vec<usize> = cl.iter().map(|c| c.model).collect();
                models.sort();
                models.dedup();
                let p = cl.iter().map(|c| c.conf).sum::<f64>() / cl.len() as f64;
                q += models.len() as f64 * p;
            }
        }
    }
    q
}

fn mean_box(cl: &[&Candidate]) -> Rect {
    let w: f64 = cl.iter().map(|c| c.conf).sum();
    if w == 0.0 {
        let n = cl.len() as f64;
        return Rect::new(
            cl.iter().map(|c| c.rect.x1).sum::<f64>() / n,
            cl.iter().map(|c| c.rect.y1).sum::<f64>() / n,
            cl.iter().map(|c| c.rect.x2).sum::<f64>() / n,
            cl.iter().map(|c| c.rect.y2).sum::<f64>() / n,
        );
    }
    Rect::new(
        cl.iter().map(|c| c.conf * c.rect.x1).sum::<f64>() / w,
        cl.iter().map(|c| c.conf * c.rect.y1).sum::<f64>() / w,
        cl.iter().map(|c| c.conf * c.rect.x2).sum::<f64>() / w,
        cl.iter().map(|c| c.conf * c.rect.y2).sum::<f64>() / w,
    )
}

/// `(confidence, true positive)` for every detection of `class` at IoU
/// threshold `thr`, ranked: confidence descending, then image order, then
/// input order. Also returns the ground-truth count.
pub fn ranked_matches(
    dets: &std::collections::BTreeMap<String, Vec<(ClassId, Rect, f64)>>,
    gt: &GroundTruth,
    class: ClassId,
    thr: f64,
) -> (Vec<(f64, bool)>, usize) {
    let mut images: Vec<&String> = dets.keys().chain(gt.entries.keys()).collect();
    images.sort();
    images.dedup();
    let mut all = Vec::new();
    let mut num_gt = 0;
    for image in images {
        let gts: Vec<Rect> = gt
            .entries
            .get(image)
            .map(|v| v.iter().filter(|g| g.class == class).map(|g| g.rect).collect())
            .unwrap_or_default();
        num_gt += gts.len();
        let mut mine: Vec<(f64, Rect)> = dets
            .get(image)
            .map(|v| v.iter().filter(|d| d.0 == class).map(|d| (d.2, d.1)).collect())
            .unwrap_or_default();
        // Insertion sort keeps equal confidences in input order.
        for i in 1..mine.len() {
            let mut j = i;
            while j > 0 && mine[j - 1].0 < mine[j].0 {
                mine.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used = vec![false; gts.len()];
        for (conf, r) in mine {
            let mut best = None;
            let mut best_iou = -1.0;
            for (g, gr) in gts.iter().enumerate() {
                let v = iou(&r, gr);
                if !used[g] && v >= thr && v > best_iou {
                    best = Some(g);
                    best_iou = v;
                }
            }
            if let Some(g) = best {
                used[g] = true;
            }
            all.push((conf, best.is_some()));
        }
    }
    for i in 1..all.len() {
        let mut j = i;
        while j > 0 && all[j - 1].0 < all[j].0 {
            all.swap(j - 1, j);
            j -= 1;
        }
    }
    (all, num_gt)
}

/// 101-point interpolated AP: for each recall level `k / 100`, the highest
/// precision at any rank whose recall reaches it, found by a full scan.
pub fn average_precision(ranked: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0;
    for (k, (_, hit)) in ranked.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for level in 0..101 {
        let r = level as f64 / 100.0;
        let mut best = 0.0f64;
        for (rec, prec) in &points {
            if *rec >= r && *prec > best {
                best = *prec;
            }
        }
        sum += best;
    }
    sum / 101.0
}
