//! Evaluation fixtures and the checks run against them.

use std::collections::BTreeMap;

use super::{gen, oracle};
use ensemble_fusion::eval::{coco_iou_thresholds, evaluate, GroundTruth, GtBox};
use ensemble_fusion::synth::SynthRng;
use ensemble_fusion::{BBox, ClassId};

pub struct Fixture {
    pub gt: GroundTruth,
    pub dets: BTreeMap<String, Vec<BBox>>,
}

/// Up to `max_dets` detections over a few images, half of them near a
/// ground-truth box.
pub fn fixture(rng: &mut SynthRng, max_dets: usize, distinct_conf: bool) -> Fixture {
    let images = rng.int_inclusive(1, 3);
    let mut gt = GroundTruth::default();
    let mut dets: BTreeMap<String, Vec<BBox>> = BTreeMap::new();
    let mut budget = rng.int_inclusive(1, max_dets);
    for j in 0..images {
        let id = format!("im{j}");
        let objs = gen::objects(rng, 6);
        gt.entries.insert(
            id.clone(),
            objs.iter().map(|(c, r)| GtBox { class: ClassId(*c), rect: *r }).collect(),
        );
        let mut boxes = Vec::new();
        let share = if j + 1 == images { budget } else { rng.int_inclusive(0, budget) };
        for _ in 0..share {
            let conf = if distinct_conf { rng.uniform() } else { gen::confidence(rng) };
            let (class, rect) = if rng.uniform() < 0.6 {
                let (c, r) = objs[rng.int_inclusive(0, objs.len() - 1)];
                (c, gen::jittered(rng, &r, 0.03))
            } else {
                (rng.int_inclusive(0, gen::CLASSES as usize - 1) as u32, gen::rect(rng))
            };
            boxes.push(BBox::new(class, rect, conf, 0));
        }
        budget -= share;
        dets.insert(id, boxes);
    }
    Fixture { gt, dets }
}

fn as_tuples(dets: &BTreeMap<String, Vec<BBox>>) -> BTreeMap<String, Vec<(ClassId, ensemble_fusion::Rect, f64)>> {
    dets.iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|b| (b.class, b.rect, b.confidence)).collect()))
        .collect()
}

/// Per-class AP50 and AP50:95 from evaluate agree with the oracle.
pub fn ap_agrees_with_oracle(f: &Fixture) -> Result<(), String> {
    let report = evaluate(&f.dets, &f.gt, 0.0).map_err(|e| e.to_string())?;
    let tuples = as_tuples(&f.dets);
    for (class, m) in &report.per_class {
        let aps: Vec<f64> = coco_iou_thresholds()
            .iter()
            .map(|t| {
                let (ranked, n) = oracle::ranked_matches(&tuples, &f.gt, *class, *t);
                oracle::average_precision(&ranked, n)
            })
            .collect();
        let want50 = aps[0];
        let want5095 = aps.iter().sum::<f64>() / aps.len() as f64;
        if (m.ap50 - want50).abs() > 1e-12 || (m.ap5095 - want5095).abs() > 1e-12 {
            return Err(format!(
                "class {class}: ap50 {} vs {want50}, ap5095 {} vs {want5095}",
                m.ap50, m.ap5095
            ));
        }
    }
    Ok(())
}

/// Recall never rises as the confidence threshold goes up.
pub fn recall_is_monotone(f: &Fixture, thresholds: &[f64]) -> Result<(), String> {
    let mut prev: Option<ensemble_fusion::eval::MetricsReport> = None;
    for t in thresholds {
        let r = evaluate(&f.dets, &f.gt, *t).map_err(|e| e.to_string())?;
        if let Some(p) = &prev {
            if r.aggregate.recall > p.aggregate.recall {
                return Err(format!("aggregate recall rose at threshold {t}"));
            }
            for (c, m) in &r.per_class {
                if m.recall > p.per_class[c].recall {
                    return Err(format!("class {c} recall rose at threshold {t}"));
                }
            }
        }
        prev = Some(r);
    }
    Ok(())
}

pub fn perfect_detector(f: &Fixture) -> Result<(), String> {
    let dets: BTreeMap<String, Vec<BBox>> = f
        .gt
        .entries
        .iter()
        .map(|(k, v)| (k.clone(), v.iter().map(|g| BBox::new(g.class.0, g.rect, 0.9, 0)).collect()))
        .collect();
    // Coincident same-class objects make a perfect score impossible to define.
    for v in f.gt.entries.values() {
        for (i, a) in v.iter().enumerate() {
            for b in &v[i + 1..] {
                if a.class == b.class && a.rect.iou(&b.rect) >= 0.5 {
                    return Ok(());
                }
            }
        }
    }
    let r = evaluate(&dets, &f.gt, 0.0001).map_err(|e| e.to_string())?;
    let a = r.aggregate;
    if [a.precision, a.recall, a.map50, a.map5095] != [1.0; 4] {
        return Err(format!("perfect detector scored {a:?}"));
    }
    Ok(())
}
