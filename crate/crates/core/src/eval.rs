//! Detection scoring against ground truth: precision, recall, 101-point
//! interpolated AP at IoU 0.5 and averaged over 0.50:0.05:0.95, and
//! F1-versus-confidence curves.
//!
//! Greedy matching visits detections in descending confidence, so dropping
//! every detection under a threshold removes a suffix of the visit order and
//! leaves earlier matches untouched. Both [`evaluate`] and [`f1_curve`] rely
//! on that to match once and count per threshold.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedBox;
use crate::geometry::{BBox, ClassId, Rect};

/// IoU at which precision, recall and F1 are reported.
pub const PR_IOU: f64 = 0.5;
/// Number of points on the recall grid used for interpolated AP.
pub const RECALL_POINTS: usize = 101;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.0001;
pub const DEFAULT_F1_GRID_POINTS: usize = 200;

/// Anything that can be scored.
pub trait Detection {
    fn class(&self) -> ClassId;
    fn rect(&self) -> Rect;
    fn confidence(&self) -> f64;
}

impl<T: Detection + ?Sized> Detection for &T {
    fn class(&self) -> ClassId {
        (**self).class()
    }
    fn rect(&self) -> Rect {
        (**self).rect()
    }
    fn confidence(&self) -> f64 {
        (**self).confidence()
    }
}

impl Detection for BBox {
    fn class(&self) -> ClassId {
        self.class
    }
    fn rect(&self) -> Rect {
        self.rect
    }
    fn confidence(&self) -> f64 {
        self.confidence
    }
}

impl Detection for FusedBox {
    fn class(&self) -> ClassId {
        self.class
    }
    fn rect(&self) -> Rect {
        self.rect
    }
    fn confidence(&self) -> f64 {
        self.confidence
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub class: ClassId,
    #[serde(flatten)]
    pub rect: Rect,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub entries: BTreeMap<String, Vec<GtBox>>,
}

impl GroundTruth {
    pub fn num_boxes(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn class_counts(&self) -> BTreeMap<ClassId, usize> {
        let mut counts = BTreeMap::new();
        for b in self.entries.values().flatten() {
            *counts.entry(b.class).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap5095: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub per_class: BTreeMap<ClassId, ClassMetrics>,
    pub aggregate: AggregateMetrics,
    pub confidence_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Point {
    pub confidence: f64,
    pub f1_per_class: BTreeMap<ClassId, f64>,
    pub f1_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Curve {
    pub classes: Vec<ClassId>,
    pub points: Vec<F1Point>,
}

impl F1Curve {
    /// Confidence of the first grid point attaining the maximum mean F1.
    pub fn argmax_confidence(&self) -> Option<f64> {
        let mut best: Option<&F1Point> = None;
        for p in &self.points {
            if best.is_none_or(|b| p.f1_mean > b.f1_mean) {
                best = Some(p);
            }
        }
        best.map(|p| p.confidence)
    }
}

/// Outcome for one detection after greedy matching.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchOutcome {
    /// Index into the detection slice handed to [`match_detections`].
    pub detection: usize,
    pub confidence: f64,
    pub gt: Option<usize>,
}

impl MatchOutcome {
    pub fn matched(&self) -> bool {
        self.gt.is_some()
    }
}

/// Greedy matching for one image and one class. Detections are visited in
/// descending confidence (stable on input order); each takes the unmatched
/// ground-truth box of highest IoU when that IoU reaches `iou_thresh`.
pub fn match_detections<D: Detection>(dets: &[D], gt: &[Rect], iou_thresh: f64) -> Vec<MatchOutcome> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence().total_cmp(&dets[a].confidence()));
    let mut taken = vec![false; gt.len()];
    order
        .into_iter()
        .map(|i| {
            let r = dets[i].rect();
            let mut best: Option<(usize, f64)> = None;
            for (g, gr) in gt.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let v = r.iou(gr);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((g, v));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            MatchOutcome {
                detection: i,
                confidence: dets[i].confidence(),
                gt: best.map(|(g, _)| g),
            }
        })
        .collect()
}

/// 101-point interpolated average precision.
///
/// `records` are `(confidence, true_positive)` pairs; they are ranked by
/// descending confidence with equal confidences kept in the given order.
pub fn average_precision(records: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 || records.is_empty() {
        return 0.0;
    }
    let mut ranked: Vec<(f64, bool)> = records.to_vec();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut precision = Vec::with_capacity(ranked.len());
    let mut recall = Vec::with_capacity(ranked.len());
    let (mut tp, mut fp) = (0usize, 0usize);
    for (_, hit) in &ranked {
        if *hit {
            tp += 1;
        } else {
            fp += 1;
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    // Precision envelope: best precision at this rank or any later one.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut k = 0;
    for step in 0..RECALL_POINTS {
        let r = step as f64 / (RECALL_POINTS - 1) as f64;
        while k < recall.len() && recall[k] < r {
            k += 1;
        }
        if k < recall.len() {
            sum += precision[k];
        }
    }
    sum / RECALL_POINTS as f64
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Default F1 grid: evenly spaced confidences from 0.0001 to 1.
pub fn default_f1_grid() -> Vec<f64> {
    let n = DEFAULT_F1_GRID_POINTS;
    let lo = DEFAULT_CONFIDENCE_THRESHOLD;
    (0..n)
        .map(|k| {
            if k + 1 == n {
                1.0
            } else {
                lo + k as f64 * (1.0 - lo) / (n - 1) as f64
            }
        })
        .collect()
}

/// Per-class ranked match records across all images, at one IoU threshold.
struct ClassMatches {
    records: Vec<(f64, bool)>,
    num_gt: usize,
}

fn match_all<D: Detection>(
    fused: &BTreeMap<String, Vec<D>>,
    gt: &GroundTruth,
    iou_thresh: f64,
    classes: &BTreeSet<ClassId>,
) -> BTreeMap<ClassId, ClassMatches> {
    let mut out: BTreeMap<ClassId, ClassMatches> = classes
        .iter()
        .map(|c| {
            (
                *c,
                ClassMatches {
                    records: Vec::new(),
                    num_gt: 0,
                },
            )
        })
        .collect();
    let images: BTreeSet<&String> = fused.keys().chain(gt.entries.keys()).collect();
    let empty_d: Vec<D> = Vec::new();
    let empty_g: Vec<GtBox> = Vec::new();
    for image in images {
        let dets = fused.get(image).unwrap_or(&empty_d);
        let gts = gt.entries.get(image).unwrap_or(&empty_g);
        for (class, acc) in out.iter_mut() {
            let d: Vec<&D> = dets.iter().filter(|d| d.class() == *class).collect();
            let g: Vec<Rect> = gts.iter().filter(|g| g.class == *class).map(|g| g.rect).collect();
            acc.num_gt += g.len();
            acc.records.extend(
                match_detections(&d, &g, iou_thresh)
                    .into_iter()
                    .map(|m| (m.confidence, m.matched())),
            );
        }
    }
    // Global ranking; the stable sort keeps image order, then per-image rank.
    for acc in out.values_mut() {
        acc.records.sort_by(|a, b| b.0.total_cmp(&a.0));
    }
    out
}

fn all_classes<D: Detection>(fused: &BTreeMap<String, Vec<D>>, gt: &GroundTruth) -> BTreeSet<ClassId> {
    fused
        .values()
        .flatten()
        .map(|d| d.class())
        .chain(gt.entries.values().flatten().map(|g| g.class))
        .collect()
}

fn above(records: &[(f64, bool)], threshold: f64) -> &[(f64, bool)] {
    // Records are sorted descending, so the kept ones form a prefix.
    let n = records.partition_point(|(c, _)| *c >= threshold);
    &records[..n]
}

fn precision_recall(records: &[(f64, bool)], num_gt: usize) -> (f64, f64) {
    let tp = records.iter().filter(|(_, hit)| *hit).count();
    let p = if records.is_empty() {
        0.0
    } else {
        tp as f64 / records.len() as f64
    };
    let r = if num_gt == 0 {
        0.0
    } else {
        tp as f64 / num_gt as f64
    };
    (p, r)
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores `fused` against `gt`, ignoring detections below
/// `confidence_threshold`.
pub fn evaluate<D: Detection>(
    fused: &BTreeMap<String, Vec<D>>,
    gt: &GroundTruth,
    confidence_threshold: f64,
) -> Result<MetricsReport> {
    if gt.num_boxes() == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let classes = all_classes(fused, gt);
    let gt_classes: BTreeSet<ClassId> = gt.class_counts().into_keys().collect();
    let thresholds = coco_iou_thresholds();
    let per_iou: Vec<BTreeMap<ClassId, ClassMatches>> = thresholds
        .iter()
        .map(|t| match_all(fused, gt, *t, &classes))
        .collect();

    let mut per_class = BTreeMap::new();
    for class in &classes {
        let at = |k: usize| {
            let m = &per_iou[k][class];
            (above(&m.records, confidence_threshold), m.num_gt)
        };
        let (rec50, num_gt) = at(0);
        let (precision, recall) = precision_recall(rec50, num_gt);
        let aps: Vec<f64> = (0..thresholds.len())
            .map(|k| {
                let (r, n) = at(k);
                average_precision(r, n)
            })
            .collect();
        per_class.insert(
            *class,
            ClassMetrics {
                precision,
                recall,
                ap50: aps[0],
                ap5095: mean(aps.iter().copied()),
            },
        );
    }
    let scored = || per_class.iter().filter(|(c, _)| gt_classes.contains(c)).map(|(_, m)| m);
    let aggregate = AggregateMetrics {
        precision: mean(scored().map(|m| m.precision)),
        recall: mean(scored().map(|m| m.recall)),
        map50: mean(scored().map(|m| m.ap50)),
        map5095: mean(scored().map(|m| m.ap5095)),
    };
    Ok(MetricsReport {
        per_class,
        aggregate,
        confidence_threshold,
    })
}

/// F1 at IoU 0.5 for each confidence on `grid`, per class and averaged over
/// the classes present in ground truth.
pub fn f1_curve<D: Detection>(
    fused: &BTreeMap<String, Vec<D>>,
    gt: &GroundTruth,
    grid: &[f64],
) -> Result<F1Curve> {
    if grid.is_empty() {
        return Err(Error::Config("F1 grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("F1 grid must be strictly increasing".into()));
    }
    let gt_classes: BTreeSet<ClassId> = gt.class_counts().into_keys().collect();
    let matches = match_all(fused, gt, PR_IOU, &gt_classes);
    let points = grid
        .iter()
        .map(|&c| {
            let f1_per_class: BTreeMap<ClassId, f64> = matches
                .iter()
                .map(|(class, m)| {
                    let (p, r) = precision_recall(above(&m.records, c), m.num_gt);
                    (*class, f1_score(p, r))
                })
                .collect();
            let f1_mean = mean(f1_per_class.values().copied());
            F1Point {
                confidence: c,
                f1_per_class,
                f1_mean,
            }
        })
        .collect();
    Ok(F1Curve {
        classes: gt_classes.into_iter().collect(),
        points,
    })
}
