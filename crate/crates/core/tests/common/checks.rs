//! Fusion properties as reusable checks. Each returns a description of the
//! first violation it finds.

use ensemble_fusion::fusion::{
    apply_gates, knowledge_vote, nms, wbf, ConfidenceGates, ConfidenceRescale, FusedBox, FusionParams,
    LabelSpaceFilter,
};
use ensemble_fusion::{BBox, DetectionSet};

pub type Check = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Bit-exact identity of a fused box without member provenance.
pub type Key = (u32, [u64; 4], u64, usize);

pub fn key(f: &FusedBox) -> Key {
    (
        f.class.0,
        f.rect.as_array().map(f64::to_bits),
        f.confidence.to_bits(),
        f.support,
    )
}

pub fn multiset(fused: &[FusedBox]) -> Vec<Key> {
    let mut v: Vec<Key> = fused.iter().map(key).collect();
    v.sort();
    v
}

fn box_key(b: &BBox) -> Key {
    (b.class.0, b.rect.as_array().map(f64::to_bits), b.confidence.to_bits(), 1)
}

fn fuse(models: &[DetectionSet], weights: Vec<f64>) -> Result<Vec<FusedBox>, String> {
    wbf(models, &FusionParams::default().with_weights(weights)).map_err(|e| e.to_string())
}

/// WBF on one model whose same-class boxes pairwise overlap by at most the
/// clustering threshold returns its input.
pub fn single_model_identity(set: &DetectionSet) -> Check {
    let out = wbf(std::slice::from_ref(set), &FusionParams::default()).map_err(|e| e.to_string())?;
    let mut want: Vec<Key> = set.boxes.iter().filter(|b| b.has_area()).map(box_key).collect();
    want.sort();
    ensure(multiset(&out) == want, || format!("output {out:?} differs from input {set:?}"))
}

/// Knowledge vote with zero gates and no label filter is plain WBF.
pub fn uniform_weight_reduction(models: &[DetectionSet], params: &FusionParams) -> Check {
    let a = knowledge_vote(models, &ConfidenceGates::uniform(0.0), &LabelSpaceFilter::KeepAll, params)
        .map_err(|e| e.to_string())?;
    let b = wbf(models, params).map_err(|e| e.to_string())?;
    ensure(a == b, || "knowledge vote with zero gates differs from wbf".into())
}

pub fn weight_scale_invariance(models: &[DetectionSet], weights: &[f64], scale: f64) -> Check {
    let base = fuse(models, weights.to_vec())?;
    let scaled = fuse(models, weights.iter().map(|w| w * scale).collect())?;
    ensure(multiset(&base) == multiset(&scaled), || {
        format!("scaling weights by {scale} changed the output")
    })
}

/// Output after reordering models (and their weights) by `perm`, with member
/// model positions mapped back, equals the original.
pub fn permutation_invariance(models: &[DetectionSet], weights: &[f64], perm: &[usize]) -> Check {
    let base = fuse(models, weights.to_vec())?;
    let pm: Vec<DetectionSet> = perm.iter().map(|&i| models[i].clone()).collect();
    let pw: Vec<f64> = perm.iter().map(|&i| weights[i]).collect();
    let permuted = fuse(&pm, pw)?;
    ensure(multiset(&base) == multiset(&permuted), || format!("permutation {perm:?} changed the boxes"))?;
    let members = |fused: &[FusedBox], map: &dyn Fn(usize) -> usize| {
        let mut v: Vec<(Key, Vec<(usize, Key)>)> = fused
            .iter()
            .map(|f| {
                let mut m: Vec<(usize, Key)> =
                    f.members.iter().map(|m| (map(m.model), box_key(&m.detection))).collect();
                m.sort();
                (key(f), m)
            })
            .collect();
        v.sort();
        v
    };
    ensure(
        members(&base, &|m| m) == members(&permuted, &|m| perm[m]),
        || format!("permutation {perm:?} changed cluster membership"),
    )
}

pub fn gate_idempotence(set: &DetectionSet, gates: &ConfidenceGates, filter: &LabelSpaceFilter) -> Check {
    let once = apply_gates(set, gates, filter);
    let twice = apply_gates(&once, gates, filter);
    ensure(once == twice, || "gating twice removed more boxes".into())
}

pub fn gate_membership(models: &[DetectionSet], gates: &ConfidenceGates, filter: &LabelSpaceFilter) -> Check {
    let out = knowledge_vote(models, gates, filter, &FusionParams::default()).map_err(|e| e.to_string())?;
    for f in &out {
        ensure(filter.admits(f.class), || format!("class {} is outside the label space", f.class))?;
        for m in &f.members {
            ensure(m.detection.confidence >= gates.gate(f.class), || {
                format!("member {:?} is below the gate of class {}", m.detection, f.class)
            })?;
        }
    }
    Ok(())
}

pub fn nms_antichain(set: &DetectionSet, iou: f64) -> Check {
    let out = nms(set, &FusionParams::default().with_iou_threshold(iou)).map_err(|e| e.to_string())?;
    for (i, a) in out.boxes.iter().enumerate() {
        for b in &out.boxes[i + 1..] {
            ensure(a.class != b.class || a.iou(b) <= iou, || format!("{a:?} and {b:?} both survived"))?;
        }
    }
    Ok(())
}

/// Coordinate containment, confidence bounds, and support-ratio rescaling
/// never raising a confidence.
pub fn wbf_bounds(models: &[DetectionSet], weights: &[f64]) -> Check {
    let plain = fuse(models, weights.to_vec())?;
    for f in &plain {
        let coords = f.rect.as_array();
        for (k, c) in coords.iter().enumerate() {
            let vals = f.members.iter().map(|m| m.detection.rect.as_array()[k]);
            let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            ensure(lo <= *c && *c <= hi, || format!("coordinate {k} = {c} outside [{lo}, {hi}]"))?;
        }
        let confs = f.members.iter().map(|m| m.detection.confidence);
        let (lo, hi) = confs.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
        ensure(lo <= f.confidence && f.confidence <= hi, || {
            format!("confidence {} outside [{lo}, {hi}]", f.confidence)
        })?;
    }
    let params = FusionParams::default()
        .with_weights(weights.to_vec())
        .with_rescale(ConfidenceRescale::SupportRatio);
    let rescaled = wbf(models, &params).map_err(|e| e.to_string())?;
    // Same clusters, so compare after sorting by geometry.
    let by_geom = |v: &[FusedBox]| {
        let mut k: Vec<(u32, [u64; 4], usize, f64)> = v
            .iter()
            .map(|f| (f.class.0, f.rect.as_array().map(f64::to_bits), f.support, f.confidence))
            .collect();
        k.sort_by(|a, b| (a.0, a.1, a.2).cmp(&(b.0, b.1, b.2)));
        k
    };
    let (a, b) = (by_geom(&plain), by_geom(&rescaled));
    ensure(a.len() == b.len(), || "rescaling changed the cluster count".into())?;
    for (p, r) in a.iter().zip(&b) {
        ensure(r.3 <= p.3, || format!("rescaling raised confidence {} to {}", p.3, r.3))?;
    }
    Ok(())
}
