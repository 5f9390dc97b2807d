//! Source contribution weighting by consensus focus.
//!
//! Consensus quality of a subset of sources is the sum, over every target
//! image and every fused box produced from that subset, of support count
//! times fused confidence. A source's consensus focus is how much the quality
//! of the full ensemble drops when that source is left out. Weights are then
//! proportional to `dataset_size * focus`, scaled so that together with the
//! target-set share they sum to one.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{knowledge_vote, ConfidenceGates, ConfidenceRescale, FusedBox, FusionParams, LabelSpaceFilter};
use crate::geometry::DetectionSet;

/// Floor applied to consensus focus before weighting.
pub const CF_EPSILON: f64 = 1e-9;

/// Largest ensemble for which exact Shapley enumeration is allowed.
pub const MAX_SHAPLEY_SOURCES: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct SourceDomain {
    /// 1-based id; boxes carry `source_id - 1` as their source index.
    pub source_id: u32,
    pub name: String,
    pub dataset_size: u64,
    pub detections: BTreeMap<String, DetectionSet>,
}

impl SourceDomain {
    pub fn new(
        source_id: u32,
        name: impl Into<String>,
        dataset_size: u64,
        detections: BTreeMap<String, DetectionSet>,
    ) -> Self {
        let index = source_id.saturating_sub(1) as usize;
        let detections = detections
            .into_iter()
            .map(|(k, v)| (k, v.with_source(index)))
            .collect();
        Self {
            source_id,
            name: name.into(),
            dataset_size,
            detections,
        }
    }

    pub fn detections_for(&self, image_id: &str) -> DetectionSet {
        self.detections
            .get(image_id)
            .cloned()
            .unwrap_or_else(|| DetectionSet::empty(image_id))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceEnsemble {
    pub sources: Vec<SourceDomain>,
    pub target_image_ids: Vec<String>,
}

impl SourceEnsemble {
    pub fn new(sources: Vec<SourceDomain>, target_image_ids: Vec<String>) -> Result<Self> {
        let e = Self {
            sources,
            target_image_ids,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Config("ensemble has no sources".into()));
        }
        for (i, s) in self.sources.iter().enumerate() {
            if s.source_id as usize != i + 1 {
                return Err(Error::Config(format!(
                    "source ids must be contiguous from 1, found {} at position {}",
                    s.source_id,
                    i + 1
                )));
            }
            if s.dataset_size == 0 {
                return Err(Error::Config(format!("source `{}` has dataset_size 0", s.name)));
            }
            if let Some(b) = s
                .detections
                .values()
                .flat_map(|d| &d.boxes)
                .find(|b| b.source != i)
            {
                return Err(Error::Config(format!(
                    "source `{}` holds a box tagged with source index {}",
                    s.name, b.source
                )));
            }
        }
        if self.target_image_ids.is_empty() {
            return Err(Error::Config("target image set is empty".into()));
        }
        Ok(())
    }

    pub fn target_size(&self) -> u64 {
        self.target_image_ids.len() as u64
    }

    pub fn source_sizes(&self) -> BTreeMap<u32, u64> {
        self.sources
            .iter()
            .map(|s| (s.source_id, s.dataset_size))
            .collect()
    }
}

/// Gating and fusion settings shared by every consensus pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionSetup {
    pub gates: ConfidenceGates,
    pub filter: LabelSpaceFilter,
    pub params: FusionParams,
}

/// Leave-one-out scores before weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct FocusScores {
    pub q_full: f64,
    pub q_leave_one_out: BTreeMap<u32, f64>,
    pub cf: BTreeMap<u32, f64>,
    pub cf_clamped: BTreeMap<u32, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContributionReport {
    pub source_names: BTreeMap<u32, String>,
    pub q_full: f64,
    pub q_leave_one_out: BTreeMap<u32, f64>,
    pub cf: BTreeMap<u32, f64>,
    pub cf_clamped: BTreeMap<u32, f64>,
    pub alpha_extended: f64,
    pub alpha: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapley: Option<BTreeMap<u32, f64>>,
}

impl ContributionReport {
    /// Per-source fusion weights in source order.
    pub fn weights(&self) -> Vec<f64> {
        self.alpha.values().copied().collect()
    }
}

fn quality_params(setup: &FusionSetup, n: usize) -> FusionSetup {
    FusionSetup {
        gates: setup.gates.clone(),
        filter: setup.filter.clone(),
        params: FusionParams {
            model_weights: vec![1.0; n],
            confidence_rescale: ConfidenceRescale::None,
            ..setup.params.clone()
        },
    }
}

fn image_quality(subset: &[&SourceDomain], image_id: &str, setup: &FusionSetup) -> Result<f64> {
    let per_model: Vec<DetectionSet> = subset.iter().map(|s| s.detections_for(image_id)).collect();
    let fused = knowledge_vote(&per_model, &setup.gates, &setup.filter, &setup.params)?;
    Ok(fused
        .iter()
        .map(|f| f.support as f64 * f.confidence)
        .sum())
}

/// Per-image qualities for several subsets at once, evaluated in parallel
/// and returned in (subset, image) order.
fn subset_qualities(
    subsets: &[Vec<&SourceDomain>],
    image_ids: &[String],
    setup: &FusionSetup,
) -> Result<Vec<f64>> {
    let setups: Vec<FusionSetup> = subsets.iter().map(|s| quality_params(setup, s.len())).collect();
    let per_image: Vec<f64> = (0..subsets.len() * image_ids.len())
        .into_par_iter()
        .map(|k| {
            let (s, i) = (k / image_ids.len(), k % image_ids.len());
            image_quality(&subsets[s], &image_ids[i], &setups[s])
        })
        .collect::<Result<_>>()?;
    // Fixed summation order: image order within each subset.
    Ok(per_image
        .chunks(image_ids.len().max(1))
        .map(|c| c.iter().sum())
        .collect())
}

/// Consensus quality of `subset` over the target images.
///
/// Fusion runs with uniform weights over the subset and without support-ratio
/// rescaling, whatever `setup.params` says about those two fields.
pub fn consensus_quality(
    subset: &[&SourceDomain],
    target_image_ids: &[String],
    setup: &FusionSetup,
) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::EmptySubset);
    }
    if target_image_ids.is_empty() {
        return Ok(0.0);
    }
    Ok(subset_qualities(&[subset.to_vec()], target_image_ids, setup)?[0])
}

fn leave_out<'a>(ensemble: &'a SourceEnsemble, skip: usize) -> Vec<&'a SourceDomain> {
    ensemble
        .sources
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != skip)
        .map(|(_, s)| s)
        .collect()
}

/// Consensus focus of every source: `Q(S) - Q(S without i)`.
pub fn consensus_focus_scores(ensemble: &SourceEnsemble, setup: &FusionSetup) -> Result<FocusScores> {
    ensemble.validate()?;
    let n = ensemble.sources.len();
    if n < 2 {
        return Err(Error::DegenerateEnsemble(n));
    }
    let mut subsets = vec![ensemble.sources.iter().collect::<Vec<_>>()];
    subsets.extend((0..n).map(|i| leave_out(ensemble, i)));
    let q = subset_qualities(&subsets, &ensemble.target_image_ids, setup)?;

    let q_full = q[0];
    let mut scores = FocusScores {
        q_full,
        q_leave_one_out: BTreeMap::new(),
        cf: BTreeMap::new(),
        cf_clamped: BTreeMap::new(),
    };
    for (s, q_loo) in ensemble.sources.iter().zip(&q[1..]) {
        let cf = q_full - q_loo;
        scores.q_leave_one_out.insert(s.source_id, *q_loo);
        scores.cf.insert(s.source_id, cf);
        scores.cf_clamped.insert(s.source_id, cf.max(CF_EPSILON));
    }
    Ok(scores)
}

/// Share of the target set, `M_T / (M_T + sum M_i)`.
pub fn alpha_extended(source_sizes: &BTreeMap<u32, u64>, target_size: u64) -> f64 {
    let total: u64 = source_sizes.values().sum();
    target_size as f64 / (target_size + total) as f64
}

/// Turns focus scores into normalized source weights.
pub fn compute_weights(
    scores: &FocusScores,
    source_sizes: &BTreeMap<u32, u64>,
    target_size: u64,
) -> Result<ContributionReport> {
    if target_size == 0 {
        return Err(Error::Config("target set size must be at least 1".into()));
    }
    if let Some((id, _)) = source_sizes.iter().find(|(_, m)| **m == 0) {
        return Err(Error::Config(format!("source {id} has dataset size 0")));
    }
    let mut products = BTreeMap::new();
    for (id, cf) in &scores.cf_clamped {
        let size = source_sizes
            .get(id)
            .ok_or_else(|| Error::Config(format!("no dataset size for source {id}")))?;
        products.insert(*id, *size as f64 * cf);
    }
    let total: f64 = products.values().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroContribution);
    }
    let ext = alpha_extended(source_sizes, target_size);
    let alpha = products
        .iter()
        .map(|(id, p)| (*id, (1.0 - ext) * p / total))
        .collect();
    Ok(ContributionReport {
        source_names: BTreeMap::new(),
        q_full: scores.q_full,
        q_leave_one_out: scores.q_leave_one_out.clone(),
        cf: scores.cf.clone(),
        cf_clamped: scores.cf_clamped.clone(),
        alpha_extended: ext,
        alpha,
        shapley: None,
    })
}

/// Leave-one-out scoring and weighting in one call.
pub fn contribution_report(ensemble: &SourceEnsemble, setup: &FusionSetup) -> Result<ContributionReport> {
    let scores = consensus_focus_scores(ensemble, setup)?;
    let mut report = compute_weights(&scores, &ensemble.source_sizes(), ensemble.target_size())?;
    report.source_names = ensemble
        .sources
        .iter()
        .map(|s| (s.source_id, s.name.clone()))
        .collect();
    Ok(report)
}

/// Exact Shapley values of consensus quality, enumerating all `2^I` subsets.
pub fn shapley_values(ensemble: &SourceEnsemble, setup: &FusionSetup) -> Result<BTreeMap<u32, f64>> {
    ensemble.validate()?;
    let n = ensemble.sources.len();
    if n > MAX_SHAPLEY_SOURCES {
        return Err(Error::Config(format!(
            "exact Shapley enumeration is limited to {MAX_SHAPLEY_SOURCES} sources, got {n}"
        )));
    }
    let masks: Vec<usize> = (1..1usize << n).collect();
    let subsets: Vec<Vec<&SourceDomain>> = masks
        .iter()
        .map(|m| {
            ensemble
                .sources
                .iter()
                .enumerate()
                .filter(|(i, _)| m & (1 << i) != 0)
                .map(|(_, s)| s)
                .collect()
        })
        .collect();
    let mut q = vec![0.0; 1 << n];
    for (m, v) in masks
        .iter()
        .zip(subset_qualities(&subsets, &ensemble.target_image_ids, setup)?)
    {
        q[*m] = v;
    }

    // weight(|S|) = |S|! (n - |S| - 1)! / n!
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    let coef: Vec<f64> = (0..n)
        .map(|s| fact(s) * fact(n - s - 1) / fact(n))
        .collect();
    let mut out = BTreeMap::new();
    for (i, src) in ensemble.sources.iter().enumerate() {
        let bit = 1usize << i;
        let phi: f64 = (0..1usize << n)
            .filter(|m| m & bit == 0)
            .map(|m| coef[m.count_ones() as usize] * (q[m | bit] - q[m]))
            .sum();
        out.insert(src.source_id, phi);
    }
    Ok(out)
}

/// Final fusion pass with each source weighted by its `alpha`.
pub fn weighted_fusion(
    ensemble: &SourceEnsemble,
    report: &ContributionReport,
    setup: &FusionSetup,
) -> Result<BTreeMap<String, Vec<FusedBox>>> {
    let weights: Vec<f64> = ensemble
        .sources
        .iter()
        .map(|s| {
            report
                .alpha
                .get(&s.source_id)
                .copied()
                .ok_or_else(|| Error::Config(format!("report has no weight for source {}", s.source_id)))
        })
        .collect::<Result<_>>()?;
    let params = setup.params.clone().with_weights(weights);
    fuse_ensemble(ensemble, &setup.gates, &setup.filter, &params)
}

/// Knowledge vote over every target image with the given parameters.
pub fn fuse_ensemble(
    ensemble: &SourceEnsemble,
    gates: &ConfidenceGates,
    filter: &LabelSpaceFilter,
    params: &FusionParams,
) -> Result<BTreeMap<String, Vec<FusedBox>>> {
    let fused: Vec<(String, Vec<FusedBox>)> = ensemble
        .target_image_ids
        .par_iter()
        .map(|id| {
            let per_model: Vec<DetectionSet> =
                ensemble.sources.iter().map(|s| s.detections_for(id)).collect();
            knowledge_vote(&per_model, gates, filter, params).map(|f| (id.clone(), f))
        })
        .collect::<Result<_>>()?;
    Ok(fused.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSourceInfo {
    pub source_id: u32,
    pub name: String,
    pub dataset_size: u64,
}

/// Where a pseudo-label dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub setup: FusionSetup,
    pub sources: Vec<EnsembleSourceInfo>,
    pub image_ids: Vec<String>,
}

impl Provenance {
    pub fn from_ensemble(ensemble: &SourceEnsemble, setup: FusionSetup) -> Self {
        Self {
            setup,
            sources: ensemble
                .sources
                .iter()
                .map(|s| EnsembleSourceInfo {
                    source_id: s.source_id,
                    name: s.name.clone(),
                    dataset_size: s.dataset_size,
                })
                .collect(),
            image_ids: ensemble.target_image_ids.clone(),
        }
    }
}

/// Target images paired with their fused boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelDataset {
    pub entries: BTreeMap<String, Vec<FusedBox>>,
    pub provenance: Provenance,
}

/// Packages fused output for every target image listed in `provenance`.
pub fn emit_pseudo_labels(
    fused: &BTreeMap<String, Vec<FusedBox>>,
    provenance: Provenance,
) -> Result<PseudoLabelDataset> {
    let entries = provenance
        .image_ids
        .iter()
        .map(|id| {
            fused
                .get(id)
                .map(|boxes| (id.clone(), boxes.clone()))
                .ok_or_else(|| Error::MissingImage(id.clone()))
        })
        .collect::<Result<_>>()?;
    Ok(PseudoLabelDataset { entries, provenance })
}
