//! Ensemble manifest: one JSON document describing classes, sources, target
//! images, gates, label-space filter and fusion parameters.
//!
//! ```json
//! {
//!   "classes": ["pedestrian", "vehicle", "non_motorized"],
//!   "sources": [{"name": "a", "dataset_size": 500, "detections": "a.txt"}],
//!   "target": {"ground_truth": "gt.txt"},
//!   "gates": {"default": 0.8, "classes": {"non_motorized": 0.5}},
//!   "filter": {"mode": "keep_all"},
//!   "fusion": {"iou_threshold": 0.55, "nms_iou_threshold": 0.5},
//!   "evaluation": {"confidence_threshold": 0.0001}
//! }
//! ```
//!
//! Relative paths resolve against the manifest's directory. Unknown keys are
//! rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_CONFIDENCE_THRESHOLD;
use crate::fusion::{
    ConfidenceGates, ConfidenceRescale, FusionParams, LabelSpaceFilter, DEFAULT_NMS_IOU, DEFAULT_SCORE_FLOOR,
    DEFAULT_SOFT_NMS_SIGMA, DEFAULT_WBF_IOU,
};
use crate::geometry::ClassId;
use crate::io::{from_json_str, read_to_string, to_json_string};

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub name: String,
    /// Source training-set size; 1 when omitted.
    #[serde(default = "one")]
    pub dataset_size: u64,
    pub detections: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetEntry {
    /// Explicit target image list; when absent, the union of image ids seen
    /// in the source files and ground truth is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ids: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GatesDoc {
    #[serde(default)]
    default: f64,
    #[serde(default)]
    classes: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "classes", rename_all = "snake_case", deny_unknown_fields)]
enum FilterDoc {
    #[default]
    KeepAll,
    KeepListed(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionSettings {
    /// Clustering threshold for WBF and knowledge vote.
    #[serde(default = "FusionSettings::wbf_iou")]
    pub iou_threshold: f64,
    #[serde(default = "FusionSettings::nms_iou")]
    pub nms_iou_threshold: f64,
    #[serde(default = "FusionSettings::sigma")]
    pub soft_nms_sigma: f64,
    #[serde(default = "FusionSettings::floor")]
    pub score_floor: f64,
    #[serde(default)]
    pub confidence_rescale: ConfidenceRescale,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub model_weights: Vec<f64>,
}

impl FusionSettings {
    fn wbf_iou() -> f64 {
        DEFAULT_WBF_IOU
    }
    fn nms_iou() -> f64 {
        DEFAULT_NMS_IOU
    }
    fn sigma() -> f64 {
        DEFAULT_SOFT_NMS_SIGMA
    }
    fn floor() -> f64 {
        DEFAULT_SCORE_FLOOR
    }

    fn base(&self, iou: f64) -> FusionParams {
        FusionParams {
            iou_threshold: iou,
            soft_nms_sigma: self.soft_nms_sigma,
            score_floor: self.score_floor,
            model_weights: self.model_weights.clone(),
            confidence_rescale: self.confidence_rescale,
        }
    }

    pub fn wbf_params(&self) -> FusionParams {
        self.base(self.iou_threshold)
    }

    pub fn nms_params(&self) -> FusionParams {
        self.base(self.nms_iou_threshold)
    }
}

impl Default for FusionSettings {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_WBF_IOU,
            nms_iou_threshold: DEFAULT_NMS_IOU,
            soft_nms_sigma: DEFAULT_SOFT_NMS_SIGMA,
            score_floor: DEFAULT_SCORE_FLOOR,
            confidence_rescale: ConfidenceRescale::None,
            model_weights: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSettings {
    #[serde(default = "EvaluationSettings::threshold")]
    pub confidence_threshold: f64,
}

impl EvaluationSettings {
    fn threshold() -> f64 {
        DEFAULT_CONFIDENCE_THRESHOLD
    }
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    classes: Vec<String>,
    sources: Vec<SourceEntry>,
    #[serde(default)]
    target: TargetEntry,
    #[serde(default)]
    gates: GatesDoc,
    #[serde(default)]
    filter: FilterDoc,
    #[serde(default)]
    fusion: FusionSettings,
    #[serde(default)]
    evaluation: EvaluationSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

/// A validated manifest with class names resolved to ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleManifest {
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
    pub classes: Vec<String>,
    pub sources: Vec<SourceEntry>,
    pub target: TargetEntry,
    pub gates: ConfidenceGates,
    pub filter: LabelSpaceFilter,
    pub fusion: FusionSettings,
    pub evaluation: EvaluationSettings,
    pub seed: Option<u64>,
}

impl EnsembleManifest {
    pub fn class_id(&self, name: &str) -> Option<ClassId> {
        self.classes.iter().position(|c| c == name).map(|i| ClassId(i as u32))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn ground_truth_path(&self) -> Option<PathBuf> {
        self.target.ground_truth.as_deref().map(|p| self.resolve(p))
    }

    /// Parses and validates manifest JSON without touching the filesystem.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let doc: ManifestDoc = from_json_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
        Self::from_doc(doc, base_dir)
    }

    fn from_doc(doc: ManifestDoc, base_dir: &Path) -> Result<Self> {
        if doc.classes.is_empty() {
            return Err(Error::Config("manifest lists no classes".into()));
        }
        let class_ids: BTreeMap<&str, ClassId> = doc
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), ClassId(i as u32)))
            .collect();
        if class_ids.len() != doc.classes.len() {
            return Err(Error::Config("duplicate class name in manifest".into()));
        }
        let lookup = |name: &str, what: &str| {
            class_ids
                .get(name)
                .copied()
                .ok_or_else(|| Error::Config(format!("{what} references unknown class `{name}`")))
        };

        if doc.sources.is_empty() {
            return Err(Error::Config("manifest lists no sources".into()));
        }
        let mut names = BTreeSet::new();
        for s in &doc.sources {
            if !names.insert(s.name.as_str()) {
                return Err(Error::Config(format!("duplicate source name `{}`", s.name)));
            }
            if s.dataset_size == 0 {
                return Err(Error::Config(format!("source `{}` has dataset_size 0", s.name)));
            }
        }

        let mut gates = ConfidenceGates::uniform(doc.gates.default);
        for (name, g) in &doc.gates.classes {
            gates.gates.insert(lookup(name, "gate")?, *g);
        }
        gates.validate()?;

        let filter = match &doc.filter {
            FilterDoc::KeepAll => LabelSpaceFilter::KeepAll,
            FilterDoc::KeepListed(list) => LabelSpaceFilter::keep_listed(
                list.iter().map(|n| lookup(n, "filter")).collect::<Result<Vec<_>>>()?,
            )?,
        };

        if !doc.fusion.model_weights.is_empty() && doc.fusion.model_weights.len() != doc.sources.len() {
            return Err(Error::Config(format!(
                "fusion.model_weights has {} entries for {} sources",
                doc.fusion.model_weights.len(),
                doc.sources.len()
            )));
        }
        doc.fusion.wbf_params().validate()?;
        doc.fusion.nms_params().validate()?;

        Ok(Self {
            base_dir: base_dir.to_path_buf(),
            classes: doc.classes,
            sources: doc.sources,
            target: doc.target,
            gates,
            filter,
            fusion: doc.fusion,
            evaluation: doc.evaluation,
            seed: doc.seed,
        })
    }

    fn to_doc(&self) -> ManifestDoc {
        let name = |c: &ClassId| self.classes[c.0 as usize].clone();
        ManifestDoc {
            classes: self.classes.clone(),
            sources: self.sources.clone(),
            target: self.target.clone(),
            gates: GatesDoc {
                default: self.gates.default_gate,
                classes: self.gates.gates.iter().map(|(c, g)| (name(c), *g)).collect(),
            },
            filter: match &self.filter {
                LabelSpaceFilter::KeepAll => FilterDoc::KeepAll,
                LabelSpaceFilter::KeepListed(set) => FilterDoc::KeepListed(set.iter().map(name).collect()),
            },
            fusion: self.fusion.clone(),
            evaluation: self.evaluation.clone(),
            seed: self.seed,
        }
    }

    /// Canonical JSON (sorted keys, fixed float format).
    pub fn to_json(&self) -> String {
        to_json_string(&self.to_doc())
    }
}

/// Reads, validates and checks that every referenced file exists.
pub fn parse_manifest(path: &Path) -> Result<EnsembleManifest> {
    let text = read_to_string(path).map_err(|e| Error::Config(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let m = EnsembleManifest::from_json(&text, base)?;
    let mut referenced: Vec<PathBuf> = m.sources.iter().map(|s| m.resolve(&s.detections)).collect();
    referenced.extend(m.ground_truth_path());
    if let Some(missing) = referenced.iter().find(|p| !p.exists()) {
        return Err(Error::Config(format!(
            "{}: referenced file {} does not exist",
            path.display(),
            missing.display()
        )));
    }
    Ok(m)
}
