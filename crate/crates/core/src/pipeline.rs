//! End-to-end driver behind the `efuse` subcommands: load a manifest, run a
//! fusion algorithm, score consensus, evaluate, and write artifacts.
//!
//! Every stage reads its inputs from disk, so `run_pipeline` produces the
//! same files as calling the stages one by one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::Serialize;

use crate::consensus::{
    contribution_report, emit_pseudo_labels, fuse_ensemble, shapley_values, weighted_fusion, ContributionReport,
    FusionSetup, Provenance, PseudoLabelDataset, SourceDomain, SourceEnsemble,
};
use crate::error::{Error, Result};
use crate::eval::{default_f1_grid, evaluate, f1_curve, F1Curve, GroundTruth, MetricsReport};
use crate::fusion::gates::passes;
use crate::fusion::{nms, soft_nms, ConfidenceGates, ConfidenceRescale, FusedBox, FusedMember, LabelSpaceFilter};
use crate::geometry::{ClassId, DetectionSet};
use crate::io::{
    format_detections, format_fused, format_ground_truth, parse_detections, parse_fused_str, parse_ground_truth,
    parse_manifest, to_json_string, write_file, write_report, EnsembleManifest, EvaluationSettings, FusionSettings,
    Report, SourceEntry, TargetEntry,
};
use crate::synth::{generate, ScenarioSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Algorithm {
    Nms,
    SoftNms,
    Wbf,
    KnowledgeVote,
    ConsensusWbf,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Nms,
        Algorithm::SoftNms,
        Algorithm::Wbf,
        Algorithm::KnowledgeVote,
        Algorithm::ConsensusWbf,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Nms => "nms",
            Algorithm::SoftNms => "soft-nms",
            Algorithm::Wbf => "wbf",
            Algorithm::KnowledgeVote => "knowledge-vote",
            Algorithm::ConsensusWbf => "consensus-wbf",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|a| a.as_str() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|a| a.as_str()).collect();
            Error::Config(format!("unknown algorithm `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

/// Command-line adjustments applied on top of a manifest.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    /// Sets both the clustering and the suppression threshold.
    pub iou_threshold: Option<f64>,
    pub confidence_threshold: Option<f64>,
    /// `key=value` pairs: `iou_threshold`, `nms_iou_threshold`,
    /// `soft_nms_sigma`, `score_floor`, `confidence_rescale`,
    /// `confidence_threshold`, `gate.default`, `gate.<class name>`.
    pub set: Vec<String>,
}

fn number(key: &str, v: &str) -> Result<f64> {
    v.parse()
        .map_err(|_| Error::Config(format!("override `{key}` expects a number, got `{v}`")))
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self == &Self::default()
    }

    pub fn apply(&self, m: &mut EnsembleManifest) -> Result<()> {
        if let Some(t) = self.iou_threshold {
            m.fusion.iou_threshold = t;
            m.fusion.nms_iou_threshold = t;
        }
        if let Some(t) = self.confidence_threshold {
            m.evaluation.confidence_threshold = t;
        }
        for kv in &self.set {
            let (key, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
            match key {
                "iou_threshold" => m.fusion.iou_threshold = number(key, v)?,
                "nms_iou_threshold" => m.fusion.nms_iou_threshold = number(key, v)?,
                "soft_nms_sigma" => m.fusion.soft_nms_sigma = number(key, v)?,
                "score_floor" => m.fusion.score_floor = number(key, v)?,
                "confidence_threshold" => m.evaluation.confidence_threshold = number(key, v)?,
                "confidence_rescale" => {
                    m.fusion.confidence_rescale = match v {
                        "none" => ConfidenceRescale::None,
                        "support_ratio" => ConfidenceRescale::SupportRatio,
                        _ => return Err(Error::Config(format!("confidence_rescale must be none or support_ratio, got `{v}`"))),
                    }
                }
                "gate.default" => m.gates.default_gate = number(key, v)?,
                _ => match key.strip_prefix("gate.") {
                    Some(name) => {
                        let class = m
                            .class_id(name)
                            .ok_or_else(|| Error::Config(format!("override references unknown class `{name}`")))?;
                        m.gates.gates.insert(class, number(key, v)?);
                    }
                    None => return Err(Error::Config(format!("unknown override key `{key}`"))),
                },
            }
        }
        m.gates.validate()?;
        m.fusion.wbf_params().validate()?;
        m.fusion.nms_params().validate()?;
        let t = m.evaluation.confidence_threshold;
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::Config(format!("confidence threshold must be >= 0, got {t}")));
        }
        Ok(())
    }
}

/// A manifest with every referenced file loaded.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub manifest: EnsembleManifest,
    pub ensemble: SourceEnsemble,
    pub ground_truth: Option<GroundTruth>,
    /// Zero-area boxes dropped while parsing, per source.
    pub zero_area_dropped: Vec<usize>,
}

impl Workspace {
    pub fn load(manifest_path: &Path, overrides: &Overrides) -> Result<Self> {
        let mut manifest = parse_manifest(manifest_path)?;
        overrides.apply(&mut manifest)?;
        Self::from_manifest(manifest)
    }

    pub fn from_manifest(manifest: EnsembleManifest) -> Result<Self> {
        let mut sources = Vec::with_capacity(manifest.sources.len());
        let mut zero_area_dropped = Vec::new();
        for (i, s) in manifest.sources.iter().enumerate() {
            let file = parse_detections(&manifest.resolve(&s.detections))?;
            zero_area_dropped.push(file.zero_area_dropped);
            sources.push(SourceDomain::new(i as u32 + 1, s.name.clone(), s.dataset_size, file.sets));
        }
        let ground_truth = manifest.ground_truth_path().map(|p| parse_ground_truth(&p)).transpose()?;
        let image_ids = match &manifest.target.image_ids {
            Some(ids) => ids.clone(),
            None => {
                let mut ids: Vec<String> = sources
                    .iter()
                    .flat_map(|s| s.detections.keys().cloned())
                    .chain(ground_truth.iter().flat_map(|g| g.entries.keys().cloned()))
                    .collect();
                ids.sort();
                ids.dedup();
                ids
            }
        };
        let ensemble = SourceEnsemble::new(sources, image_ids)?;
        Ok(Self {
            manifest,
            ensemble,
            ground_truth,
            zero_area_dropped,
        })
    }

    pub fn setup(&self) -> FusionSetup {
        FusionSetup {
            gates: self.manifest.gates.clone(),
            filter: self.manifest.filter.clone(),
            params: self.manifest.fusion.wbf_params(),
        }
    }

    fn class_name(&self, c: ClassId) -> String {
        self.manifest
            .classes
            .get(c.0 as usize)
            .cloned()
            .unwrap_or_else(|| format!("class_{c}"))
    }

    fn pooled(&self, id: &str) -> DetectionSet {
        let sets: Vec<DetectionSet> = self.ensemble.sources.iter().map(|s| s.detections_for(id)).collect();
        DetectionSet::pooled(id, &sets)
    }
}

pub type FusedImages = BTreeMap<String, Vec<FusedBox>>;

fn singletons(set: DetectionSet) -> Vec<FusedBox> {
    set.boxes
        .into_iter()
        .map(|b| FusedBox {
            class: b.class,
            rect: b.rect,
            confidence: b.confidence,
            support: 1,
            members: vec![FusedMember {
                model: b.source,
                detection: b,
            }],
        })
        .collect()
}

/// Output of the consensus stage.
#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub report: ContributionReport,
    pub fused: FusedImages,
    pub pseudo_labels: PseudoLabelDataset,
}

pub fn run_consensus(ws: &Workspace, shapley: bool) -> Result<ConsensusOutcome> {
    let setup = ws.setup();
    let mut report = contribution_report(&ws.ensemble, &setup)?;
    if shapley {
        report.shapley = Some(shapley_values(&ws.ensemble, &setup)?);
    }
    let fused = weighted_fusion(&ws.ensemble, &report, &setup)?;
    let mut applied = setup;
    applied.params.model_weights = report.weights();
    let pseudo_labels = emit_pseudo_labels(&fused, Provenance::from_ensemble(&ws.ensemble, applied))?;
    Ok(ConsensusOutcome {
        report,
        fused,
        pseudo_labels,
    })
}

/// Runs one algorithm over every target image. NMS variants pool all
/// sources; `wbf` ignores gates and the label-space filter.
pub fn run_algorithm(ws: &Workspace, algo: Algorithm) -> Result<FusedImages> {
    use rayon::prelude::*;
    let ids = &ws.ensemble.target_image_ids;
    let per_image = |f: &(dyn Fn(DetectionSet) -> Result<DetectionSet> + Sync)| -> Result<FusedImages> {
        let out: Vec<(String, Vec<FusedBox>)> = ids
            .par_iter()
            .map(|id| f(ws.pooled(id)).map(|s| (id.clone(), singletons(s))))
            .collect::<Result<_>>()?;
        Ok(out.into_iter().collect())
    };
    match algo {
        Algorithm::Nms => {
            let params = ws.manifest.fusion.nms_params();
            per_image(&|s| nms(&s, &params))
        }
        Algorithm::SoftNms => {
            let params = ws.manifest.fusion.nms_params();
            per_image(&|s| soft_nms(&s, &params))
        }
        Algorithm::Wbf => fuse_ensemble(
            &ws.ensemble,
            &ConfidenceGates::default(),
            &LabelSpaceFilter::KeepAll,
            &ws.manifest.fusion.wbf_params(),
        ),
        Algorithm::KnowledgeVote => {
            let s = ws.setup();
            fuse_ensemble(&ws.ensemble, &s.gates, &s.filter, &s.params)
        }
        Algorithm::ConsensusWbf => Ok(run_consensus(ws, false)?.fused),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SourceSummary {
    pub name: String,
    pub input_boxes: usize,
    pub gate_dropped: usize,
    pub zero_area_dropped: usize,
}

/// Run summary written next to fused detections.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FuseSummary {
    pub algorithm: String,
    pub images: usize,
    pub sources: Vec<SourceSummary>,
    pub output_boxes: usize,
    pub output_by_class: BTreeMap<String, usize>,
}

pub fn fuse_summary(ws: &Workspace, algo: Algorithm, fused: &FusedImages) -> FuseSummary {
    let gated = matches!(algo, Algorithm::KnowledgeVote | Algorithm::ConsensusWbf);
    let ids = &ws.ensemble.target_image_ids;
    let sources = ws
        .ensemble
        .sources
        .iter()
        .zip(&ws.zero_area_dropped)
        .map(|(s, zero)| {
            let boxes = || ids.iter().filter_map(|id| s.detections.get(id)).flat_map(|d| &d.boxes);
            SourceSummary {
                name: s.name.clone(),
                input_boxes: boxes().count(),
                gate_dropped: if gated {
                    boxes().filter(|b| !passes(b, &ws.manifest.gates, &ws.manifest.filter)).count()
                } else {
                    0
                },
                zero_area_dropped: *zero,
            }
        })
        .collect();
    let mut output_by_class = BTreeMap::new();
    for f in fused.values().flatten() {
        *output_by_class.entry(ws.class_name(f.class)).or_insert(0) += 1;
    }
    FuseSummary {
        algorithm: algo.to_string(),
        images: ids.len(),
        sources,
        output_boxes: fused.values().map(Vec::len).sum(),
        output_by_class,
    }
}

pub const FUSED_FILE: &str = "fused.txt";
pub const SUMMARY_FILE: &str = "summary.json";
pub const REPORT_FILE: &str = "contribution_report.json";
pub const PSEUDO_LABEL_FILE: &str = "pseudo_labels.txt";
pub const METRICS_FILE: &str = "metrics.json";
pub const F1_FILE: &str = "f1_curve.csv";

/// `fuse`: writes `fused.txt` and `summary.json` under `out`.
pub fn cmd_fuse(ws: &Workspace, algo: Algorithm, out: &Path) -> Result<FuseSummary> {
    let fused = run_algorithm(ws, algo)?;
    let summary = fuse_summary(ws, algo, &fused);
    write_file(&out.join(FUSED_FILE), &format_fused(&fused, false))?;
    write_file(&out.join(SUMMARY_FILE), &to_json_string(&summary))?;
    Ok(summary)
}

/// `consensus`: contribution report, weighted fused detections and the
/// pseudo-label dataset.
pub fn cmd_consensus(ws: &Workspace, shapley: bool, out: &Path) -> Result<ConsensusOutcome> {
    let outcome = run_consensus(ws, shapley)?;
    write_report(Report::Contribution(&outcome.report), &out.join(REPORT_FILE))?;
    write_file(&out.join(FUSED_FILE), &format_fused(&outcome.fused, false))?;
    write_report(Report::PseudoLabels(&outcome.pseudo_labels), &out.join(PSEUDO_LABEL_FILE))?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub metrics: MetricsReport,
    pub f1: F1Curve,
}

pub fn evaluate_fused(ws: &Workspace, fused: &FusedImages) -> Result<EvalOutcome> {
    let gt = ws
        .ground_truth
        .as_ref()
        .ok_or_else(|| Error::Config("manifest has no target.ground_truth; eval needs one".into()))?;
    Ok(EvalOutcome {
        metrics: evaluate(fused, gt, ws.manifest.evaluation.confidence_threshold)?,
        f1: f1_curve(fused, gt, &default_f1_grid())?,
    })
}

/// Reads detections in 7- or 8-column form as fused boxes.
pub fn read_fused(path: &Path) -> Result<FusedImages> {
    let text = crate::io::read_to_string(path)?;
    let file = crate::io::parse_detection_records(&text, Some(path))?;
    if file.iter().all(|r| r.support.is_some()) {
        return parse_fused_str(&text, Some(path));
    }
    let mut out = FusedImages::new();
    for rec in file {
        out.entry(rec.image_id).or_default().push(FusedBox {
            class: rec.det.class,
            rect: rec.det.rect,
            confidence: rec.det.confidence,
            support: rec.support.unwrap_or(1),
            members: Vec::new(),
        });
    }
    Ok(out)
}

/// `eval`: scores a detection file and writes `metrics.json` and
/// `f1_curve.csv`.
pub fn cmd_eval(ws: &Workspace, detections: &Path, out: &Path) -> Result<EvalOutcome> {
    let fused = read_fused(detections)?;
    let outcome = evaluate_fused(ws, &fused)?;
    write_report(Report::Metrics(&outcome.metrics), &out.join(METRICS_FILE))?;
    write_report(Report::F1(&outcome.f1), &out.join(F1_FILE))?;
    Ok(outcome)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENARIO_FILE: &str = "scenario.json";
pub const GT_FILE: &str = "gt.txt";

/// `simulate`: ground truth, one detection file per source, the scenario
/// definition and a manifest that ties them together.
pub fn cmd_simulate(spec: &ScenarioSpec, out: &Path) -> Result<PathBuf> {
    let sc = generate(spec)?;
    write_file(&out.join(GT_FILE), &format_ground_truth(&sc.ground_truth))?;
    let mut sources = Vec::new();
    for s in &sc.sources {
        let file = format!("{}.txt", s.name);
        write_file(&out.join(&file), &format_detections(&s.detections))?;
        sources.push(SourceEntry {
            name: s.name.clone(),
            dataset_size: s.dataset_size,
            detections: file.into(),
        });
    }
    let manifest = EnsembleManifest {
        base_dir: out.to_path_buf(),
        classes: spec.class_names(),
        sources,
        target: TargetEntry {
            image_ids: Some(sc.image_ids.clone()),
            ground_truth: Some(GT_FILE.into()),
        },
        gates: spec.gates.clone(),
        filter: LabelSpaceFilter::KeepAll,
        fusion: FusionSettings::default(),
        evaluation: EvaluationSettings::default(),
        seed: Some(spec.seed),
    };
    write_file(&out.join(SCENARIO_FILE), &to_json_string(spec))?;
    let path = out.join(MANIFEST_FILE);
    write_file(&path, &manifest.to_json())?;
    Ok(path)
}

/// One line of the method comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: String,
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map5095: f64,
    pub f1_max: f64,
    pub f1_argmax_confidence: f64,
}

impl ComparisonRow {
    pub fn new(method: &str, e: &EvalOutcome) -> Self {
        let a = &e.metrics.aggregate;
        let best = e.f1.argmax_confidence().unwrap_or(0.0);
        let f1_max = e.f1.points.iter().map(|p| p.f1_mean).fold(0.0, f64::max);
        Self {
            method: method.into(),
            precision: a.precision,
            recall: a.recall,
            map50: a.map50,
            map5095: a.map5095,
            f1_max,
            f1_argmax_confidence: best,
        }
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    use crate::io::fmt_f64;
    let mut out = String::from("method,precision,recall,map50,map5095,f1_max,f1_argmax_confidence\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.method,
            fmt_f64(r.precision),
            fmt_f64(r.recall),
            fmt_f64(r.map50),
            fmt_f64(r.map5095),
            fmt_f64(r.f1_max),
            fmt_f64(r.f1_argmax_confidence)
        ));
    }
    out
}

/// Wall-clock timings of the in-memory stages; reported, never written to
/// artifacts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timings {
    pub nms_secs: f64,
    pub consensus_secs: f64,
}

impl Timings {
    pub fn ratio(&self) -> f64 {
        self.consensus_secs / self.nms_secs.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub manifest: PathBuf,
    pub rows: Vec<ComparisonRow>,
    pub report: ContributionReport,
    pub timings: Timings,
}

/// Where the pipeline gets its inputs.
#[derive(Debug, Clone)]
pub enum PipelineInput {
    Scenario(ScenarioSpec),
    Manifest(PathBuf),
}

/// The compared methods in table order, and the algorithm behind each.
pub const COMPARED: [(&str, Algorithm); 4] = [
    ("ours", Algorithm::ConsensusWbf),
    ("nms", Algorithm::Nms),
    ("soft-nms", Algorithm::SoftNms),
    ("wbf", Algorithm::Wbf),
];

/// simulate (optional), fuse with every algorithm, consensus, then eval of
/// each compared method. Layout under `out`: `data/`, `fuse/<algorithm>/`,
/// `consensus/`, `eval/<method>/`, `comparison.{csv,json}`.
pub fn run_pipeline(input: &PipelineInput, overrides: &Overrides, shapley: bool, out: &Path) -> Result<PipelineOutcome> {
    let manifest = match input {
        PipelineInput::Scenario(spec) => cmd_simulate(spec, &out.join("data"))?,
        PipelineInput::Manifest(p) => p.clone(),
    };
    let ws = Workspace::load(&manifest, overrides)?;

    for algo in [Algorithm::Nms, Algorithm::SoftNms, Algorithm::Wbf, Algorithm::KnowledgeVote] {
        cmd_fuse(&ws, algo, &out.join("fuse").join(algo.as_str()))?;
    }
    let consensus = cmd_consensus(&ws, shapley, &out.join("consensus"))?;

    let mut rows = Vec::new();
    for (method, algo) in COMPARED {
        let fused = match algo {
            Algorithm::ConsensusWbf => out.join("consensus").join(FUSED_FILE),
            _ => out.join("fuse").join(algo.as_str()).join(FUSED_FILE),
        };
        let e = cmd_eval(&ws, &fused, &out.join("eval").join(method))?;
        rows.push(ComparisonRow::new(method, &e));
    }
    write_file(&out.join("comparison.csv"), &comparison_csv(&rows))?;
    write_file(&out.join("comparison.json"), &to_json_string(&rows))?;

    let timings = time_stages(&ws)?;
    Ok(PipelineOutcome {
        manifest,
        rows,
        report: consensus.report,
        timings,
    })
}

/// Times plain NMS against the consensus stage on the loaded workspace.
pub fn time_stages(ws: &Workspace) -> Result<Timings> {
    let t = Instant::now();
    run_algorithm(ws, Algorithm::Nms)?;
    let nms_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    run_consensus(ws, false)?;
    let consensus_secs = t.elapsed().as_secs_f64();
    Ok(Timings {
        nms_secs,
        consensus_secs,
    })
}

/// A rayon pool with `threads` workers, or rayon's default when `None`.
pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}
