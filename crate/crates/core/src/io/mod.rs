//! File formats: detection and ground-truth text, the ensemble manifest, and
//! deterministic report writers.

pub mod detections;
pub mod manifest;
pub mod numfmt;
pub mod report;

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub use detections::{
    format_detections, format_fused, format_ground_truth, parse_detection_records, parse_detections,
    parse_detections_str, parse_fused_str, parse_ground_truth, parse_ground_truth_str, DetectionFile,
    DetectionRecord,
};
pub use manifest::{parse_manifest, EnsembleManifest, EvaluationSettings, FusionSettings, SourceEntry, TargetEntry};
pub use numfmt::fmt_f64;
pub use report::{
    f1_curve_csv, parse_f1_curve_csv, read_pseudo_labels, write_f1_curve, write_pseudo_labels, write_report, Report,
};

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes `contents`, creating parent directories as needed.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with object keys sorted and floats at nine significant digits.
pub fn to_json_string<T: Serialize + ?Sized>(value: &T) -> String {
    let value = serde_json::to_value(value).expect("report types serialize to JSON");
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, numfmt::JsonFormatter::default());
    value.serialize(&mut ser).expect("in-memory JSON write");
    buf.push(b'\n');
    String::from_utf8(buf).expect("JSON is UTF-8")
}

pub fn from_json_str<T: DeserializeOwned>(text: &str) -> serde_json::Result<T> {
    serde_json::from_str(text)
}
