use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::consensus::{ContributionReport, Provenance, PseudoLabelDataset};
use crate::error::{Error, Result};
use crate::eval::{F1Curve, F1Point, MetricsReport};
use crate::geometry::ClassId;
use crate::io::numfmt::fmt_f64;
use crate::io::{format_fused, from_json_str, parse_fused_str, read_to_string, to_json_string, write_file};

/// Anything `write_report` knows how to serialize.
pub enum Report<'a> {
    Contribution(&'a ContributionReport),
    Metrics(&'a MetricsReport),
    F1(&'a F1Curve),
    PseudoLabels(&'a PseudoLabelDataset),
}

/// Serializes a report deterministically. Pseudo-labels also get a
/// `<stem>.provenance.json` sidecar next to `path`.
pub fn write_report(report: Report<'_>, path: &Path) -> Result<()> {
    match report {
        Report::Contribution(r) => write_file(path, &to_json_string(r)),
        Report::Metrics(r) => write_file(path, &to_json_string(r)),
        Report::F1(c) => write_f1_curve(c, path),
        Report::PseudoLabels(d) => write_pseudo_labels(d, path),
    }
}

pub fn f1_curve_csv(curve: &F1Curve) -> String {
    let mut out = String::from("confidence");
    for c in &curve.classes {
        let _ = write!(out, ",class_{c}");
    }
    out.push_str(",mean\n");
    for p in &curve.points {
        out.push_str(&fmt_f64(p.confidence));
        for c in &curve.classes {
            let _ = write!(out, ",{}", fmt_f64(p.f1_per_class.get(c).copied().unwrap_or(0.0)));
        }
        let _ = writeln!(out, ",{}", fmt_f64(p.f1_mean));
    }
    out
}

pub fn write_f1_curve(curve: &F1Curve, path: &Path) -> Result<()> {
    write_file(path, &f1_curve_csv(curve))
}

pub fn parse_f1_curve_csv(text: &str) -> Result<F1Curve> {
    let bad = |line: usize, reason: String| Error::parse(None, line, reason);
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "missing header".into()))?.split(',').collect();
    if header.len() < 2 || header[0] != "confidence" || header[header.len() - 1] != "mean" {
        return Err(bad(1, "header must be `confidence,class_<id>...,mean`".into()));
    }
    let classes = header[1..header.len() - 1]
        .iter()
        .map(|h| {
            h.strip_prefix("class_")
                .and_then(|id| id.parse().ok())
                .map(ClassId)
                .ok_or_else(|| bad(1, format!("bad column `{h}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        let vals = line
            .split(',')
            .map(|v| v.parse::<f64>().map_err(|_| bad(i + 2, format!("bad number `{v}`"))))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != header.len() {
            return Err(bad(i + 2, format!("expected {} fields", header.len())));
        }
        points.push(F1Point {
            confidence: vals[0],
            f1_per_class: classes.iter().copied().zip(vals[1..vals.len() - 1].iter().copied()).collect(),
            f1_mean: vals[vals.len() - 1],
        });
    }
    Ok(F1Curve { classes, points })
}

fn provenance_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.provenance.json"))
}

pub fn write_pseudo_labels(dataset: &PseudoLabelDataset, path: &Path) -> Result<()> {
    write_file(path, &format_fused(&dataset.entries, true))?;
    write_file(&provenance_path(path), &to_json_string(&dataset.provenance))
}

/// Reads a pseudo-label file and its provenance sidecar. Images listed in the
/// provenance but absent from the text get empty entries.
pub fn read_pseudo_labels(path: &Path) -> Result<PseudoLabelDataset> {
    let side = provenance_path(path);
    let provenance: Provenance = from_json_str(&read_to_string(&side)?)
        .map_err(|e| Error::parse(Some(side.clone()), e.line(), e.to_string()))?;
    let mut parsed = parse_fused_str(&read_to_string(path)?, Some(path))?;
    if let Some(extra) = parsed.keys().find(|k| !provenance.image_ids.contains(k)) {
        return Err(Error::parse(
            Some(path.to_path_buf()),
            0,
            format!("image `{extra}` is not listed in the provenance"),
        ));
    }
    let entries = provenance
        .image_ids
        .iter()
        .map(|id| (id.clone(), parsed.remove(id).unwrap_or_default()))
        .collect();
    Ok(PseudoLabelDataset { entries, provenance })
}
