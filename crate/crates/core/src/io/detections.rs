//! Whitespace-separated text formats, one box per line:
//!
//! ```text
//! detections:    image_id class_id x1 y1 x2 y2 confidence
//! pseudo-labels: image_id class_id x1 y1 x2 y2 confidence n_b
//! ground truth:  image_id class_id x1 y1 x2 y2
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, GtBox};
use crate::fusion::FusedBox;
use crate::geometry::{validate_box, BBox, ClassId, DetectionSet, Rect};
use crate::io::numfmt::fmt_f64;
use crate::io::read_to_string;

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionRecord {
    pub line: usize,
    pub image_id: String,
    pub det: BBox,
    pub support: Option<usize>,
}

/// A parsed detection file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionFile {
    pub sets: BTreeMap<String, DetectionSet>,
    pub zero_area_dropped: usize,
}

fn lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, l)| {
        let l = l.trim();
        (!l.is_empty() && !l.starts_with('#')).then(|| (i + 1, l.split_whitespace().collect()))
    })
}

fn field<T: std::str::FromStr>(tok: &str, what: &str, path: Option<&Path>, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(path.map(Path::to_path_buf), line, format!("bad {what} `{tok}`")))
}

fn rect_fields(cols: &[&str], path: Option<&Path>, line: usize) -> Result<Rect> {
    let mut c = [0.0; 4];
    for (slot, (tok, name)) in c.iter_mut().zip(cols.iter().zip(["x1", "y1", "x2", "y2"])) {
        *slot = field(tok, name, path, line)?;
    }
    Ok(Rect::from_array(c))
}

fn with_context(e: Error, path: Option<&Path>, line: usize) -> Error {
    match e {
        Error::InvalidBox { reason } => Error::parse(path.map(PathBuf::from), line, format!("invalid box: {reason}")),
        other => other,
    }
}

/// Parses detection or pseudo-label text (7 or 8 columns).
pub fn parse_detection_records(text: &str, path: Option<&Path>) -> Result<Vec<DetectionRecord>> {
    let mut out = Vec::new();
    for (line, cols) in lines(text) {
        if cols.len() != 7 && cols.len() != 8 {
            return Err(Error::parse(
                path.map(Path::to_path_buf),
                line,
                format!("expected 7 or 8 columns, found {}", cols.len()),
            ));
        }
        let class: u32 = field(cols[1], "class id", path, line)?;
        let rect = rect_fields(&cols[2..6], path, line)?;
        let confidence: f64 = field(cols[6], "confidence", path, line)?;
        let det = validate_box(BBox::new(class, rect, confidence, 0))
            .map_err(|e| with_context(e, path, line))?;
        let support = match cols.get(7) {
            Some(tok) => {
                let n: usize = field(tok, "n_b", path, line)?;
                if n == 0 {
                    return Err(Error::parse(path.map(Path::to_path_buf), line, "n_b must be positive"));
                }
                Some(n)
            }
            None => None,
        };
        out.push(DetectionRecord {
            line,
            image_id: cols[0].to_string(),
            det,
            support,
        });
    }
    Ok(out)
}

/// Groups detection text by image, dropping zero-area boxes.
pub fn parse_detections_str(text: &str, path: Option<&Path>) -> Result<DetectionFile> {
    let mut file = DetectionFile::default();
    for rec in parse_detection_records(text, path)? {
        if !rec.det.has_area() {
            file.zero_area_dropped += 1;
            continue;
        }
        file.sets
            .entry(rec.image_id.clone())
            .or_insert_with(|| DetectionSet::empty(rec.image_id))
            .boxes
            .push(rec.det);
    }
    if file.zero_area_dropped > 0 {
        log::warn!(
            "{}: dropped {} zero-area box(es)",
            path.map(|p| p.display().to_string()).unwrap_or_else(|| "<input>".into()),
            file.zero_area_dropped
        );
    }
    Ok(file)
}

pub fn parse_detections(path: &Path) -> Result<DetectionFile> {
    parse_detections_str(&read_to_string(path)?, Some(path))
}

fn push_line(out: &mut String, image: &str, class: ClassId, r: &Rect, conf: Option<f64>, support: Option<usize>) {
    let _ = write!(
        out,
        "{image} {class} {} {} {} {}",
        fmt_f64(r.x1),
        fmt_f64(r.y1),
        fmt_f64(r.x2),
        fmt_f64(r.y2)
    );
    if let Some(c) = conf {
        let _ = write!(out, " {}", fmt_f64(c));
    }
    if let Some(n) = support {
        let _ = write!(out, " {n}");
    }
    out.push('\n');
}

fn check_image_id(id: &str) {
    assert!(
        !id.is_empty() && !id.contains(char::is_whitespace),
        "image id `{id}` cannot be written to a whitespace-separated file"
    );
}

/// Canonical detection text: images in key order, boxes by descending
/// confidence (stable).
pub fn format_detections(sets: &BTreeMap<String, DetectionSet>) -> String {
    let mut out = String::new();
    for (image, set) in sets {
        check_image_id(image);
        let mut boxes = set.boxes.clone();
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        for b in &boxes {
            push_line(&mut out, image, b.class, &b.rect, Some(b.confidence), None);
        }
    }
    out
}

/// Fused boxes in detection format, optionally with the `n_b` column.
pub fn format_fused(fused: &BTreeMap<String, Vec<FusedBox>>, with_support: bool) -> String {
    let mut out = String::new();
    for (image, boxes) in fused {
        check_image_id(image);
        let mut boxes: Vec<&FusedBox> = boxes.iter().collect();
        boxes.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        for f in boxes {
            push_line(
                &mut out,
                image,
                f.class,
                &f.rect,
                Some(f.confidence),
                with_support.then_some(f.support),
            );
        }
    }
    out
}

/// Parses 8-column pseudo-label text into fused boxes without members.
pub fn parse_fused_str(text: &str, path: Option<&Path>) -> Result<BTreeMap<String, Vec<FusedBox>>> {
    let mut out: BTreeMap<String, Vec<FusedBox>> = BTreeMap::new();
    for rec in parse_detection_records(text, path)? {
        let support = rec.support.ok_or_else(|| {
            Error::parse(path.map(Path::to_path_buf), rec.line, "pseudo-label line lacks the n_b column")
        })?;
        out.entry(rec.image_id).or_default().push(FusedBox {
            class: rec.det.class,
            rect: rec.det.rect,
            confidence: rec.det.confidence,
            support,
            members: Vec::new(),
        });
    }
    Ok(out)
}

pub fn parse_ground_truth_str(text: &str, path: Option<&Path>) -> Result<GroundTruth> {
    let mut gt = GroundTruth::default();
    for (line, cols) in lines(text) {
        if cols.len() != 6 {
            return Err(Error::parse(
                path.map(Path::to_path_buf),
                line,
                format!("expected 6 columns, found {}", cols.len()),
            ));
        }
        let class: u32 = field(cols[1], "class id", path, line)?;
        let rect = rect_fields(&cols[2..6], path, line)?
            .validated()
            .map_err(|e| with_context(e, path, line))?;
        gt.entries.entry(cols[0].to_string()).or_default().push(GtBox {
            class: ClassId(class),
            rect,
        });
    }
    Ok(gt)
}

pub fn parse_ground_truth(path: &Path) -> Result<GroundTruth> {
    parse_ground_truth_str(&read_to_string(path)?, Some(path))
}

/// Ground truth text in image order, boxes in stored order.
pub fn format_ground_truth(gt: &GroundTruth) -> String {
    let mut out = String::new();
    for (image, boxes) in &gt.entries {
        check_image_id(image);
        for b in boxes {
            push_line(&mut out, image, b.class, &b.rect, None, None);
        }
    }
    out
}
