//! Box representation, validation and IoU arithmetic.
//!
//! Everything is expressed in normalized corner coordinates: `x1 <= x2` and
//! `y1 <= y2`, all within `[0, 1]`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Coordinates may sit this far outside `[0, 1]` and still be clamped back in.
pub const COORD_SLOP: f64 = 1e-6;

/// Index into the run's label space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Axis-aligned rectangle in normalized corner form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Rect {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    #[inline]
    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    #[inline]
    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    #[inline]
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &Rect) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Rect) -> f64 {
        let inter = self.intersection_area(other);
        if inter <= 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Checks corner order and the unit-square bounds, clamping values that
    /// are within [`COORD_SLOP`] of the boundary.
    pub fn validated(self) -> Result<Rect> {
        let mut c = self.as_array();
        for (v, name) in c.iter_mut().zip(["x1", "y1", "x2", "y2"]) {
            if !v.is_finite() {
                return Err(invalid(format!("{name} is not finite")));
            }
            if *v < -COORD_SLOP || *v > 1.0 + COORD_SLOP {
                return Err(invalid(format!("{name}={v} lies outside [0, 1]")));
            }
            *v = v.clamp(0.0, 1.0);
        }
        let r = Rect::from_array(c);
        if r.x1 > r.x2 {
            return Err(invalid(format!("x1={} > x2={}", r.x1, r.x2)));
        }
        if r.y1 > r.y2 {
            return Err(invalid(format!("y1={} > y2={}", r.y1, r.y2)));
        }
        Ok(r)
    }
}

fn invalid(reason: String) -> Error {
    Error::InvalidBox { reason }
}

/// Intersection over union; 0 when the union is empty.
#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.rect.iou(&b.rect)
}

/// One detection produced by one source model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class: ClassId,
    #[serde(flatten)]
    pub rect: Rect,
    pub confidence: f64,
    /// 0-based index of the producing source.
    pub source: usize,
}

impl BBox {
    pub fn new(class: u32, rect: Rect, confidence: f64, source: usize) -> Self {
        Self {
            class: ClassId(class),
            rect,
            confidence,
            source,
        }
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        self.rect.iou(&other.rect)
    }

    pub fn has_area(&self) -> bool {
        self.rect.area() > 0.0
    }
}

/// Returns the box unchanged when valid, clamps coordinate float slop, and
/// rejects anything else.
pub fn validate_box(b: BBox) -> Result<BBox> {
    if !b.confidence.is_finite() || !(0.0..=1.0).contains(&b.confidence) {
        return Err(invalid(format!(
            "confidence {} outside [0, 1]",
            b.confidence
        )));
    }
    Ok(BBox {
        rect: b.rect.validated()?,
        ..b
    })
}

/// All boxes one model produced for one image, in ingestion order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub boxes: Vec<BBox>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, boxes: Vec<BBox>) -> Self {
        Self {
            image_id: image_id.into(),
            boxes,
        }
    }

    pub fn empty(image_id: impl Into<String>) -> Self {
        Self::new(image_id, Vec::new())
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// Re-tags every box with `source`.
    pub fn with_source(mut self, source: usize) -> Self {
        for b in &mut self.boxes {
            b.source = source;
        }
        self
    }

    /// Concatenates several sets (in the given order) into one pooled set.
    pub fn pooled<'a>(
        image_id: impl Into<String>,
        sets: impl IntoIterator<Item = &'a DetectionSet>,
    ) -> Self {
        let boxes = sets.into_iter().flat_map(|s| s.boxes.iter().copied()).collect();
        Self::new(image_id, boxes)
    }
}
