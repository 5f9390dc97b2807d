use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, ClassId, DetectionSet};

/// Per-class minimum confidence a box needs to take part in fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGates {
    pub gates: BTreeMap<ClassId, f64>,
    /// Applied to every class missing from `gates`.
    pub default_gate: f64,
}

impl Default for ConfidenceGates {
    fn default() -> Self {
        Self::uniform(0.0)
    }
}

impl ConfidenceGates {
    pub fn uniform(gate: f64) -> Self {
        Self {
            gates: BTreeMap::new(),
            default_gate: gate,
        }
    }

    pub fn with_gate(mut self, class: ClassId, gate: f64) -> Self {
        self.gates.insert(class, gate);
        self
    }

    pub fn gate(&self, class: ClassId) -> f64 {
        self.gates.get(&class).copied().unwrap_or(self.default_gate)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |g: f64| (0.0..=1.0).contains(&g);
        if !ok(self.default_gate) {
            return Err(Error::Config(format!(
                "default gate {} outside [0, 1]",
                self.default_gate
            )));
        }
        if let Some((c, g)) = self.gates.iter().find(|(_, g)| !ok(**g)) {
            return Err(Error::Config(format!("gate {g} for class {c} outside [0, 1]")));
        }
        Ok(())
    }
}

/// Which classes make up the target label space.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "classes", rename_all = "snake_case")]
pub enum LabelSpaceFilter {
    #[default]
    KeepAll,
    KeepListed(BTreeSet<ClassId>),
}

impl LabelSpaceFilter {
    pub fn keep_listed(classes: impl IntoIterator<Item = ClassId>) -> Result<Self> {
        let set: BTreeSet<_> = classes.into_iter().collect();
        if set.is_empty() {
            return Err(Error::Config("keep_listed filter needs at least one class".into()));
        }
        Ok(LabelSpaceFilter::KeepListed(set))
    }

    pub fn admits(&self, class: ClassId) -> bool {
        match self {
            LabelSpaceFilter::KeepAll => true,
            LabelSpaceFilter::KeepListed(set) => set.contains(&class),
        }
    }
}

pub fn passes(b: &BBox, gates: &ConfidenceGates, filter: &LabelSpaceFilter) -> bool {
    filter.admits(b.class) && b.confidence >= gates.gate(b.class)
}

/// Keeps the boxes whose class is in the label space and whose confidence
/// clears that class's gate. Order is preserved.
pub fn apply_gates(
    dets: &DetectionSet,
    gates: &ConfidenceGates,
    filter: &LabelSpaceFilter,
) -> DetectionSet {
    DetectionSet {
        image_id: dets.image_id.clone(),
        boxes: dets
            .boxes
            .iter()
            .filter(|b| passes(b, gates, filter))
            .copied()
            .collect(),
    }
}
