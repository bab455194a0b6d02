//! Object groupings: by class difficulty and by box area.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Ranks classes by AP, best first (ties by lower id), and cuts the ranking
/// into thirds. When the count is not divisible by three the earlier groups
/// take one extra class each.
pub fn difficulty_grouping(per_class_ap: &BTreeMap<usize, f64>) -> Result<[Vec<usize>; 3]> {
    if per_class_ap.len() < 3 {
        return Err(Error::contract(format!("need at least 3 classes, got {}", per_class_ap.len())));
    }
    if per_class_ap.values().any(|v| v.is_nan()) {
        return Err(Error::contract("AP values must not be NaN"));
    }
    let mut ranked: Vec<(usize, f64)> = per_class_ap.iter().map(|(&c, &ap)| (c, ap)).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = ranked.len();
    let sizes = [0, 1, 2].map(|g| n / 3 + usize::from(g < n % 3));
    let mut it = ranked.into_iter().map(|(c, _)| c);
    Ok(sizes.map(|k| it.by_ref().take(k).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeGroup {
    Small,
    Medium,
    Large,
}

impl SizeGroup {
    pub const ALL: [SizeGroup; 3] = [SizeGroup::Small, SizeGroup::Medium, SizeGroup::Large];

    pub fn name(self) -> &'static str {
        match self {
            SizeGroup::Small => "small",
            SizeGroup::Medium => "medium",
            SizeGroup::Large => "large",
        }
    }
}

impl fmt::Display for SizeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Area cut-offs in pixels squared. `rescale` multiplies both by the ratio of
/// the analysed image area to `reference_area`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SizeThresholds {
    pub small_below: f64,
    pub large_above: f64,
    pub rescale: bool,
    pub reference_area: f64,
}

impl Default for SizeThresholds {
    fn default() -> Self {
        SizeThresholds {
            small_below: 32.0 * 32.0,
            large_above: 96.0 * 96.0,
            rescale: false,
            reference_area: 640.0 * 480.0,
        }
    }
}

impl SizeThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.small_below > 0.0 && self.small_below <= self.large_above && self.reference_area > 0.0) {
            return Err(Error::Config("size thresholds need 0 < small_below <= large_above".into()));
        }
        Ok(())
    }

    /// Cut-offs for images of `image_area` pixels.
    pub fn resolved(&self, image_area: f64) -> [f64; 2] {
        let k = if self.rescale { image_area / self.reference_area } else { 1.0 };
        [self.small_below * k, self.large_above * k]
    }
}

/// Small below the first cut-off; large strictly above the second.
pub fn size_grouping(gt: &BBox, cutoffs: [f64; 2]) -> SizeGroup {
    let a = gt.area();
    if a < cutoffs[0] {
        SizeGroup::Small
    } else if a <= cutoffs[1] {
        SizeGroup::Medium
    } else {
        SizeGroup::Large
    }
}
