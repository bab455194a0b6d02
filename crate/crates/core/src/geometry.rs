//! Axis-aligned box arithmetic.
//!
//! Boxes use the corner convention `(x1, y1, x2, y2)` with continuous pixel
//! coordinates: a box spanning pixels `0..10` has width `10`, not `11`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound applied to `dw`/`dh` before exponentiation.
pub const DELTA_SIZE_CLAMP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Default IoU threshold for per-class NMS.
pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Builds a box, rejecting non-finite coordinates and non-positive extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::contract(format!("non-finite box {b:?}")));
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(Error::contract(format!(
                "box must have x2 > x1 and y2 > y1, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Mirror about the vertical axis of an image `width` pixels wide.
    pub fn flip_horizontal(&self, width: f64) -> Self {
        BBox {
            x1: width - self.x2,
            y1: self.y1,
            x2: width - self.x1,
            y2: self.y2,
        }
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Regression offsets of a target box relative to a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        BoxDelta::new(v[0], v[1], v[2], v[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    /// Foreground class in `1..=C`; background is never emitted.
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::contract("detection cannot carry the background class"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::contract(format!("detection score {score} outside [0, 1]")));
        }
        Ok(Detection {
            bbox,
            class_id,
            score,
        })
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn encode_delta(proposal: &BBox, target: &BBox) -> BoxDelta {
    let (pcx, pcy) = proposal.center();
    let (tcx, tcy) = target.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    BoxDelta {
        dx: (tcx - pcx) / pw,
        dy: (tcy - pcy) / ph,
        dw: (target.width() / pw).ln(),
        dh: (target.height() / ph).ln(),
    }
}

/// Applies `delta` to `proposal`. Size offsets are clamped to
/// [`DELTA_SIZE_CLAMP`] so far-off predictions cannot overflow.
pub fn decode_delta(proposal: &BBox, delta: &BoxDelta) -> BBox {
    let (pcx, pcy) = proposal.center();
    let (pw, ph) = (proposal.width(), proposal.height());
    let dw = delta.dw.min(DELTA_SIZE_CLAMP);
    let dh = delta.dh.min(DELTA_SIZE_CLAMP);
    let cx = pcx + delta.dx * pw;
    let cy = pcy + delta.dy * ph;
    let w = pw * dw.exp();
    let h = ph * dh.exp();
    BBox {
        x1: cx - 0.5 * w,
        y1: cy - 0.5 * h,
        x2: cx + 0.5 * w,
        y2: cy + 0.5 * h,
    }
}

/// Clamps a box into `[0, width] x [0, height]`.
///
/// Returns [`Error::Degenerate`] when nothing of the box survives, so the
/// caller can drop it.
pub fn clip_box(b: &BBox, width: f64, height: f64) -> Result<BBox> {
    let x1 = b.x1.clamp(0.0, width);
    let y1 = b.y1.clamp(0.0, height);
    let x2 = b.x2.clamp(0.0, width);
    let y2 = b.y2.clamp(0.0, height);
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::Degenerate { x1, y1, x2, y2 });
    }
    Ok(BBox { x1, y1, x2, y2 })
}

/// Greedy per-class non-maximum suppression.
///
/// Detections are visited in descending score order (ties keep input order);
/// a detection survives unless an already kept detection of the same class
/// overlaps it with IoU strictly above `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::contract(format!(
            "nms threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));

    let mut kept: Vec<Detection> = Vec::new();
    for idx in order {
        let d = &dets[idx];
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_threshold);
        if !suppressed {
            kept.push(*d);
        }
    }
    Ok(kept)
}
