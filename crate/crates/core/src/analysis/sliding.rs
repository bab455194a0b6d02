//! Dense, deterministic proposals around one ground-truth box.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlidingConfig {
    /// Size multipliers below 1: geometric from `min_scale` to 1.
    pub min_scale: f64,
    pub shrink_steps: usize,
    /// Size multipliers above 1: geometric from 1 to `max_scale`.
    pub max_scale: f64,
    pub grow_steps: usize,
    /// Aspect multipliers `2^(k / aspect_divisor)` for `|k| <= aspect_steps`.
    pub aspect_steps: i32,
    pub aspect_divisor: f64,
    /// Translation lattice `k` in `-half..=half` per axis; the offset is
    /// `max_shift * sign(k) * (|k| / half)^2` times the box side.
    pub translation_half: i32,
    pub max_shift: f64,
}

impl Default for SlidingConfig {
    fn default() -> Self {
        SlidingConfig {
            min_scale: 0.25,
            shrink_steps: 5,
            max_scale: 2.5,
            grow_steps: 4,
            aspect_steps: 3,
            aspect_divisor: 3.0,
            translation_half: 7,
            max_shift: 1.5,
        }
    }
}

impl SlidingConfig {
    pub fn scales(&self) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.shrink_steps)
            .map(|i| self.min_scale.powf(1.0 - i as f64 / self.shrink_steps as f64))
            .collect();
        out.push(1.0);
        out.extend((1..=self.grow_steps).map(|i| self.max_scale.powf(i as f64 / self.grow_steps as f64)));
        out
    }

    pub fn aspects(&self) -> Vec<f64> {
        (-self.aspect_steps..=self.aspect_steps)
            .map(|k| 2f64.powf(k as f64 / self.aspect_divisor))
            .collect()
    }

    pub fn shifts(&self) -> Vec<f64> {
        let h = self.translation_half;
        (-h..=h)
            .map(|k| {
                let r = k.abs() as f64 / h.max(1) as f64;
                self.max_shift * (k.signum() as f64) * r * r
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= 1.0 && self.max_scale >= 1.0) {
            return Err(Error::Config("need 0 < min_scale <= 1 <= max_scale".into()));
        }
        if self.aspect_steps < 0 || self.translation_half < 0 || !(self.aspect_divisor > 0.0) {
            return Err(Error::Config("aspect and translation steps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scales x aspects x translations around `gt`, clipped to the image and
/// deduplicated. `gt` itself always comes first.
pub fn generate_sliding_proposals(gt: &BBox, image_size: (f64, f64), cfg: &SlidingConfig) -> Result<Vec<BBox>> {
    cfg.validate()?;
    let (w_img, h_img) = image_size;
    if gt.x1 < 0.0 || gt.y1 < 0.0 || gt.x2 > w_img || gt.y2 > h_img {
        return Err(Error::contract(format!("ground truth {:?} is not inside the image", gt.to_array())));
    }
    let (cx, cy) = gt.center();
    let (gw, gh) = (gt.width(), gt.height());
    let key = |b: &BBox| b.to_array().map(f64::to_bits);
    let mut seen = HashSet::new();
    let mut out = vec![*gt];
    seen.insert(key(gt));
    let shifts = cfg.shifts();
    for &s in &cfg.scales() {
        for &a in &cfg.aspects() {
            let (w, h) = (gw * s * a.sqrt(), gh * s / a.sqrt());
            for &ty in &shifts {
                for &tx in &shifts {
                    let Ok(b) = BBox::from_center(cx + tx * gw, cy + ty * gh, w, h) else { continue };
                    let Ok(b) = clip_box(&b, w_img, h_img) else { continue };
                    if seen.insert(key(&b)) {
                        out.push(b);
                    }
                }
            }
        }
    }
    Ok(out)
}
