//! Two-pass inference: a sliding box grid, then refinement around the
//! first-pass detections.

use serde::{Deserialize, Serialize};

use super::{Detector, Roi};
use crate::data::{stack_images, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::{clip_box, iou, nms, BBox, Detection, DEFAULT_NMS_IOU};
use crate::nn::{FeatureMap, Mode, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferConfig {
    /// Detections must score strictly above this.
    pub score_threshold: f64,
    pub nms_threshold: f64,
    pub max_detections: usize,
    /// Side lengths (pixels) of the first-pass grid boxes.
    pub grid_sizes: Vec<f64>,
    /// Width/height ratios of the first-pass grid boxes.
    pub grid_aspects: Vec<f64>,
    /// Grid step as a fraction of the box side.
    pub grid_step: f64,
    /// First-pass detections refined in the second pass.
    pub refine_top: usize,
    /// Relative shifts and scalings applied around each refined box.
    pub refine_jitter: f64,
    /// Refinement rounds; each one starts from the best boxes so far.
    pub refine_passes: usize,
    /// RoIs per head evaluation chunk.
    pub chunk: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            score_threshold: 0.05,
            nms_threshold: DEFAULT_NMS_IOU,
            max_detections: 100,
            grid_sizes: vec![24.0, 40.0, 64.0, 96.0, 144.0],
            grid_aspects: vec![0.5, 1.0, 2.0],
            grid_step: 0.5,
            refine_top: 50,
            refine_jitter: 0.1,
            refine_passes: 1,
            chunk: 512,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_threshold > 0.0 && self.nms_threshold <= 1.0) {
            return Err(Error::Config(format!("nms_threshold must lie in (0, 1], got {}", self.nms_threshold)));
        }
        if !(self.grid_step > 0.0) || self.grid_sizes.iter().chain(&self.grid_aspects).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("grid sizes, aspects and step must be positive".into()));
        }
        if self.chunk == 0 {
            return Err(Error::Config("chunk must be positive".into()));
        }
        Ok(())
    }
}

/// Boxes tiled over the image at every configured size and aspect.
pub fn grid_proposals(width: f64, height: f64, cfg: &InferConfig) -> Vec<BBox> {
    let mut out = Vec::new();
    for &size in &cfg.grid_sizes {
        for &aspect in &cfg.grid_aspects {
            let w = size * aspect.sqrt();
            let h = size / aspect.sqrt();
            if w > width || h > height {
                continue;
            }
            let (sx, sy) = (w * cfg.grid_step, h * cfg.grid_step);
            let nx = ((width - w) / sx).floor() as usize;
            let ny = ((height - h) / sy).floor() as usize;
            // centre the lattice so both borders get equal slack
            let ox = 0.5 * (width - w - nx as f64 * sx);
            let oy = 0.5 * (height - h - ny as f64 * sy);
            for j in 0..=ny {
                for i in 0..=nx {
                    let x1 = ox + i as f64 * sx;
                    let y1 = oy + j as f64 * sy;
                    if let Ok(b) = BBox::new(x1, y1, x1 + w, y1 + h) {
                        out.push(b);
                    }
                }
            }
        }
    }
    out
}

/// The box itself plus shifted and rescaled copies.
fn refine_around(b: &BBox, r: f64, width: f64, height: f64) -> Vec<BBox> {
    let (cx, cy) = b.center();
    let (w, h) = (b.width(), b.height());
    let mut out = Vec::new();
    for (dx, dy, sw, sh) in [
        (0.0, 0.0, 1.0, 1.0),
        (-r, 0.0, 1.0, 1.0),
        (r, 0.0, 1.0, 1.0),
        (0.0, -r, 1.0, 1.0),
        (0.0, r, 1.0, 1.0),
        (0.0, 0.0, 1.0 - r, 1.0 - r),
        (0.0, 0.0, 1.0 + r, 1.0 + r),
        (0.0, 0.0, 1.0 + r, 1.0 - r),
        (0.0, 0.0, 1.0 - r, 1.0 + r),
    ] {
        if let Ok(c) = BBox::from_center(cx + dx * w, cy + dy * h, w * sw, h * sh)
            .and_then(|c| clip_box(&c, width, height))
        {
            out.push(c);
        }
    }
    out
}

/// Scored, decoded candidates before thresholding and NMS.
fn score_proposals<T: Real>(
    det: &Detector<T>,
    fmap: &FeatureMap<T>,
    proposals: &[BBox],
    width: f64,
    height: f64,
    cfg: &InferConfig,
) -> Result<Vec<Detection>> {
    let reg = det.spec.regression_source();
    let mut out = Vec::new();
    for chunk in proposals.chunks(cfg.chunk) {
        let rois: Vec<Roi> = chunk.iter().map(|&bbox| Roi { item: 0, bbox }).collect();
        let heads = det.roi_outputs(fmap, &rois, Mode::Eval)?;
        let scores = det.inference_scores(&heads)?;
        let boxes = det.regressed_boxes(&heads, reg, chunk)?;
        for (s, b) in scores.iter().zip(&boxes) {
            for (k, (&score, bbox)) in s.iter().zip(b).enumerate() {
                let Ok(clipped) = clip_box(bbox, width, height) else { continue };
                out.push(Detection::new(clipped, k + 1, score.clamp(0.0, 1.0))?);
            }
        }
    }
    Ok(out)
}

fn top_per_class(dets: Vec<Detection>, cfg: &InferConfig, threshold: f64) -> Result<Vec<Detection>> {
    let kept: Vec<Detection> = dets.into_iter().filter(|d| d.score > threshold).collect();
    let mut out = nms(&kept, cfg.nms_threshold)?;
    out.truncate(cfg.max_detections);
    Ok(out)
}

/// Detections of one image, sorted by score.
pub fn infer_image<T: Real>(det: &Detector<T>, image: &ImageSample, cfg: &InferConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (width, height) = (image.width() as f64, image.height() as f64);
    let fmap = det.features(&stack_images::<T>(&[image])?, Mode::Eval)?;
    let first = grid_proposals(width, height, cfg);
    let mut candidates = score_proposals(det, &fmap, &first, width, height, cfg)?;

    let seed_cfg = InferConfig {
        max_detections: cfg.refine_top,
        ..cfg.clone()
    };
    for _ in 0..cfg.refine_passes {
        let seeds = top_per_class(candidates.clone(), &seed_cfg, 0.0)?;
        let mut next: Vec<BBox> = Vec::new();
        for d in &seeds {
            for b in refine_around(&d.bbox, cfg.refine_jitter, width, height) {
                if !next.iter().any(|s| iou(s, &b) > 0.999) {
                    next.push(b);
                }
            }
        }
        candidates.extend(score_proposals(det, &fmap, &next, width, height, cfg)?);
    }
    top_per_class(candidates, cfg, cfg.score_threshold)
}

/// One line of the detection output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: u64,
    pub class_id: usize,
    pub score: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

impl DetectionRecord {
    pub fn new(image_id: u64, d: &Detection) -> Self {
        DetectionRecord {
            image_id,
            class_id: d.class_id,
            score: d.score,
            bbox: d.bbox,
        }
    }

    pub fn detection(&self) -> Result<Detection> {
        Detection::new(self.bbox, self.class_id, self.score)
    }
}
