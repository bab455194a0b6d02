//! Training proposals drawn around the ground truth.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{clip_box, encode_delta, iou, BBox, BoxDelta};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub proposals_per_image: usize,
    /// Target share of foreground proposals in a batch.
    pub fg_fraction: f64,
    /// Proposals with best IoU at or above this are foreground.
    pub fg_iou: f64,
    /// Proposals with best IoU in `[bg_iou_lo, bg_iou_hi)` are background.
    pub bg_iou_hi: f64,
    pub bg_iou_lo: f64,
    /// Relative standard deviations of the centre/size jitter.
    pub jitter_scales: Vec<f64>,
    pub jitters_per_scale: usize,
    /// Uniformly placed boxes added per image.
    pub random_boxes: usize,
    /// Smallest side of a uniformly placed box, in pixels.
    pub min_random_size: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            proposals_per_image: 64,
            fg_fraction: 0.25,
            fg_iou: 0.5,
            bg_iou_hi: 0.5,
            bg_iou_lo: 0.0,
            jitter_scales: vec![0.05, 0.1, 0.2, 0.4],
            jitters_per_scale: 8,
            random_boxes: 64,
            min_random_size: 8.0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fg_fraction > 0.0 && self.fg_fraction < 1.0) {
            return Err(Error::Config(format!("fg_fraction must lie in (0, 1), got {}", self.fg_fraction)));
        }
        if !(self.bg_iou_lo <= self.bg_iou_hi && self.bg_iou_hi <= self.fg_iou && self.fg_iou <= 1.0) {
            return Err(Error::Config(format!(
                "IoU thresholds must satisfy bg_iou_lo <= bg_iou_hi <= fg_iou <= 1, got {} / {} / {}",
                self.bg_iou_lo, self.bg_iou_hi, self.fg_iou
            )));
        }
        if self.proposals_per_image == 0 {
            return Err(Error::Config("proposals_per_image must be positive".into()));
        }
        if self.jitter_scales.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::Config("jitter_scales must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Proposal {
    pub bbox: BBox,
    /// 0 is background.
    pub label: usize,
    /// Offsets to the matched ground truth, foreground only.
    pub target: Option<BoxDelta>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
}

impl ProposalBatch {
    pub fn foreground(&self) -> usize {
        self.proposals.iter().filter(|p| p.label > 0).count()
    }
}

/// Best-matching ground truth of `b`, if any overlaps it.
pub fn best_match(b: &BBox, gt: &[(BBox, usize)]) -> Option<(usize, f64)> {
    gt.iter()
        .enumerate()
        .map(|(i, (g, _))| (i, iou(b, g)))
        .fold(None, |best, (i, v)| match best {
            Some((_, bv)) if bv >= v => best,
            _ => Some((i, v)),
        })
}

/// Labels one box: foreground, background, or ignored (`None`).
pub fn label_box(b: &BBox, gt: &[(BBox, usize)], cfg: &SamplerConfig) -> Option<Proposal> {
    let (gi, v) = best_match(b, gt)?;
    if v >= cfg.fg_iou {
        let (g, class) = gt[gi];
        Some(Proposal {
            bbox: *b,
            label: class,
            target: Some(encode_delta(b, &g)),
            iou: v,
        })
    } else if v >= cfg.bg_iou_lo && v < cfg.bg_iou_hi {
        Some(Proposal {
            bbox: *b,
            label: 0,
            target: None,
            iou: v,
        })
    } else {
        None
    }
}

/// Candidate boxes before labelling: each ground truth, its jittered copies,
/// and uniformly placed boxes, all clipped to the image.
pub fn candidate_boxes<R: Rng + ?Sized>(
    gt: &[(BBox, usize)],
    image_size: (f64, f64),
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Vec<BBox> {
    let (w_img, h_img) = image_size;
    let mut out = Vec::new();
    for (g, _) in gt {
        out.push(*g);
        let (cx, cy) = g.center();
        for &sigma in &cfg.jitter_scales {
            for _ in 0..cfg.jitters_per_scale {
                let n: [f64; 4] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let w = g.width() * (sigma * n[2]).exp();
                let h = g.height() * (sigma * n[3]).exp();
                let b = BBox {
                    x1: cx + sigma * g.width() * n[0] - 0.5 * w,
                    y1: cy + sigma * g.height() * n[1] - 0.5 * h,
                    x2: cx + sigma * g.width() * n[0] + 0.5 * w,
                    y2: cy + sigma * g.height() * n[1] + 0.5 * h,
                };
                if let Ok(c) = clip_box(&b, w_img, h_img) {
                    out.push(c);
                }
            }
        }
    }
    let min = cfg.min_random_size.min(w_img).min(h_img);
    for _ in 0..cfg.random_boxes {
        let w = rng.random_range(min..=w_img.max(min));
        let h = rng.random_range(min..=h_img.max(min));
        let x1 = rng.random_range(0.0..=(w_img - w).max(0.0));
        let y1 = rng.random_range(0.0..=(h_img - h).max(0.0));
        if let Ok(b) = BBox::new(x1, y1, x1 + w, y1 + h) {
            out.push(b);
        }
    }
    out
}

/// Draws one image's training proposals.
pub fn sample_proposals<R: Rng + ?Sized>(
    gt: &[(BBox, usize)],
    image_size: (f64, f64),
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<ProposalBatch> {
    if gt.is_empty() {
        return Err(Error::contract("proposal sampling needs at least one ground-truth box"));
    }
    let candidates = candidate_boxes(gt, image_size, cfg, rng);
    let (mut fg, mut bg): (Vec<Proposal>, Vec<Proposal>) = candidates
        .iter()
        .filter_map(|b| label_box(b, gt, cfg))
        .partition(|p| p.label > 0);
    if fg.is_empty() {
        warn!("no achievable foreground proposal; emitting a background-only batch");
    }
    fg.shuffle(rng);
    bg.shuffle(rng);
    let n = cfg.proposals_per_image;
    let n_fg = ((cfg.fg_fraction * n as f64).round() as usize).min(fg.len());
    let n_bg = (n - n_fg).min(bg.len());
    fg.truncate(n_fg);
    bg.truncate(n_bg);
    fg.extend(bg);
    Ok(ProposalBatch { proposals: fg })
}
