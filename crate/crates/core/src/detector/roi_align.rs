//! Continuous-coordinate RoIAlign with bilinear sampling.
//!
//! Pixel `i` of the feature map covers `[i, i+1)` and its value sits at the
//! centre `i + 0.5`; box coordinates are scaled by `1/stride` and shifted by
//! half a pixel, with no rounding anywhere.

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{FeatureMap, Real};

/// Geometry of one RoIAlign call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAlignParams {
    pub output_size: usize,
    /// Sample points per output cell along each axis.
    pub sampling: usize,
    /// Image pixels per feature-map pixel.
    pub stride: f64,
}

impl Default for RoiAlignParams {
    fn default() -> Self {
        RoiAlignParams {
            output_size: 7,
            sampling: 2,
            stride: 16.0,
        }
    }
}

/// A box together with the batch item of the feature map it reads from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roi {
    pub item: usize,
    pub bbox: BBox,
}

/// Bilinear taps `(feature column, weight)` of every output cell.
struct Taps {
    cells: Vec<Vec<(usize, f64)>>,
}

/// Bilinear neighbours of a continuous sample position along one axis.
/// Points more than one pixel outside the map contribute nothing.
fn axis_taps(mut v: f64, size: usize) -> Option<[(usize, f64); 2]> {
    let n = size as f64;
    if v < -1.0 || v > n {
        return None;
    }
    if v <= 0.0 {
        v = 0.0;
    }
    let mut low = v.floor() as usize;
    let high;
    if low >= size - 1 {
        low = size - 1;
        high = size - 1;
        v = low as f64;
    } else {
        high = low + 1;
    }
    let frac = v - low as f64;
    Some([(low, 1.0 - frac), (high, frac)])
}

fn taps(fmap_h: usize, fmap_w: usize, n_items: usize, roi: &Roi, p: &RoiAlignParams) -> Result<Taps> {
    if roi.item >= n_items {
        return Err(Error::contract(format!("RoI item {} outside batch of {n_items}", roi.item)));
    }
    let b = &roi.bbox;
    if !(b.x2 > b.x1 && b.y2 > b.y1) {
        return Err(Error::contract(format!("degenerate RoI {b:?}")));
    }
    let scale = 1.0 / p.stride;
    let start_x = b.x1 * scale - 0.5;
    let start_y = b.y1 * scale - 0.5;
    let bin_w = b.width() * scale / p.output_size as f64;
    let bin_h = b.height() * scale / p.output_size as f64;
    let s = p.sampling;
    let norm = 1.0 / (s * s) as f64;
    let base = roi.item * fmap_h * fmap_w;
    let mut cells = Vec::with_capacity(p.output_size * p.output_size);
    for py in 0..p.output_size {
        for px in 0..p.output_size {
            let mut cell = Vec::with_capacity(4 * s * s);
            for iy in 0..s {
                let y = start_y + (py as f64 + (iy as f64 + 0.5) / s as f64) * bin_h;
                let Some(ty) = axis_taps(y, fmap_h) else { continue };
                for ix in 0..s {
                    let x = start_x + (px as f64 + (ix as f64 + 0.5) / s as f64) * bin_w;
                    let Some(tx) = axis_taps(x, fmap_w) else { continue };
                    for &(yi, wy) in &ty {
                        for &(xi, wx) in &tx {
                            let w = wy * wx * norm;
                            if w != 0.0 {
                                cell.push((base + yi * fmap_w + xi, w));
                            }
                        }
                    }
                }
            }
            cells.push(cell);
        }
    }
    Ok(Taps { cells })
}

/// Pools every RoI to `(C, output, output)`; the result stacks RoIs as items.
pub fn roi_align<T: Real>(fmap: &FeatureMap<T>, rois: &[Roi], p: &RoiAlignParams) -> Result<FeatureMap<T>> {
    let cells = p.output_size * p.output_size;
    let c = fmap.channels();
    let mut out = FeatureMap::zeros(c, rois.len(), p.output_size, p.output_size);
    for (r, roi) in rois.iter().enumerate() {
        let t = taps(fmap.h, fmap.w, fmap.n, roi, p)?;
        for (cell, list) in t.cells.iter().enumerate() {
            let col = r * cells + cell;
            for ch in 0..c {
                let row = fmap.data.row(ch);
                let mut acc = T::zero();
                for &(idx, w) in list {
                    acc += row[idx] * T::of(w);
                }
                out.data[[ch, col]] = acc;
            }
        }
    }
    Ok(out)
}

/// Scatters RoI gradients back onto a zero map shaped like the input.
pub fn roi_align_backward<T: Real>(
    dy: &FeatureMap<T>,
    rois: &[Roi],
    p: &RoiAlignParams,
    fmap_shape: (usize, usize, usize, usize),
) -> Result<FeatureMap<T>> {
    let (c, n, h, w) = fmap_shape;
    let cells = p.output_size * p.output_size;
    let mut dx = FeatureMap::zeros(c, n, h, w);
    for (r, roi) in rois.iter().enumerate() {
        let t = taps(h, w, n, roi, p)?;
        for (cell, list) in t.cells.iter().enumerate() {
            let col = r * cells + cell;
            for ch in 0..c {
                let g = dy.data[[ch, col]];
                let mut row = dx.data.row_mut(ch);
                for &(idx, wt) in list {
                    row[idx] += g * T::of(wt);
                }
            }
        }
    }
    Ok(dx)
}
