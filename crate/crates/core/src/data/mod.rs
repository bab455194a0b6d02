//! Synthetic dataset, annotation files, image files and AP evaluation.

pub mod annotations;
pub mod eval;
pub mod image_io;
pub mod synth;

use ndarray::{s, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{FeatureMap, Real};

pub use annotations::{load_dataset, save_dataset, AnnotationFile, ImageFormat};
pub use eval::{evaluate_ap, ApConfig, ApTable};
pub use synth::{generate_dataset, DatasetManifest, GeneratorParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
}

/// One image with its ground truth; pixels are `(3, H, W)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    pub pixels: Array3<f32>,
    pub annotations: Vec<Annotation>,
}

impl ImageSample {
    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn gt(&self) -> Vec<(BBox, usize)> {
        self.annotations.iter().map(|a| (a.bbox, a.class_id)).collect()
    }

    /// Mirror image and boxes left to right.
    pub fn flipped(&self) -> ImageSample {
        let w = self.width() as f64;
        ImageSample {
            id: self.id,
            pixels: self.pixels.slice(s![.., .., ..;-1]).to_owned(),
            annotations: self
                .annotations
                .iter()
                .map(|a| Annotation {
                    bbox: a.bbox.flip_horizontal(w),
                    class_id: a.class_id,
                })
                .collect(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let record = format!("image {}", self.id);
        if self.pixels.shape()[0] != 3 {
            return Err(Error::schema(record, "pixels must have 3 channels"));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        for a in &self.annotations {
            if a.class_id == 0 || a.class_id > num_classes {
                return Err(Error::schema(&record, format!("class {} outside 1..={num_classes}", a.class_id)));
            }
            let b = a.bbox;
            if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w || b.y2 > h {
                return Err(Error::schema(&record, format!("box {:?} leaves the {w}x{h} image", b.to_array())));
            }
        }
        Ok(())
    }
}

/// Stacks equally sized images into a `(3, N, H, W)` map.
pub fn stack_images<T: Real>(images: &[&ImageSample]) -> Result<FeatureMap<T>> {
    let first = images.first().ok_or_else(|| Error::contract("no images to stack"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Array2::zeros((3, images.len() * h * w));
    for (i, img) in images.iter().enumerate() {
        if img.height() != h || img.width() != w {
            return Err(Error::contract(format!(
                "image {} is {}x{}, batch is {w}x{h}",
                img.id,
                img.width(),
                img.height()
            )));
        }
        for (c, plane) in img.pixels.axis_iter(Axis(0)).enumerate() {
            let mut dst = data.slice_mut(s![c, i * h * w..(i + 1) * h * w]);
            for (d, &v) in dst.iter_mut().zip(plane.iter()) {
                *d = T::of(v as f64);
            }
        }
    }
    Ok(FeatureMap::new(data, images.len(), h, w))
}
