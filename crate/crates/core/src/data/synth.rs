//! Seeded synthetic shapes: rectangles, ellipses and triangles on a
//! textured background.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Annotation, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Shape names the renderer understands; a class is one of these.
pub const SHAPES: [&str; 3] = ["rectangle", "ellipse", "triangle"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorParams {
    pub min_objects: usize,
    pub max_objects: usize,
    /// Range of the geometric-mean side length, in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Largest width/height ratio (and its inverse).
    pub max_aspect: f64,
    /// Largest share of an object's pixels that later objects may cover.
    pub max_occlusion: f64,
    pub placement_attempts: usize,
    /// Amplitude of the background texture.
    pub texture: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            min_objects: 1,
            max_objects: 4,
            min_size: 24.0,
            max_size: 96.0,
            max_aspect: 2.0,
            max_occlusion: 0.3,
            placement_attempts: 50,
            texture: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetManifest {
    pub seed: u64,
    pub num_images: usize,
    pub width: usize,
    pub height: usize,
    /// Class `k` (1-based) renders `class_names[k-1]`.
    pub class_names: Vec<String>,
    pub generator: GeneratorParams,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            seed: 0,
            num_images: 8,
            width: 256,
            height: 256,
            class_names: SHAPES.iter().map(|s| s.to_string()).collect(),
            generator: GeneratorParams::default(),
        }
    }
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generator;
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.class_names.is_empty() {
            return Err(Error::Config("class_names must not be empty".into()));
        }
        for (i, n) in self.class_names.iter().enumerate() {
            if !SHAPES.contains(&n.as_str()) {
                return Err(Error::Config(format!("class `{n}` is not one of {SHAPES:?}")));
            }
            if self.class_names[..i].contains(n) {
                return Err(Error::Config(format!("class `{n}` listed twice")));
            }
        }
        if g.min_objects == 0 || g.min_objects > g.max_objects {
            return Err(Error::Config("need 1 <= min_objects <= max_objects".into()));
        }
        if !(g.min_size >= 4.0 && g.min_size <= g.max_size) {
            return Err(Error::Config("need 4 <= min_size <= max_size".into()));
        }
        if g.max_size * g.max_aspect.sqrt() > self.width.min(self.height) as f64 {
            return Err(Error::Config("largest object does not fit the image".into()));
        }
        if !(g.max_aspect >= 1.0) {
            return Err(Error::Config("max_aspect must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&g.max_occlusion) {
            return Err(Error::Config("max_occlusion must lie in [0, 1)".into()));
        }
        if !(0.0..=0.5).contains(&g.texture) {
            return Err(Error::Config("texture must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

/// Snaps to the 8-bit grid so PNG storage is lossless.
pub fn quantize(v: f64) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() as f32 / 255.0
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rectangle,
    Ellipse,
    /// Apex direction 0..4: up, down, left, right.
    Triangle(u8),
}

fn inside(shape: Shape, b: &BBox, x: f64, y: f64) -> bool {
    if !b.contains_point(x, y) {
        return false;
    }
    let (cx, cy) = b.center();
    match shape {
        Shape::Rectangle => true,
        Shape::Ellipse => {
            let u = (x - cx) / (0.5 * b.width());
            let v = (y - cy) / (0.5 * b.height());
            u * u + v * v <= 1.0
        }
        Shape::Triangle(dir) => {
            // distance from the apex edge, scaled to [0, 1]
            let (t, lateral) = match dir {
                0 => ((y - b.y1) / b.height(), (x - cx) / (0.5 * b.width())),
                1 => ((b.y2 - y) / b.height(), (x - cx) / (0.5 * b.width())),
                2 => ((x - b.x1) / b.width(), (y - cy) / (0.5 * b.height())),
                _ => ((b.x2 - x) / b.width(), (y - cy) / (0.5 * b.height())),
            };
            lateral.abs() <= t
        }
    }
}

/// Rasterises a shape at pixel centres.
fn rasterize(shape: Shape, b: &BBox, width: usize, height: usize) -> Vec<(usize, usize)> {
    let (x0, x1) = (b.x1.floor().max(0.0) as usize, (b.x2.ceil() as usize).min(width));
    let (y0, y1) = (b.y1.floor().max(0.0) as usize, (b.y2.ceil() as usize).min(height));
    let mut px = Vec::new();
    for y in y0..y1 {
        for x in x0..x1 {
            if inside(shape, b, x as f64 + 0.5, y as f64 + 0.5) {
                px.push((y, x));
            }
        }
    }
    px
}

fn tight_box(px: &[(usize, usize)]) -> Option<BBox> {
    let xs = px.iter().map(|p| p.1);
    let ys = px.iter().map(|p| p.0);
    let (x1, x2) = (xs.clone().min()?, xs.max()? + 1);
    let (y1, y2) = (ys.clone().min()?, ys.max()? + 1);
    BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).ok()
}

/// A rendered image with the visible pixel set of every object.
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub sample: ImageSample,
    /// Per annotation: every pixel the shape covers before occlusion.
    pub full_masks: Vec<Vec<(usize, usize)>>,
    /// Per annotation: pixels still showing in the final image.
    pub visible: Vec<Array2<bool>>,
}

/// Renders image `index` of the manifest; independent of every other image.
pub fn render_image(m: &DatasetManifest, index: usize) -> RenderedImage {
    let g = &m.generator;
    let (w, h) = (m.width, m.height);
    let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
    rng.set_stream(index as u64);

    let base: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.2..0.8));
    let freq: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(0.02..0.12));
    let phase: [f64; 4] = [0, 1, 2, 3].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let mut img = Array3::<f32>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let wave = 0.5 * ((freq[0] * x as f64 + phase[0]).sin() * (freq[1] * y as f64 + phase[1]).sin())
                + 0.5 * (freq[2] * (x + y) as f64 + phase[2]).sin() * (freq[3] * x as f64 + phase[3]).cos();
            for c in 0..3 {
                let noise: f64 = rng.random_range(-0.5..0.5);
                img[[c, y, x]] = quantize(base[c] + g.texture * (wave + 0.5 * noise));
            }
        }
    }

    let mut owner: Array2<i32> = Array2::from_elem((h, w), -1);
    let mut totals: Vec<usize> = Vec::new();
    let mut annotations = Vec::new();
    let mut full_masks = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let n_obj = rng.random_range(g.min_objects..=g.max_objects);
    for _ in 0..n_obj {
        let class_id = rng.random_range(1..=m.num_classes());
        let shape = match m.class_names[class_id - 1].as_str() {
            "rectangle" => Shape::Rectangle,
            "ellipse" => Shape::Ellipse,
            _ => Shape::Triangle(rng.random_range(0..4u8)),
        };
        let color = loop {
            let c: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(0.0..1.0));
            let contrast = (0..3).map(|k| (c[k] - base[k]).abs()).fold(0.0, f64::max);
            if contrast >= 0.35 {
                break c;
            }
        };
        let mut placed = None;
        for _ in 0..g.placement_attempts {
            let size = rng.random_range(g.min_size..=g.max_size);
            let aspect = g.max_aspect.powf(rng.random_range(-1.0..=1.0));
            let (bw, bh) = (size * aspect.sqrt(), size / aspect.sqrt());
            let x1 = rng.random_range(0.0..=(w as f64 - bw));
            let y1 = rng.random_range(0.0..=(h as f64 - bh));
            let Ok(b) = BBox::new(x1, y1, x1 + bw, y1 + bh) else { continue };
            let px = rasterize(shape, &b, w, h);
            let Some(tight) = tight_box(&px) else { continue };
            if tight.width() < 4.0 || tight.height() < 4.0 {
                continue;
            }
            let mut covered = vec![0usize; totals.len()];
            for &(y, x) in &px {
                if let Ok(j) = usize::try_from(owner[[y, x]]) {
                    covered[j] += 1;
                }
            }
            let visible_now = |j: usize| owner.iter().filter(|&&o| o == j as i32).count();
            let ok = (0..totals.len()).all(|j| {
                covered[j] == 0 || (visible_now(j) - covered[j]) as f64 >= (1.0 - g.max_occlusion) * totals[j] as f64
            });
            if ok {
                placed = Some((px, tight));
                break;
            }
        }
        let Some((px, tight)) = placed else {
            log::warn!("image {index}: no placement within the occlusion limit; object skipped");
            continue;
        };
        let id = totals.len() as i32;
        for &(y, x) in &px {
            owner[[y, x]] = id;
        }
        totals.push(px.len());
        annotations.push(Annotation { bbox: tight, class_id });
        full_masks.push(px);
        colors.push(color);
    }

    for ((y, x), &o) in owner.indexed_iter() {
        if let Ok(j) = usize::try_from(o) {
            // slight shading keeps shapes from being flat colour patches
            let shade = 0.9 + 0.1 * ((x + 2 * y) % 7) as f64 / 6.0;
            for c in 0..3 {
                img[[c, y, x]] = quantize(colors[j][c] * shade);
            }
        }
    }
    let visible = (0..totals.len()).map(|j| owner.mapv(|o| o == j as i32)).collect();
    RenderedImage {
        sample: ImageSample {
            id: index as u64,
            pixels: img,
            annotations,
        },
        full_masks,
        visible,
    }
}

/// Renders every image of the manifest in parallel; the result does not
/// depend on the worker count.
pub fn generate_dataset(m: &DatasetManifest) -> Result<Vec<ImageSample>> {
    m.validate()?;
    Ok((0..m.num_images)
        .into_par_iter()
        .map(|i| render_image(m, i).sample)
        .collect())
}
