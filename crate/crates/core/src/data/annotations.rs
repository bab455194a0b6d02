//! Annotation JSON: images, boxes and categories, validated on load.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::image_io::{load_png, load_raw, save_png, save_raw};
use super::{Annotation, ImageSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub id: u64,
    pub width: usize,
    pub height: usize,
    /// Path relative to the annotation file.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: u64,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Category {
    pub id: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageFormat {
    Png,
    Raw,
}

impl ImageFormat {
    fn extension(self) -> &'static str {
        match self {
            ImageFormat::Png => "png",
            ImageFormat::Raw => "f32",
        }
    }
}

impl AnnotationFile {
    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut c = self.categories.clone();
        c.sort_by_key(|c| c.id);
        c.into_iter().map(|c| c.name).collect()
    }

    /// Rejects the first record that breaks the schema, naming it.
    pub fn validate(&self) -> Result<()> {
        let mut cat_ids: Vec<usize> = self.categories.iter().map(|c| c.id).collect();
        cat_ids.sort_unstable();
        if cat_ids != (1..=cat_ids.len()).collect::<Vec<_>>() {
            return Err(Error::schema("categories", format!("ids must be exactly 1..=N, got {cat_ids:?}")));
        }
        let mut sizes = HashMap::new();
        for (i, im) in self.images.iter().enumerate() {
            let rec = format!("images[{i}] (id {})", im.id);
            if im.width == 0 || im.height == 0 {
                return Err(Error::schema(rec, "width and height must be positive"));
            }
            if im.file.is_empty() {
                return Err(Error::schema(rec, "file must not be empty"));
            }
            if sizes.insert(im.id, (im.width, im.height)).is_some() {
                return Err(Error::schema(rec, "duplicate image id"));
            }
        }
        for (i, a) in self.annotations.iter().enumerate() {
            let rec = format!("annotations[{i}] (image {})", a.image_id);
            let Some(&(w, h)) = sizes.get(&a.image_id) else {
                return Err(Error::schema(rec, "unknown image_id"));
            };
            if a.class_id == 0 || a.class_id > cat_ids.len() {
                return Err(Error::schema(rec, format!("class_id {} has no category", a.class_id)));
            }
            let [x1, y1, x2, y2] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) {
                return Err(Error::schema(rec, "box coordinates must be finite"));
            }
            if x2 <= x1 || y2 <= y1 {
                return Err(Error::schema(rec, format!("box {:?} needs x2 > x1 and y2 > y1", a.bbox)));
            }
            if x1 < 0.0 || y1 < 0.0 || x2 > w as f64 || y2 > h as f64 {
                return Err(Error::schema(rec, format!("box {:?} leaves the {w}x{h} image", a.bbox)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let f: AnnotationFile = serde_json::from_str(text).map_err(|e| Error::schema(ANNOTATION_FILE, e.to_string()))?;
        f.validate()?;
        Ok(f)
    }

    /// Ground truth of every image id.
    pub fn ground_truth(&self) -> HashMap<u64, Vec<Annotation>> {
        let mut out: HashMap<u64, Vec<Annotation>> = self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            let bbox = BBox::try_from(a.bbox).expect("validated box");
            out.entry(a.image_id).or_default().push(Annotation {
                bbox,
                class_id: a.class_id,
            });
        }
        out
    }
}

/// Writes images under `dir/images/` and the annotation file at
/// `dir/annotations.json`; returns the annotation path.
pub fn save_dataset(dir: &Path, samples: &[ImageSample], class_names: &[String], format: ImageFormat) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut file = AnnotationFile {
        categories: class_names
            .iter()
            .enumerate()
            .map(|(i, n)| Category { id: i + 1, name: n.clone() })
            .collect(),
        ..Default::default()
    };
    for s in samples {
        let rel = format!("images/{:06}.{}", s.id, format.extension());
        let path = dir.join(&rel);
        match format {
            ImageFormat::Png => save_png(&path, &s.pixels)?,
            ImageFormat::Raw => save_raw(&path, &s.pixels)?,
        }
        file.images.push(ImageRecord {
            id: s.id,
            width: s.width(),
            height: s.height(),
            file: rel,
        });
        file.annotations.extend(s.annotations.iter().map(|a| AnnotationRecord {
            image_id: s.id,
            class_id: a.class_id,
            bbox: a.bbox.to_array(),
        }));
    }
    file.validate()?;
    let path = dir.join(ANNOTATION_FILE);
    fs::write(&path, serde_json::to_string_pretty(&file)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads an annotation file and every image it lists.
pub fn load_dataset(path: &Path) -> Result<(AnnotationFile, Vec<ImageSample>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = AnnotationFile::parse(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut gt = file.ground_truth();
    let mut out = Vec::with_capacity(file.images.len());
    for im in &file.images {
        let p = root.join(&im.file);
        let pixels = if im.file.ends_with(".png") {
            load_png(&p)?
        } else {
            load_raw(&p, im.width, im.height)?
        };
        if pixels.shape()[1] != im.height || pixels.shape()[2] != im.width {
            return Err(Error::schema(
                format!("image {}", im.id),
                format!("file is {}x{}, record says {}x{}", pixels.shape()[2], pixels.shape()[1], im.width, im.height),
            ));
        }
        out.push(ImageSample {
            id: im.id,
            pixels,
            annotations: gt.remove(&im.id).unwrap_or_default(),
        });
    }
    let ids: HashSet<u64> = out.iter().map(|s| s.id).collect();
    debug_assert_eq!(ids.len(), out.len());
    Ok((file, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_dataset, DatasetManifest};

    #[test]
    fn empty_dataset_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = save_dataset(dir.path(), &[], &["rectangle".to_string()], ImageFormat::Png).unwrap();
        let (file, samples) = load_dataset(&path).unwrap();
        assert!(samples.is_empty());
        assert_eq!(file.class_names(), vec!["rectangle".to_string()]);
    }

    #[test]
    fn generated_set_roundtrips_bit_equal() {
        let m = DatasetManifest {
            num_images: 3,
            width: 128,
            height: 128,
            generator: crate::data::GeneratorParams {
                max_size: 64.0,
                ..Default::default()
            },
            ..Default::default()
        };
        let data = generate_dataset(&m).unwrap();
        for format in [ImageFormat::Png, ImageFormat::Raw] {
            let dir = tempfile::tempdir().unwrap();
            let path = save_dataset(dir.path(), &data, &m.class_names, format).unwrap();
            let (_, back) = load_dataset(&path).unwrap();
            assert_eq!(back, data);
        }
    }

    #[test]
    fn malformed_records_named() {
        let good = r#"{"images":[{"id":1,"width":10,"height":10,"file":"a.png"}],
            "annotations":[{"image_id":1,"class_id":1,"box":[1,1,5,5]}],
            "categories":[{"id":1,"name":"rectangle"}]}"#;
        assert!(AnnotationFile::parse(good).is_ok());
        let bad_box = good.replace("[1,1,5,5]", "[5,1,5,5]");
        let err = AnnotationFile::parse(&bad_box).unwrap_err().to_string();
        assert!(err.contains("annotations[0]"), "{err}");
        let bad_image = good.replace("\"image_id\":1", "\"image_id\":7");
        assert!(AnnotationFile::parse(&bad_image).unwrap_err().to_string().contains("unknown image_id"));
        let extra = good.replace("\"file\":\"a.png\"", "\"file\":\"a.png\",\"extra\":1");
        assert!(AnnotationFile::parse(&extra).is_err());
        let outside = good.replace("[1,1,5,5]", "[1,1,5,11]");
        assert!(AnnotationFile::parse(&outside).is_err());
    }
}
