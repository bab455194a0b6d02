//! Versioned parameter checkpoints: a JSON manifest plus one little-endian
//! blob holding every tensor back to back.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Detector, DetectorSpec};
use crate::error::{Error, Result};
use crate::nn::{Module, Real};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub spec: DetectorSpec,
    pub seed: u64,
    pub entries: Vec<TensorEntry>,
}

fn dtype_width(dtype: &str) -> Result<usize> {
    match dtype {
        "f32" => Ok(4),
        "f64" => Ok(8),
        other => Err(Error::schema(MANIFEST_FILE, format!("unsupported dtype `{other}`"))),
    }
}

/// Writes `det` (parameters and normalisation buffers) into directory `dir`.
pub fn save<T: Real>(det: &Detector<T>, seed: u64, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    det.visit("", &mut |name, p| {
        let offset = blob.len();
        for v in p.value.iter() {
            v.write_le(&mut blob);
        }
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset,
            len: p.value.len(),
        });
    });
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        spec: det.spec.clone(),
        seed,
        entries,
    };
    let bin = dir.join(PARAMS_FILE);
    let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&blob).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(MANIFEST_FILE);
    fs::write(&man, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&man, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let man = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::schema(
            MANIFEST_FILE,
            format!("checkpoint version {} is not {CHECKPOINT_VERSION}", m.version),
        ));
    }
    Ok(m)
}

/// Rebuilds the detector described by the manifest and fills in every
/// tensor; values are converted when the stored precision differs.
pub fn load<T: Real>(dir: &Path) -> Result<Detector<T>> {
    let m = read_manifest(dir)?;
    let bin = dir.join(PARAMS_FILE);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut det = Detector::<T>::new(m.spec.clone(), m.seed)?;
    let by_name: HashMap<&str, &TensorEntry> = m.entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let mut err: Option<Error> = None;
    let mut seen = 0;
    det.visit_mut("", &mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(e) = by_name.get(name) else {
            err = Some(Error::schema(name, "tensor missing from checkpoint"));
            return;
        };
        seen += 1;
        if e.shape != p.value.shape() || e.len != p.value.len() {
            err = Some(Error::schema(name, format!("shape {:?} does not match model {:?}", e.shape, p.value.shape())));
            return;
        }
        let width = match dtype_width(&e.dtype) {
            Ok(w) => w,
            Err(x) => {
                err = Some(x);
                return;
            }
        };
        let end = e.offset + e.len * width;
        if end > blob.len() {
            err = Some(Error::schema(name, "tensor extends past the end of the blob"));
            return;
        }
        let bytes = &blob[e.offset..end];
        for (v, chunk) in p.value.iter_mut().zip(bytes.chunks_exact(width)) {
            *v = if width == 4 {
                T::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64)
            } else {
                T::of(f64::from_le_bytes(chunk.try_into().expect("8 bytes")))
            };
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen != m.entries.len() {
        return Err(Error::schema(MANIFEST_FILE, "checkpoint holds tensors the model does not have"));
    }
    Ok(det)
}
