//! Lossless image files: 8-bit RGB PNG, or raw little-endian `f32` planes.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use ndarray::Array3;

use crate::error::{Error, Result};

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Png(e.to_string())
}

/// Writes `(3, H, W)` pixels in `[0, 1]` as 8-bit RGB.
pub fn save_png(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let (c, h, w) = pixels.dim();
    if c != 3 {
        return Err(Error::contract(format!("expected 3 channels, got {c}")));
    }
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes.push((pixels[[ch, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

pub fn load_png(path: &Path) -> Result<Array3<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!("{}: only 8-bit images are supported", path.display())));
    }
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(format!("{}: unsupported colour type {other:?}", path.display()))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = &buf[y * info.line_size + x * stride..];
            for c in 0..3 {
                out[[c, y, x]] = p[c] as f32 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Raw `(3, H, W)` float planes, little endian, no header.
pub fn save_raw(path: &Path, pixels: &Array3<f32>) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_raw(path: &Path, width: usize, height: usize) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 3 * width * height * 4 {
        return Err(Error::schema(
            path.display().to_string(),
            format!("raw image holds {} bytes, expected {}", bytes.len(), 12 * width * height),
        ));
    }
    let v: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(Array3::from_shape_vec((3, height, width), v).expect("length checked"))
}
