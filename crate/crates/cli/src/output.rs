use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::Array3;
use saderkit::{Error, Result};

/// Writes a `[C, H, W]` image as planar little-endian float32.
pub fn write_f32(path: &Path, img: &Array3<f32>) -> Result<()> {
    let bytes: Vec<u8> = img.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32(path: &Path, (c, h, w): (usize, usize, usize)) -> Result<Array3<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::data(path, e.to_string()))?;
    if bytes.len() != c * h * w * 4 {
        return Err(Error::data(
            path,
            format!("expected {} float32 values for {c}x{h}x{w}, found {} bytes", c * h * w, bytes.len()),
        ));
    }
    let values: Vec<f32> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::data(path, "non-finite prediction"));
    }
    Array3::from_shape_vec((c, h, w), values).map_err(|e| Error::data(path, e.to_string()))
}

/// Renders three bands of a `[0, 1]` image as an 8-bit RGB preview.
pub fn write_png(path: &Path, img: &Array3<f32>, bands: [usize; 3]) -> Result<()> {
    let (c, h, w) = img.dim();
    if let Some(b) = bands.iter().find(|&&b| b >= c) {
        return Err(Error::config(format!("preview band {b} out of range for {c} channels")));
    }
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let out = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        Rgb(bands.map(|b| to_u8(img[(b, i, j)])))
    });
    out.save(path).map_err(|e| Error::data(path, e.to_string()))
}
