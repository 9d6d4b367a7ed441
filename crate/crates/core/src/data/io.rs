//! Image files.
//!
//! Images are stored as lossless 16-bit grayscale PNG. The stored integer
//! `raw` maps to a value by `offset + scale * raw / 65535`, where the
//! mapping comes from the sidecar record (identity when absent). Raw
//! little-endian `f32` arrays (`.f32`) are accepted as an alternate format;
//! their height and width must be given in the sidecar.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image2D;

/// Tolerance for values that land just outside `[0, 1]` through float
/// rounding of the intensity mapping.
const RANGE_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityMapping {
    pub offset: f64,
    pub scale: f64,
}

impl Default for IntensityMapping {
    fn default() -> Self {
        Self {
            offset: 0.0,
            scale: 1.0,
        }
    }
}

impl IntensityMapping {
    pub fn apply(&self, unit: f64) -> f64 {
        self.offset + self.scale * unit
    }
}

/// Sidecar record `meta/<id>.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleMeta {
    pub attenuation: IntensityMapping,
    pub darkfield: IntensityMapping,
    /// Required for raw `.f32` images.
    pub height: Option<usize>,
    pub width: Option<usize>,
}

/// Decode a PNG into values `raw / max_raw` in `[0, 1]`. Colour images are
/// reduced to luma; alpha is ignored.
pub fn read_png(path: &Path) -> Result<Image2D> {
    let fail = |e: &dyn std::fmt::Display| Error::ingestion(path, e.to_string());
    let file = fs::File::open(path).map_err(|e| fail(&e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| fail(&e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::ingestion(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| fail(&e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let max = if wide { 65535.0 } else { 255.0 };
    let sample = |k: usize| -> f64 {
        if wide {
            u16::from_be_bytes([buf[2 * k], buf[2 * k + 1]]) as f64
        } else {
            buf[k] as f64
        }
    };
    let stride = info.line_size / if wide { 2 } else { 1 };
    let mut data = Vec::with_capacity(w * h);
    for i in 0..h {
        for j in 0..w {
            let base = i * stride + j * channels;
            let v = match channels {
                1 | 2 => sample(base),
                _ => 0.299 * sample(base) + 0.587 * sample(base + 1) + 0.114 * sample(base + 2),
            };
            data.push(v / max);
        }
    }
    Image2D::new(h, w, data)
}

fn read_f32(path: &Path, meta: Option<&SampleMeta>) -> Result<Image2D> {
    let (h, w) = match meta {
        Some(SampleMeta {
            height: Some(h),
            width: Some(w),
            ..
        }) => (*h, *w),
        _ => return Err(Error::ingestion(path, "raw f32 image needs height and width in its sidecar")),
    };
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    if bytes.len() != h * w * 4 {
        return Err(Error::ingestion(
            path,
            format!("expected {} bytes for {h}x{w}, found {}", h * w * 4, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Image2D::new(h, w, data)
}

/// Read an image in either supported format, apply `mapping` and check that
/// every value lies in `[0, 1]`.
pub fn read_image(path: &Path, meta: Option<&SampleMeta>, mapping: IntensityMapping) -> Result<Image2D> {
    let raw = match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path)?,
        Some("f32") => read_f32(path, meta)?,
        _ => return Err(Error::ingestion(path, "unsupported image format")),
    };
    let img = raw.map(|v| mapping.apply(v));
    for &v in img.as_slice() {
        if !v.is_finite() || !(-RANGE_SLACK..=1.0 + RANGE_SLACK).contains(&v) {
            return Err(Error::ingestion(path, format!("value {v} outside [0, 1] after normalization")));
        }
    }
    Ok(img.clamp01())
}

/// Write `img` as 16-bit grayscale, encoding `[lo, hi]` onto the full
/// integer range. Returns the mapping that decodes the file.
pub fn write_png16(path: &Path, img: &Image2D, lo: f64, hi: f64) -> Result<IntensityMapping> {
    if !(hi > lo) {
        return Err(Error::invalid(format!("empty encoding range [{lo}, {hi}]")));
    }
    let bytes: Vec<u8> = img
        .as_slice()
        .iter()
        .flat_map(|&v| {
            let q = ((v - lo) / (hi - lo) * 65535.0).round().clamp(0.0, 65535.0) as u16;
            q.to_be_bytes()
        })
        .collect();
    write_png(path, img.width(), img.height(), png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)?;
    Ok(IntensityMapping {
        offset: lo,
        scale: hi - lo,
    })
}

/// Write interleaved 8-bit RGB pixels.
pub fn write_rgb_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::invalid("rgb buffer does not match the image size"));
    }
    write_png(path, width, height, png::ColorType::Rgb, png::BitDepth::Eight, rgb)
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    data: &[u8],
) -> Result<()> {
    let encode_err = |e: png::EncodingError| Error::Io(std::io::Error::other(e));
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    let mut writer = enc.write_header().map_err(encode_err)?;
    writer.write_image_data(data).map_err(encode_err)?;
    writer.finish().map_err(encode_err)?;
    Ok(())
}
