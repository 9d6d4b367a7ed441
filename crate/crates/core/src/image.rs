//! Single-channel rasters and the pure image math shared by every module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum side length of an image that is fed to the network.
pub const MIN_NETWORK_SIDE: usize = 8;

/// A single-channel, row-major real-valued raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("empty image {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "buffer of {} values does not fill {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.width + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixel-wise combination of two equally shaped images.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.ensure_same_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn ensure_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Check the ingestion invariant: finite values inside `[0, 1]`.
    pub fn validate_unit_range(&self) -> Result<()> {
        for (idx, &v) in self.data.iter().enumerate() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "pixel ({}, {}) = {v} outside [0, 1]",
                    idx / self.width,
                    idx % self.width
                )));
            }
        }
        Ok(())
    }

    pub fn validate_network_shape(&self) -> Result<()> {
        if self.height < MIN_NETWORK_SIDE || self.width < MIN_NETWORK_SIDE {
            return Err(Error::invalid(format!(
                "{}x{} image is below the {MIN_NETWORK_SIDE}x{MIN_NETWORK_SIDE} network minimum",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Sub-image `[top, top + height) x [left, left + width)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid("crop window outside image"));
        }
        Ok(Self::from_fn(height, width, |i, j| self.get(top + i, left + j)))
    }

    /// Pad on the bottom/right edges by replicating the last row/column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Self {
        assert!(height >= self.height && width >= self.width);
        Self::from_fn(height, width, |i, j| {
            self.get(i.min(self.height - 1), j.min(self.width - 1))
        })
    }

    /// SHA-256 over the little-endian pixel bytes, hex encoded.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.data {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn check_kernel(img: &Image2D, kernel: usize) -> Result<()> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::invalid(format!(
            "box blur kernel must be odd and positive, got {kernel}"
        )));
    }
    if kernel > img.height.min(img.width) {
        return Err(Error::invalid(format!(
            "box blur kernel {kernel} exceeds image {}x{}",
            img.height, img.width
        )));
    }
    Ok(())
}

/// One-dimensional replicate-border running mean along rows (`horizontal`)
/// or columns.
fn mean_pass(src: &[f64], h: usize, w: usize, kernel: usize, horizontal: bool) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for d in -r..=r {
                let (ii, jj) = if horizontal {
                    (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                } else {
                    ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                };
                acc += src[ii * w + jj];
            }
            out[i * w + j] = acc * inv;
        }
    }
    out
}

/// Transpose of [`mean_pass`]: scatter each value to the clamped taps.
fn mean_pass_adjoint(src: &[f64], h: usize, w: usize, kernel: usize, horizontal: bool) -> Vec<f64> {
    let r = (kernel / 2) as isize;
    let inv = 1.0 / kernel as f64;
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let g = src[i * w + j] * inv;
            for d in -r..=r {
                let (ii, jj) = if horizontal {
                    (i, (j as isize + d).clamp(0, w as isize - 1) as usize)
                } else {
                    ((i as isize + d).clamp(0, h as isize - 1) as usize, j)
                };
                out[ii * w + jj] += g;
            }
        }
    }
    out
}

/// Unweighted `kernel x kernel` mean filter with edge replication.
pub fn box_blur(img: &Image2D, kernel: usize) -> Result<Image2D> {
    check_kernel(img, kernel)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let tmp = mean_pass(&img.data, h, w, kernel, true);
    let data = mean_pass(&tmp, h, w, kernel, false);
    Image2D::new(h, w, data)
}

/// Adjoint of [`box_blur`] as a linear operator, used to back-propagate
/// through the residual consistency loss.
pub fn box_blur_adjoint(img: &Image2D, kernel: usize) -> Result<Image2D> {
    check_kernel(img, kernel)?;
    if kernel == 1 {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let tmp = mean_pass_adjoint(&img.data, h, w, kernel, false);
    let data = mean_pass_adjoint(&tmp, h, w, kernel, true);
    Image2D::new(h, w, data)
}

/// High-frequency residual `img - box_blur(img, kernel)`.
pub fn local_residual(img: &Image2D, kernel: usize) -> Result<Image2D> {
    let blurred = box_blur(img, kernel)?;
    img.zip_map(&blurred, |a, b| a - b)
}

/// Lossless geometric transforms (index permutations).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Geometry {
    Identity,
    /// Counter-clockwise rotation by `k * 90` degrees; `k` is taken mod 4.
    Rot90(u8),
    HFlip,
    VFlip,
}

impl Geometry {
    pub fn inverse(self) -> Self {
        match self {
            Geometry::Rot90(k) => Geometry::Rot90((4 - k % 4) % 4),
            other => other,
        }
    }
}

pub fn geometric_transform(img: &Image2D, op: Geometry) -> Image2D {
    let (h, w) = img.shape();
    match op {
        Geometry::Identity => img.clone(),
        Geometry::HFlip => Image2D::from_fn(h, w, |i, j| img.get(i, w - 1 - j)),
        Geometry::VFlip => Image2D::from_fn(h, w, |i, j| img.get(h - 1 - i, j)),
        Geometry::Rot90(k) => match k % 4 {
            0 => img.clone(),
            // out[i][j] = in[j][w-1-i], output is w x h
            1 => Image2D::from_fn(w, h, |i, j| img.get(j, w - 1 - i)),
            2 => Image2D::from_fn(h, w, |i, j| img.get(h - 1 - i, w - 1 - j)),
            _ => Image2D::from_fn(w, h, |i, j| img.get(h - 1 - j, i)),
        },
    }
}

/// Rotate by `degrees` about the image centre with bilinear sampling.
/// Samples falling outside the source are clamped to the nearest edge pixel.
pub fn rotate_small(img: &Image2D, degrees: f64) -> Image2D {
    let (h, w) = img.shape();
    let (s, c) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |y: f64, x: f64| -> f64 {
        let y = y.clamp(0.0, h as f64 - 1.0);
        let x = x.clamp(0.0, w as f64 - 1.0);
        let y0 = y.floor() as usize;
        let x0 = x.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let top = img.get(y0, x0) * (1.0 - fx) + img.get(y0, x1) * fx;
        let bot = img.get(y1, x0) * (1.0 - fx) + img.get(y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    Image2D::from_fn(h, w, |i, j| {
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        // inverse mapping: rotate the output coordinate back by -theta
        let sy = c * dy - s * dx + cy;
        let sx = s * dy + c * dx + cx;
        sample(sy, sx)
    })
}

/// Scale deviations from the image mean by `factor`, then clamp to `[0, 1]`.
pub fn contrast_jitter(img: &Image2D, factor: f64) -> Result<Image2D> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::invalid(format!(
            "contrast factor must be positive, got {factor}"
        )));
    }
    let m = img.mean();
    Ok(img.map(|v| (m + factor * (v - m)).clamp(0.0, 1.0)))
}

/// Per-axis area-overlap weights for resampling `n_in` cells onto `n_out`.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let lo = o as f64 * scale;
            let hi = (o + 1) as f64 * scale;
            let first = lo.floor() as usize;
            let last = (hi.ceil() as usize).min(n_in);
            let mut taps = Vec::new();
            for k in first..last {
                let overlap = (hi.min((k + 1) as f64) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((k, overlap / scale));
                }
            }
            taps
        })
        .collect()
}

/// Area-averaging resample to an arbitrary target shape.
///
/// Each output pixel is the overlap-weighted mean of the source pixels its
/// footprint covers, so constants are preserved and an unchanged shape is
/// the identity.
pub fn resample_area(img: &Image2D, height: usize, width: usize) -> Result<Image2D> {
    if height == 0 || width == 0 {
        return Err(Error::invalid("resample target must be non-empty"));
    }
    if img.shape() == (height, width) {
        return Ok(img.clone());
    }
    let (h, w) = img.shape();
    let wy = area_weights(h, height);
    let wx = area_weights(w, width);
    let mut rows = vec![0.0; h * width];
    for i in 0..h {
        for (j, taps) in wx.iter().enumerate() {
            rows[i * width + j] = taps.iter().map(|&(k, wt)| img.get(i, k) * wt).sum();
        }
    }
    let mut out = vec![0.0; height * width];
    for (i, taps) in wy.iter().enumerate() {
        for j in 0..width {
            out[i * width + j] = taps.iter().map(|&(k, wt)| rows[k * width + j] * wt).sum();
        }
    }
    Image2D::new(height, width, out)
}
