//! RGB float images and crop-then-resize preprocessing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxgeom::{BBox, ImageDims};
use crate::error::{Error, Result};

/// Interleaved RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != 3 * width as usize * height as usize {
            return Err(Error::InvalidInput(format!(
                "rgb buffer of {} values does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::parse(path, e))?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        let rgb = img.to_rgb8();
        let (width, height) = rgb.dimensions();
        let data = rgb
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect();
        Self {
            width,
            height,
            data,
        }
    }

    pub fn dims(&self) -> ImageDims {
        ImageDims {
            width: self.width,
            height: self.height,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn as_raw(&self) -> &[f32] {
        &self.data
    }

    /// Planar `[3, H, W]` tensor data after per-channel normalization.
    pub fn to_chw(&self, mean: [f32; 3], std: [f32; 3]) -> Vec<f32> {
        let plane = self.width as usize * self.height as usize;
        let mut out = vec![0.0; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = (px[c] - mean[c]) / std[c];
            }
        }
        out
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, out_w: u32, out_h: u32) -> RgbImage {
        let sx = self.width as f32 / out_w as f32;
        let sy = self.height as f32 / out_h as f32;
        let max_x = (self.width - 1) as f32;
        let max_y = (self.height - 1) as f32;
        RgbImage::from_fn(out_w, out_h, |x, y| {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, max_y);
            let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
            let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
            let (tx, ty) = (fx - x0 as f32, fy - y0 as f32);
            let (p00, p10) = (self.pixel(x0, y0), self.pixel(x1, y0));
            let (p01, p11) = (self.pixel(x0, y1), self.pixel(x1, y1));
            let mut out = [0.0; 3];
            for c in 0..3 {
                let top = p00[c] + (p10[c] - p00[c]) * tx;
                let bottom = p01[c] + (p11[c] - p01[c]) * tx;
                out[c] = top + (bottom - top) * ty;
            }
            out
        })
    }

    fn sub_image(&self, x0: u32, y0: u32, x1: u32, y1: u32) -> RgbImage {
        RgbImage::from_fn(x1 - x0, y1 - y0, |x, y| self.pixel(x0 + x, y0 + y))
    }
}

/// Encoder input preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub side: u32,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        // CLIP normalization constants
        Self {
            side: 224,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_6, 0.275_777_1],
        }
    }
}

/// Integer pixel window for a real-valued box, corners rounded half-to-even
/// and clamped into the image.
pub fn pixel_window(bbox: &BBox, dims: ImageDims) -> Result<(u32, u32, u32, u32)> {
    let round = |v: f64, limit: u32| v.round_ties_even().clamp(0.0, limit as f64) as u32;
    let x0 = round(bbox.min_x, dims.width);
    let y0 = round(bbox.min_y, dims.height);
    let x1 = round(bbox.max_x, dims.width);
    let y1 = round(bbox.max_y, dims.height);
    if !bbox.is_valid() || x1 <= x0 || y1 <= y0 {
        return Err(Error::InvalidCrop(format!(
            "box {:?} has zero area after rounding",
            <[f64; 4]>::from(*bbox)
        )));
    }
    Ok((x0, y0, x1, y1))
}

/// Crop `image` to `bbox` and resize the crop to `spec.side` squared.
pub fn crop_resize(image: &RgbImage, bbox: &BBox, spec: &PreprocessSpec) -> Result<RgbImage> {
    if spec.side == 0 {
        return Err(Error::InvalidParameter(
            "preprocess side must be >= 1".into(),
        ));
    }
    let (x0, y0, x1, y1) = pixel_window(bbox, image.dims())?;
    let crop = if (x0, y0, x1, y1) == (0, 0, image.width, image.height) {
        image.clone()
    } else {
        image.sub_image(x0, y0, x1, y1)
    };
    if crop.width == spec.side && crop.height == spec.side {
        return Ok(crop);
    }
    Ok(crop.resize(spec.side, spec.side))
}
