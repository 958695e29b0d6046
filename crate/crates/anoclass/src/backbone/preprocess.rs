//! Image loading and backbone input preprocessing.
//!
//! Convention: resize the shorter side so that a center crop of the requested
//! input size matches the usual 256-resize / 224-crop ratio, then normalize
//! with the standard pretrained-backbone channel statistics.

use std::path::Path;

use image::imageops::FilterType;
use image::RgbImage;
use ndarray::Array3;

use crate::error::{Error, Result};

pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Resize target for the shorter side, relative to the crop size (256/224).
pub const RESIZE_RATIO: f64 = 256.0 / 224.0;

pub const MIN_IMAGE_SIDE: u32 = 64;

/// An RGB image with the minimum-size invariant enforced at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTensor {
    pixels: RgbImage,
}

impl ImageTensor {
    pub fn new(pixels: RgbImage) -> Result<Self> {
        if pixels.height() < MIN_IMAGE_SIDE || pixels.width() < MIN_IMAGE_SIDE {
            return Err(Error::Argument(format!(
                "image is {}x{}, both sides must be at least {MIN_IMAGE_SIDE}",
                pixels.width(),
                pixels.height()
            )));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::load(path, e.to_string()))?
            .to_rgb8();
        ImageTensor::new(img)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.pixels
            .save(path)
            .map_err(|e| Error::load(path, e.to_string()))
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn as_rgb(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn into_rgb(self) -> RgbImage {
        self.pixels
    }

    /// Uniform canvas constructor, used by synthesis and tests.
    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self> {
        ImageTensor::new(RgbImage::from_pixel(width, height, image::Rgb(rgb)))
    }
}

/// Resizes the shorter side to `round(size * 256/224)`, center-crops to
/// `size`x`size` and normalizes to a (3, size, size) float tensor.
pub fn preprocess(img: &ImageTensor, size: usize) -> Result<Array3<f32>> {
    if size < MIN_IMAGE_SIDE as usize || size % 32 != 0 {
        return Err(Error::Argument(format!(
            "input size {size} must be a multiple of 32 and at least {MIN_IMAGE_SIDE}"
        )));
    }
    let (w, h) = (img.width() as f64, img.height() as f64);
    let short = (size as f64 * RESIZE_RATIO).round();
    let (new_w, new_h) = if w <= h {
        (short, (h * short / w).round())
    } else {
        ((w * short / h).round(), short)
    };
    let resized = image::imageops::resize(
        img.as_rgb(),
        new_w as u32,
        new_h as u32,
        FilterType::Triangle,
    );

    let x0 = (resized.width() as usize - size) / 2;
    let y0 = (resized.height() as usize - size) / 2;
    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let p = resized.get_pixel((x0 + x) as u32, (y0 + y) as u32);
            for c in 0..3 {
                out[(c, y, x)] = (p[c] as f32 / 255.0 - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            }
        }
    }
    Ok(out)
}
