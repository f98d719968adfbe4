//! 8-bit grayscale frames tagged with the probe geometry that produced them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::tensor::Tensor;

/// How an ultrasound frame is laid out on screen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    /// Rectangular raster from a linear-array probe.
    Linear,
    /// Fan-shaped raster from a convex-array probe.
    Convex,
}

impl ScanMode {
    pub fn flipped(self) -> Self {
        match self {
            ScanMode::Linear => ScanMode::Convex,
            ScanMode::Convex => ScanMode::Linear,
        }
    }
}

impl fmt::Display for ScanMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScanMode::Linear => "linear",
            ScanMode::Convex => "convex",
        })
    }
}

impl FromStr for ScanMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScanMode::Linear),
            "convex" => Ok(ScanMode::Convex),
            other => Err(Error::param(format!(
                "unknown scan mode {other:?} (expected linear or convex)"
            ))),
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
    mode: ScanMode,
}

impl fmt::Debug for Image {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Image({}×{}, {})", self.width, self.height, self.mode)
    }
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>, mode: ScanMode) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("image extents must be positive, got {width}×{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::dim(format!(
                "{width}×{height} image needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
            mode,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8, mode: ScanMode) -> Self {
        Self::new(width, height, vec![value; width * height], mode).expect("positive extents")
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mode: ScanMode, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self::new(width, height, pixels, mode).expect("positive extents")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn mode(&self) -> ScanMode {
        self.mode
    }

    pub fn with_mode(mut self, mode: ScanMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Pixel values as `f64` in `0..=255`, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| f64::from(p)).collect()
    }

    /// Single-channel `1×h×w` tensor scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
        )
    }

    /// `h×w` grid of `{0, 1}` values, treating any pixel above 127 as set.
    pub fn to_binary_grid(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.height, self.width],
            self.pixels.iter().map(|&p| if p > 127 { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Quantises a `[0, 1]` probability grid to `round(255·p)`.
    pub fn from_probability(grid: &Tensor, mode: ScanMode) -> Result<Self> {
        let (h, w) = grid.dims2()?;
        let pixels = grid.data().iter().map(|&p| quantize(p * 255.0)).collect();
        Self::new(w, h, pixels, mode)
    }

    pub fn read_png(path: impl AsRef<Path>, mode: ScanMode) -> Result<Self> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?;
        let luma = decoded.into_luma8();
        let (w, h) = luma.dimensions();
        Self::new(w as usize, h as usize, luma.into_raw(), mode)
    }

    /// Writes an 8-bit grayscale PNG. The file appears only once fully
    /// written.
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        let encoder = image::codecs::png::PngEncoder::new(&mut buf);
        image::ImageEncoder::write_image(
            encoder,
            &self.pixels,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        write_atomic(path, &buf)
    }
}

/// Rounds half away from zero and saturates to `0..=255`.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}
