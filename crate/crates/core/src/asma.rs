//! Scan-mode augmentation: converting between convex-array (fan) and
//! linear-array (rectangular) ultrasound frames.
//!
//! A fan image lives on a cartesian canvas whose apex sits at
//! `(origin_x, origin_y)`, with `x` to the right along the top edge and `y`
//! pointing down. A beam at angle `θ` (measured from the top edge) and depth
//! `r` lands at
//!
//! ```text
//! x = origin_x + r·cos θ,   y = origin_y + r·sin θ
//! ```
//!
//! The linear image is the `(r, θ)` rectangle: row `i` is depth, column `j`
//! is angle, both sampled uniformly over the configured ranges. Converting
//! back inverts the mapping with `r = √(Δx² + Δy²)` and
//! `θ = atan2(Δy, Δx)` relative to the apex.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, Image, ScanMode};
use crate::tensor::bilinear_sample;

/// Fan geometry shared by both conversion directions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolarGeometry {
    /// Fan apex in canvas pixels. The apex may sit above the canvas
    /// (`origin_y < 0`) but not below or beside it.
    pub origin_x: f64,
    pub origin_y: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Radians from the top edge, increasing clockwise on screen.
    pub theta_min: f64,
    pub theta_max: f64,
    /// Extents of the `(r, θ)` rectangle.
    pub out_rows: usize,
    pub out_cols: usize,
    /// Extents of the cartesian canvas holding the fan.
    pub canvas_width: usize,
    pub canvas_height: usize,
}

impl PolarGeometry {
    /// Default fan for a `width×height` canvas: apex at the top centre,
    /// `θ ∈ [π/4, 3π/4]`, `r ∈ [0.1·h, 0.95·h]`, and a rectangle the same
    /// size as the canvas.
    pub fn for_canvas(width: usize, height: usize) -> Self {
        let h = height as f64;
        Self {
            origin_x: width as f64 / 2.0,
            origin_y: 0.0,
            r_min: 0.1 * h,
            r_max: 0.95 * h,
            theta_min: FRAC_PI_4,
            theta_max: 3.0 * FRAC_PI_4,
            out_rows: height,
            out_cols: width,
            canvas_width: width,
            canvas_height: height,
        }
    }

    pub fn with_grid(mut self, rows: usize, cols: usize) -> Self {
        self.out_rows = rows;
        self.out_cols = cols;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.origin_x,
            self.origin_y,
            self.r_min,
            self.r_max,
            self.theta_min,
            self.theta_max,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("geometry values must be finite"));
        }
        if self.r_min < 0.0 || self.r_max <= self.r_min {
            return Err(Error::param(format!(
                "need 0 ≤ r_min < r_max, got r_min={} r_max={}",
                self.r_min, self.r_max
            )));
        }
        let span = self.theta_max - self.theta_min;
        if !(span > 0.0 && span <= PI) {
            return Err(Error::param(format!(
                "theta span must lie in (0, π], got [{}, {}]",
                self.theta_min, self.theta_max
            )));
        }
        if self.out_rows < 2 || self.out_cols < 2 {
            return Err(Error::param(format!(
                "target grid must be at least 2×2, got {}×{}",
                self.out_rows, self.out_cols
            )));
        }
        if self.canvas_width == 0 || self.canvas_height == 0 {
            return Err(Error::param("canvas extents must be positive"));
        }
        let max_x = (self.canvas_width - 1) as f64;
        let max_y = (self.canvas_height - 1) as f64;
        if !(0.0..=max_x).contains(&self.origin_x) || self.origin_y > max_y {
            return Err(Error::param(format!(
                "apex ({}, {}) must lie within or above the {}×{} canvas",
                self.origin_x, self.origin_y, self.canvas_width, self.canvas_height
            )));
        }
        Ok(())
    }

    fn r_step(&self) -> f64 {
        (self.r_max - self.r_min) / (self.out_rows - 1) as f64
    }

    fn theta_step(&self) -> f64 {
        (self.theta_max - self.theta_min) / (self.out_cols - 1) as f64
    }

    /// Depth and angle of rectangle cell `(row, col)`.
    pub fn cell_polar(&self, row: f64, col: f64) -> (f64, f64) {
        (
            self.r_min + row * self.r_step(),
            self.theta_min + col * self.theta_step(),
        )
    }

    /// Canvas position `(x, y)` of a polar coordinate.
    pub fn polar_to_canvas(&self, r: f64, theta: f64) -> (f64, f64) {
        (
            self.origin_x + r * theta.cos(),
            self.origin_y + r * theta.sin(),
        )
    }

    /// Polar coordinate of a canvas position, relative to the apex.
    pub fn canvas_to_polar(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.origin_x;
        let dy = y - self.origin_y;
        (dx.hypot(dy), dy.atan2(dx))
    }

    /// Fractional rectangle cell `(row, col)` for a canvas pixel, or `None`
    /// when the pixel lies outside the fan.
    pub fn canvas_to_cell(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (r, theta) = self.canvas_to_polar(x, y);
        if r < self.r_min || r > self.r_max || theta < self.theta_min || theta > self.theta_max {
            return None;
        }
        let row = ((r - self.r_min) / self.r_step()).min((self.out_rows - 1) as f64);
        let col = ((theta - self.theta_min) / self.theta_step()).min((self.out_cols - 1) as f64);
        Some((row, col))
    }

    /// Row-major canvas mask of pixels inside the fan.
    pub fn fan_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.canvas_width * self.canvas_height);
        for y in 0..self.canvas_height {
            for x in 0..self.canvas_width {
                mask.push(self.canvas_to_cell(x as f64, y as f64).is_some());
            }
        }
        mask
    }
}

fn expect_mode(img: &Image, mode: ScanMode) -> Result<()> {
    if img.mode() != mode {
        return Err(Error::param(format!("expected a {mode} image, got {}", img.mode())));
    }
    Ok(())
}

/// Resamples a fan image onto the `(r, θ)` rectangle. Samples that fall
/// outside the source canvas read as 0.
pub fn convex_to_linear(img: &Image, geom: &PolarGeometry) -> Result<Image> {
    expect_mode(img, ScanMode::Convex)?;
    geom.validate()?;
    let src = img.to_f64();
    let (w, h) = (img.width(), img.height());

    let trig: Vec<(f64, f64)> = (0..geom.out_cols)
        .map(|j| {
            let (_, theta) = geom.cell_polar(0.0, j as f64);
            (theta.cos(), theta.sin())
        })
        .collect();

    let mut out = Vec::with_capacity(geom.out_rows * geom.out_cols);
    for i in 0..geom.out_rows {
        let (r, _) = geom.cell_polar(i as f64, 0.0);
        for &(cos, sin) in &trig {
            let x = geom.origin_x + r * cos;
            let y = geom.origin_y + r * sin;
            out.push(quantize(bilinear_sample(&src, h, w, y, x, 0.0)));
        }
    }
    Image::new(geom.out_cols, geom.out_rows, out, ScanMode::Linear)
}

/// Paints a rectangle image into the fan on a fresh canvas. Pixels outside
/// the fan are 0.
pub fn linear_to_convex(img: &Image, geom: &PolarGeometry) -> Result<Image> {
    expect_mode(img, ScanMode::Linear)?;
    geom.validate()?;
    if img.width() != geom.out_cols || img.height() != geom.out_rows {
        return Err(Error::dim(format!(
            "linear image is {}×{} but the geometry grid is {}×{} (cols×rows)",
            img.width(),
            img.height(),
            geom.out_cols,
            geom.out_rows
        )));
    }
    let src = img.to_f64();
    let mut out = Vec::with_capacity(geom.canvas_width * geom.canvas_height);
    for y in 0..geom.canvas_height {
        for x in 0..geom.canvas_width {
            let v = match geom.canvas_to_cell(x as f64, y as f64) {
                Some((row, col)) => {
                    bilinear_sample(&src, geom.out_rows, geom.out_cols, row, col, 0.0)
                }
                None => 0.0,
            };
            out.push(quantize(v));
        }
    }
    Image::new(geom.canvas_width, geom.canvas_height, out, ScanMode::Convex)
}

/// Square erosion of a row-major mask; cells beyond the border count as
/// unset.
fn erode(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    let mut out = vec![false; mask.len()];
    for y in radius..height.saturating_sub(radius) {
        for x in radius..width.saturating_sub(radius) {
            out[y * width + x] = (y - radius..=y + radius)
                .all(|yy| (x - radius..=x + radius).all(|xx| mask[yy * width + xx]));
        }
    }
    out
}

const INTERIOR_MARGIN: usize = 2;

/// Mean absolute error, as a fraction of full scale, between `img` and its
/// conversion to the other scan mode and back, measured over the interior
/// of the valid region (eroded by 2 px).
///
/// For a fan image the valid region is the fan; for a rectangle it is the
/// set of cells whose fan position lands on the canvas.
pub fn roundtrip_error(img: &Image, geom: &PolarGeometry) -> Result<f64> {
    let (back, valid) = match img.mode() {
        ScanMode::Convex => {
            let linear = convex_to_linear(img, geom)?;
            let back = linear_to_convex(&linear, geom)?;
            (back, geom.fan_mask())
        }
        ScanMode::Linear => {
            let convex = linear_to_convex(img, geom)?;
            let back = convex_to_linear(&convex, geom)?;
            let (cw, ch) = (geom.canvas_width as f64, geom.canvas_height as f64);
            let mut valid = Vec::with_capacity(geom.out_rows * geom.out_cols);
            for i in 0..geom.out_rows {
                for j in 0..geom.out_cols {
                    let (r, t) = geom.cell_polar(i as f64, j as f64);
                    let (x, y) = geom.polar_to_canvas(r, t);
                    valid.push(x >= 0.0 && y >= 0.0 && x <= cw - 1.0 && y <= ch - 1.0);
                }
            }
            (back, valid)
        }
    };
    if back.width() != img.width() || back.height() != img.height() {
        return Err(Error::dim(format!(
            "round trip produced {}×{} from a {}×{} image; check the geometry canvas",
            back.width(),
            back.height(),
            img.width(),
            img.height()
        )));
    }
    let interior = erode(&valid, img.width(), img.height(), INTERIOR_MARGIN);
    let mut total = 0.0;
    let mut count = 0usize;
    for ((&a, &b), &keep) in img.pixels().iter().zip(back.pixels()).zip(&interior) {
        if keep {
            total += (f64::from(a) - f64::from(b)).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::param("round-trip interior region is empty"));
    }
    Ok(total / count as f64 / 255.0)
}

/// Converts the other scan mode using the default fan for the image's
/// extents.
pub fn convert_default(img: &Image) -> Result<Image> {
    let geom = PolarGeometry::for_canvas(img.width(), img.height());
    match img.mode() {
        ScanMode::Convex => convex_to_linear(img, &geom),
        ScanMode::Linear => linear_to_convex(img, &geom),
    }
}

/// Appends converted copies of randomly chosen majority-mode frames until
/// both modes are equally represented. Originals are kept in their original
/// order; conversions are appended in ascending source order. The choice of
/// frames depends only on `seed`.
pub fn balance_dataset(images: &[Image], seed: u64) -> Result<Vec<Image>> {
    if images.is_empty() {
        return Err(Error::param("cannot balance an empty dataset"));
    }
    let convex: Vec<usize> = (0..images.len())
        .filter(|&i| images[i].mode() == ScanMode::Convex)
        .collect();
    let linear: Vec<usize> = (0..images.len())
        .filter(|&i| images[i].mode() == ScanMode::Linear)
        .collect();
    let (mut majority, deficit) = if convex.len() >= linear.len() {
        (convex.clone(), convex.len() - linear.len())
    } else {
        (linear.clone(), linear.len() - convex.len())
    };

    let mut out = images.to_vec();
    if deficit == 0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    majority.shuffle(&mut rng);
    let mut chosen = majority[..deficit].to_vec();
    chosen.sort_unstable();
    for idx in chosen {
        out.push(convert_default(&images[idx])?);
    }
    Ok(out)
}

/// Beam angle straight down from the apex.
pub const STRAIGHT_DOWN: f64 = FRAC_PI_2;
