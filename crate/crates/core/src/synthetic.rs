//! Lesion-on-speckle phantoms standing in for clinical ERUS video.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{quantize, Image, ScanMode};

/// A video of a dark elliptical lesion drifting across a depth-graded
/// background with multiplicative speckle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub mode: ScanMode,
    /// Standard deviation of the multiplicative speckle factor.
    pub speckle: f64,
    /// Lesion centre in frame 0, pixels.
    pub center_x: f64,
    pub center_y: f64,
    /// Semi-axes, pixels.
    pub axis_x: f64,
    pub axis_y: f64,
    /// Centre displacement per frame, pixels.
    pub drift_x: f64,
    pub drift_y: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            frames: 3,
            mode: ScanMode::Convex,
            speckle: 0.15,
            center_x: 28.0,
            center_y: 30.0,
            axis_x: 10.0,
            axis_y: 7.0,
            drift_x: 1.0,
            drift_y: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn center(&self, frame: usize) -> (f64, f64) {
        (
            self.center_x + self.drift_x * frame as f64,
            self.center_y + self.drift_y * frame as f64,
        )
    }

    /// Whether pixel `(x, y)` lies inside the lesion of `frame`.
    pub fn inside(&self, frame: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center(frame);
        let dx = (x as f64 - cx) / self.axis_x;
        let dy = (y as f64 - cy) / self.axis_y;
        dx * dx + dy * dy <= 1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::param("synthetic video needs positive extents and frame count"));
        }
        if !(self.axis_x > 0.0 && self.axis_y > 0.0) {
            return Err(Error::param("lesion axes must be positive"));
        }
        if !(self.speckle >= 0.0 && self.speckle.is_finite()) {
            return Err(Error::param("speckle intensity must be a finite non-negative number"));
        }
        let (w, h) = ((self.width - 1) as f64, (self.height - 1) as f64);
        for k in 0..self.frames {
            let (cx, cy) = self.center(k);
            if cx - self.axis_x < 0.0 || cx + self.axis_x > w || cy - self.axis_y < 0.0 || cy + self.axis_y > h {
                return Err(Error::param(format!(
                    "lesion leaves the {}×{} frame at frame {k} (centre {cx:.1}, {cy:.1})",
                    self.width, self.height
                )));
            }
        }
        Ok(())
    }
}

/// Renders the frames and their exact lesion masks (`0`/`255`).
pub fn gen_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<(Vec<Image>, Vec<Image>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    let depth = (h.max(2) - 1) as f64;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for k in 0..spec.frames {
        let mut pixels = Vec::with_capacity(w * h);
        let mut mask = Vec::with_capacity(w * h);
        for y in 0..h {
            let background = 70.0 + 90.0 * y as f64 / depth;
            for x in 0..w {
                let lesion = spec.inside(k, x, y);
                let base = if lesion { 0.45 * background } else { background };
                let noise: f64 = StandardNormal.sample(&mut rng);
                pixels.push(quantize(base * (1.0 + spec.speckle * noise)));
                mask.push(if lesion { 255 } else { 0 });
            }
        }
        frames.push(Image::new(w, h, pixels, spec.mode)?);
        masks.push(Image::new(w, h, mask, spec.mode)?);
    }
    Ok((frames, masks))
}

/// Band-limited test image: a sum of three plane waves with wavelengths of
/// at least `min_wavelength` pixels, spanning roughly `40..=215`.
pub fn smooth_phantom(width: usize, height: usize, min_wavelength: f64, seed: u64, mode: ScanMode) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let wavelength = rng.random_range(min_wavelength..2.0 * min_wavelength);
            let dir = rng.random_range(0.0..PI);
            let k = 2.0 * PI / wavelength;
            (k * dir.cos(), k * dir.sin(), rng.random_range(0.0..2.0 * PI))
        })
        .collect();
    Image::from_fn(width, height, mode, |x, y| {
        let s: f64 = waves
            .iter()
            .map(|&(kx, ky, phase)| (kx * x as f64 + ky * y as f64 + phase).cos())
            .sum();
        quantize(127.5 + 29.0 * s)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_noise_free_video_repeats() {
        let spec = SyntheticSpec {
            speckle: 0.0,
            drift_x: 0.0,
            drift_y: 0.0,
            frames: 4,
            ..SyntheticSpec::default()
        };
        let (frames, masks) = gen_synthetic(&spec, 1).unwrap();
        assert!(frames.windows(2).all(|p| p[0] == p[1]));
        assert!(masks.windows(2).all(|p| p[0] == p[1]));
    }

    #[test]
    fn mask_area_matches_point_in_ellipse_count() {
        let spec = SyntheticSpec {
            center_x: 31.3,
            center_y: 27.8,
            axis_x: 12.5,
            axis_y: 6.25,
            ..SyntheticSpec::default()
        };
        let (_, masks) = gen_synthetic(&spec, 2).unwrap();
        for (k, mask) in masks.iter().enumerate() {
            let (cx, cy) = spec.center(k);
            let mut expected = 0;
            for y in 0..spec.height {
                for x in 0..spec.width {
                    let u = (x as f64 - cx) / spec.axis_x;
                    let v = (y as f64 - cy) / spec.axis_y;
                    if u * u + v * v <= 1.0 {
                        expected += 1;
                    }
                }
            }
            let got = mask.pixels().iter().filter(|&&p| p == 255).count();
            assert_eq!(got, expected, "frame {k}");
        }
    }

    #[test]
    fn same_seed_same_video() {
        let spec = SyntheticSpec::default();
        assert_eq!(gen_synthetic(&spec, 5).unwrap(), gen_synthetic(&spec, 5).unwrap());
        assert_ne!(gen_synthetic(&spec, 5).unwrap().0, gen_synthetic(&spec, 6).unwrap().0);
    }

    #[test]
    fn lesion_is_darker_than_surroundings() {
        let spec = SyntheticSpec {
            speckle: 0.0,
            ..SyntheticSpec::default()
        };
        let (frames, masks) = gen_synthetic(&spec, 0).unwrap();
        let (mut inside, mut outside) = (Vec::new(), Vec::new());
        for (p, m) in frames[0].pixels().iter().zip(masks[0].pixels()) {
            if *m == 255 { inside.push(*p as f64) } else { outside.push(*p as f64) }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&inside) < mean(&outside));
    }

    #[test]
    fn runaway_trajectory_is_rejected() {
        let spec = SyntheticSpec {
            drift_x: 20.0,
            frames: 5,
            ..SyntheticSpec::default()
        };
        assert!(matches!(gen_synthetic(&spec, 0), Err(Error::Parameter(_))));
    }
}
