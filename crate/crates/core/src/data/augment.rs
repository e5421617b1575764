use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    dims, random_crop, sample_bilinear, sample_nearest, speckle_noise, Sample, CROP_SIZE, MAX_SHIFT,
};
use crate::ops::reflect;
use crate::tensor::Tensor;
use crate::Result;

/// Ranges of the full augmentation pipeline. Each `(lo, hi)` is sampled uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub scale_pct: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    /// Gaussian blur sizes; 0 disables the blur.
    pub blur_sizes: Vec<usize>,
    pub blur_sigma: (f64, f64),
    pub flip_prob: f64,
    pub rotation_deg: (f64, f64),
    pub speckle_sigma: (f64, f64),
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            scale_pct: (-7.0, 7.0),
            brightness: (-0.1, 0.1),
            contrast: (0.9, 1.1),
            blur_sizes: vec![0, 2, 3, 5, 7],
            blur_sigma: (0.0, 1.0),
            flip_prob: 0.5,
            rotation_deg: (-10.0, 10.0),
            speckle_sigma: (0.0, 0.01),
        }
    }
}

/// One concrete draw of every augmentation parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentDraw {
    pub scale_pct: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub blur_size: usize,
    pub blur_sigma: f64,
    pub flip: bool,
    pub rotation_deg: f64,
    pub speckle_sigma: f64,
    /// Top-left corner of the final crop.
    pub crop: (usize, usize),
}

impl AugmentDraw {
    /// The draw that leaves a sample untouched apart from a center crop.
    pub fn identity() -> Self {
        Self {
            scale_pct: 0.0,
            brightness: 0.0,
            contrast: 1.0,
            blur_size: 0,
            blur_sigma: 0.0,
            flip: false,
            rotation_deg: 0.0,
            speckle_sigma: 0.0,
            crop: (MAX_SHIFT, MAX_SHIFT),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl AugmentParams {
    pub fn draw(&self, rng: &mut impl Rng) -> AugmentDraw {
        AugmentDraw {
            scale_pct: uniform(rng, self.scale_pct),
            brightness: uniform(rng, self.brightness),
            contrast: uniform(rng, self.contrast),
            blur_size: self.blur_sizes.choose(rng).copied().unwrap_or(0),
            blur_sigma: uniform(rng, self.blur_sigma),
            flip: rng.gen_bool(self.flip_prob.clamp(0.0, 1.0)),
            rotation_deg: uniform(rng, self.rotation_deg),
            speckle_sigma: uniform(rng, self.speckle_sigma),
            crop: (
                rng.gen_range(0..=2 * MAX_SHIFT),
                rng.gen_range(0..=2 * MAX_SHIFT),
            ),
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let within = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64, v: &mut Vec<String>| {
            if !(min <= lo && lo <= hi && hi <= max) {
                v.push(format!(
                    "{name} range ({lo}, {hi}) must lie in [{min}, {max}]"
                ));
            }
        };
        within("scale_pct", self.scale_pct, -7.0, 7.0, &mut v);
        within("blur_sigma", self.blur_sigma, 0.0, 1.0, &mut v);
        within("rotation_deg", self.rotation_deg, -10.0, 10.0, &mut v);
        within("speckle_sigma", self.speckle_sigma, 0.0, 0.01, &mut v);
        within("contrast", self.contrast, 0.0, f64::INFINITY, &mut v);
        within("brightness", self.brightness, -1.0, 1.0, &mut v);
        if let Some(k) = self
            .blur_sizes
            .iter()
            .find(|k| ![0, 2, 3, 5, 7].contains(*k))
        {
            v.push(format!("blur size {k} not in {{0, 2, 3, 5, 7}}"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            v.push(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        v
    }
}

/// Resamples `t` through `inverse`, which maps an output pixel to its
/// source position relative to the image center.
fn warp(t: &Tensor<f32>, nearest: bool, inverse: impl Fn(f64, f64) -> (f64, f64)) -> Tensor<f32> {
    let (h, w) = dims(t);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Tensor::from_fn(&[h, w], |k| {
        let (dy, dx) = inverse((k / w) as f64 - cy, (k % w) as f64 - cx);
        if nearest {
            sample_nearest(t, cy + dy, cx + dx)
        } else {
            sample_bilinear(t, cy + dy, cx + dx)
        }
    })
}

/// Isotropic zoom by `pct` percent about the center, mirrored borders.
pub fn scale(t: &Tensor<f32>, pct: f64, nearest: bool) -> Tensor<f32> {
    if pct == 0.0 {
        return t.clone();
    }
    let f = 1.0 + pct / 100.0;
    warp(t, nearest, |y, x| (y / f, x / f))
}

/// Counter-clockwise rotation by `deg` degrees about the center, mirrored borders.
pub fn rotate(t: &Tensor<f32>, deg: f64, nearest: bool) -> Tensor<f32> {
    if deg == 0.0 {
        return t.clone();
    }
    let (s, c) = deg.to_radians().sin_cos();
    warp(t, nearest, |y, x| (c * y - s * x, s * y + c * x))
}

pub fn hflip(t: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = dims(t);
    let d = t.data();
    Tensor::from_fn(&[h, w], |k| d[(k / w) * w + (w - 1 - k % w)])
}

/// `contrast * I + brightness`, clamped to [0, 1].
pub fn adjust_brightness_contrast(t: &Tensor<f32>, brightness: f64, contrast: f64) -> Tensor<f32> {
    t.map(|v| (contrast as f32 * v + brightness as f32).clamp(0.0, 1.0))
}

/// Separable Gaussian blur with a `k`-tap kernel and mirrored borders.
/// `k = 0` and `k = 1` return the input.
pub fn gaussian_blur(t: &Tensor<f32>, k: usize, sigma: f64) -> Tensor<f32> {
    if k <= 1 {
        return t.clone();
    }
    let center = (k as f64 - 1.0) / 2.0;
    let d2: Vec<f64> = (0..k).map(|i| (i as f64 - center).powi(2)).collect();
    let min = d2.iter().cloned().fold(f64::INFINITY, f64::min);
    let sigma = sigma.max(1e-6);
    let raw: Vec<f64> = d2
        .iter()
        .map(|d| (-(d - min) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    let taps: Vec<(isize, f32)> = raw
        .iter()
        .enumerate()
        .map(|(i, w)| (i as isize - (k as isize - 1) / 2, (w / total) as f32))
        .collect();
    let (h, w) = dims(t);
    let d = t.data();
    let rows = Tensor::from_fn(&[h, w], |p| {
        let (r, c) = ((p / w) as isize, (p % w) as isize);
        taps.iter()
            .map(|&(o, wt)| wt * d[r as usize * w + reflect(c + o, w)])
            .sum::<f32>()
    });
    let d = rows.data();
    Tensor::from_fn(&[h, w], |p| {
        let (r, c) = ((p / w) as isize, p % w);
        taps.iter()
            .map(|&(o, wt)| wt * d[reflect(r + o, h) * w + c])
            .sum::<f32>()
    })
}

/// Applies a fixed draw: scale, brightness/contrast, blur, flip, rotation,
/// speckle, then the crop. `rng` only feeds the speckle noise.
pub fn apply_augment(s: &Sample, d: &AugmentDraw, rng: &mut impl Rng) -> Result<Sample> {
    let mut image = scale(&s.image, d.scale_pct, false);
    let mut mask = scale(&s.mask, d.scale_pct, true);
    image = adjust_brightness_contrast(&image, d.brightness, d.contrast);
    image = gaussian_blur(&image, d.blur_size, d.blur_sigma);
    if d.flip {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    image = rotate(&image, d.rotation_deg, false);
    mask = rotate(&mask, d.rotation_deg, true);
    image = speckle_noise(&image, d.speckle_sigma, rng);
    Sample {
        id: s.id.clone(),
        image,
        mask,
    }
    .crop(d.crop.0, d.crop.1, CROP_SIZE)
}

/// Draws parameters from `rng` and applies the full pipeline.
pub fn full_augment(s: &Sample, params: &AugmentParams, rng: &mut impl Rng) -> Result<Sample> {
    let draw = params.draw(rng);
    apply_augment(s, &draw, rng)
}

/// Translation-only augmentation: a uniformly random 128x128 crop.
pub fn translate_augment(s: &Sample, rng: &mut impl Rng) -> Result<Sample> {
    random_crop(s, CROP_SIZE, rng)
}
