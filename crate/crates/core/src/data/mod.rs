//! Dataset I/O, resampling, crops and augmentation.
//!
//! Images and masks are `[H, W]` tensors. Samples are stored at 138x138;
//! the network sees 128x128 crops of them.

mod augment;
mod io;

use rand::Rng;

use crate::ops::reflect;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub use augment::{
    adjust_brightness_contrast, apply_augment, full_augment, gaussian_blur, hflip, rotate, scale,
    translate_augment, AugmentDraw, AugmentParams,
};
pub use io::{
    load_dataset, load_pair, load_splits, load_stems, read_pgm, write_pgm, SplitDataset, Splits,
    SPLITS_FILE,
};

pub const SAMPLE_SIZE: usize = 138;
pub const CROP_SIZE: usize = 128;
/// Offset of the center crop, and the largest translation in either direction.
pub const MAX_SHIFT: usize = (SAMPLE_SIZE - CROP_SIZE) / 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Tensor<f32>,
    /// Binary, same shape as `image`.
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn crop(&self, top: usize, left: usize, size: usize) -> Result<Sample> {
        Ok(Sample {
            id: self.id.clone(),
            image: crop(&self.image, top, left, size)?,
            mask: crop(&self.mask, top, left, size)?,
        })
    }
}

/// Stacks equally sized samples into `[N, 1, H, W]` image and mask batches.
pub fn to_batch(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let (h, w) = samples.first().ok_or(Error::EmptyDataset("batch"))?.size();
    let imgs: Vec<_> = samples.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let n = samples.len();
    Ok((
        Tensor::stack(&imgs)?.reshape(&[n, 1, h, w])?,
        Tensor::stack(&masks)?.reshape(&[n, 1, h, w])?,
    ))
}

fn dims(t: &Tensor<f32>) -> (usize, usize) {
    match t.shape() {
        &[h, w] => (h, w),
        s => panic!("expected a 2-D image, got {s:?}"),
    }
}

/// `size x size` window of a `[H, W]` tensor with top-left corner `(top, left)`.
pub fn crop(t: &Tensor<f32>, top: usize, left: usize, size: usize) -> Result<Tensor<f32>> {
    let (h, w) = dims(t);
    if top + size > h || left + size > w {
        return Err(crate::tensor::TensorError::Invalid(format!(
            "crop {size}x{size} at ({top}, {left}) exceeds {h}x{w}"
        ))
        .into());
    }
    let d = t.data();
    Ok(Tensor::from_fn(&[size, size], |k| {
        d[(top + k / size) * w + left + k % size]
    }))
}

fn check_sample_size(s: &Sample) -> Result<()> {
    if s.size() != (SAMPLE_SIZE, SAMPLE_SIZE) {
        return Err(crate::tensor::TensorError::ShapeMismatch {
            expected: format!("[{SAMPLE_SIZE}, {SAMPLE_SIZE}]"),
            actual: s.image.shape().to_vec(),
        }
        .into());
    }
    Ok(())
}

/// The centered 128x128 window of a 138x138 sample.
pub fn center_crop(s: &Sample, size: usize) -> Result<Sample> {
    check_sample_size(s)?;
    let off = (SAMPLE_SIZE - size) / 2;
    s.crop(off, off, size)
}

/// Uniformly random window; the same offset is applied to image and mask.
pub fn random_crop(s: &Sample, size: usize, rng: &mut impl Rng) -> Result<Sample> {
    check_sample_size(s)?;
    let span = SAMPLE_SIZE - size;
    let top = rng.gen_range(0..=span);
    let left = rng.gen_range(0..=span);
    s.crop(top, left, size)
}

/// Multiplicative speckle `I + N I` with `N ~ normal(0, sigma)`, clamped to [0, 1].
pub fn speckle_noise(image: &Tensor<f32>, sigma: f64, rng: &mut impl Rng) -> Tensor<f32> {
    if sigma <= 0.0 {
        return image.clone();
    }
    let normal = rand_distr::Normal::new(0.0, sigma).expect("positive sigma");
    let mut out = image.clone();
    for v in out.data_mut() {
        let n: f64 = rng.sample(normal);
        *v = (*v as f64 * (1.0 + n)).clamp(0.0, 1.0) as f32;
    }
    out
}

/// Source coordinate of output pixel `o` when resizing `n_in` to `n_out`
/// with half-pixel centers.
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resample_bilinear(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (ih, iw) = dims(t);
    if (ih, iw) == (h, w) {
        return t.clone();
    }
    let d = t.data();
    let taps = |o: usize, n_in: usize, n_out: usize| {
        let x = source_coord(o, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, (x - x0 as f64) as f32)
    };
    Tensor::from_fn(&[h, w], |k| {
        let (r0, r1, fr) = taps(k / w, ih, h);
        let (c0, c1, fc) = taps(k % w, iw, w);
        let top = d[r0 * iw + c0] * (1.0 - fc) + d[r0 * iw + c1] * fc;
        let bot = d[r1 * iw + c0] * (1.0 - fc) + d[r1 * iw + c1] * fc;
        top * (1.0 - fr) + bot * fr
    })
}

/// Nearest-neighbor resize with half-pixel centers.
pub fn resample_nearest(t: &Tensor<f32>, h: usize, w: usize) -> Tensor<f32> {
    let (ih, iw) = dims(t);
    let d = t.data();
    let pick = |o: usize, n_in: usize, n_out: usize| {
        (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
    };
    Tensor::from_fn(&[h, w], |k| d[pick(k / w, ih, h) * iw + pick(k % w, iw, w)])
}

/// Bilinear sample at a continuous position with mirrored borders.
pub(crate) fn sample_bilinear(t: &Tensor<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = dims(t);
    let d = t.data();
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = ((y - y0) as f32, (x - x0) as f32);
    let at = |r: isize, c: isize| d[reflect(r, h) * w + reflect(c, w)];
    let (r, c) = (y0 as isize, x0 as isize);
    let top = at(r, c) * (1.0 - fx) + at(r, c + 1) * fx;
    let bot = at(r + 1, c) * (1.0 - fx) + at(r + 1, c + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Nearest sample at a continuous position with mirrored borders.
pub(crate) fn sample_nearest(t: &Tensor<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = dims(t);
    t.data()[reflect(y.round() as isize, h) * w + reflect(x.round() as isize, w)]
}
