//! Synthetic speckle phantoms with exact anechoic-region masks.
//!
//! Scatterer amplitudes are drawn on a padded grid, zeroed inside the mask,
//! convolved with a Gaussian-windowed cosine/sine point spread function pair,
//! envelope-detected and log-compressed.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{write_pgm, Splits};
use crate::rng::{parallel_map, stream};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SPEC_FILE: &str = "phantom.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: usize,
    /// Probability that a grid point holds a scatterer.
    pub density: f64,
    /// Gaussian width across the beam (columns), in pixels.
    pub psf_lateral_sigma: f64,
    /// Gaussian width along depth (rows), in pixels.
    pub psf_axial_sigma: f64,
    /// Carrier wavelength along depth, in pixels.
    pub wavelength: f64,
    pub dynamic_range_db: f64,
    /// Mean blob radius range, in pixels.
    pub radius: (f64, f64),
    /// Largest relative amplitude of each boundary harmonic.
    pub wobble: f64,
    pub harmonics: usize,
    /// Minimum distance between the blob and the image border.
    pub margin: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 138,
            density: 1.0,
            psf_lateral_sigma: 2.0,
            psf_axial_sigma: 1.2,
            wavelength: 4.0,
            dynamic_range_db: 50.0,
            radius: (12.0, 30.0),
            wobble: 0.12,
            harmonics: 3,
            margin: 12,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.density > 0.0 && self.density <= 1.0) {
            v.push(format!("density {} outside (0, 1]", self.density));
        }
        if self.dynamic_range_db <= 0.0 {
            v.push("dynamic_range_db must be positive".into());
        }
        for (name, s) in [
            ("psf_lateral_sigma", self.psf_lateral_sigma),
            ("psf_axial_sigma", self.psf_axial_sigma),
            ("wavelength", self.wavelength),
        ] {
            if s <= 0.0 {
                v.push(format!("{name} must be positive"));
            }
        }
        let (lo, hi) = self.radius;
        if !(0.0 < lo && lo <= hi) {
            v.push(format!("radius range ({lo}, {hi}) is empty"));
        }
        if !(0.0..0.5).contains(&self.wobble) {
            v.push(format!("wobble {} outside [0, 0.5)", self.wobble));
        }
        let reach = hi * (1.0 + self.wobble * self.harmonics as f64) + self.margin as f64;
        if 2.0 * reach >= self.size as f64 {
            v.push(format!(
                "blobs up to radius {reach:.1} (with margin) do not fit a {0}x{0} image",
                self.size
            ));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    fn max_reach(&self, r0: f64) -> f64 {
        r0 * (1.0 + self.wobble * self.harmonics as f64)
    }
}

/// A star-shaped blob: the set of pixels within `r(theta)` of a random center,
/// where `r` is a mean radius modulated by a few low-order harmonics.
pub fn generate_mask(spec: &PhantomSpec, rng: &mut impl Rng) -> Tensor<f32> {
    let n = spec.size;
    let r0 = rng.gen_range(spec.radius.0..=spec.radius.1);
    let harmonics: Vec<(f64, f64)> = (0..spec.harmonics)
        .map(|_| {
            (
                rng.gen_range(-spec.wobble..=spec.wobble),
                rng.gen_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let reach = spec.max_reach(r0) + spec.margin as f64;
    let lo = reach.ceil();
    let hi = (n as f64 - 1.0 - reach).floor();
    let cy = rng.gen_range(lo..=hi);
    let cx = rng.gen_range(lo..=hi);
    Tensor::from_fn(&[n, n], |k| {
        let (dy, dx) = ((k / n) as f64 - cy, (k % n) as f64 - cx);
        let theta = dy.atan2(dx);
        let r: f64 = r0
            * (1.0
                + harmonics
                    .iter()
                    .enumerate()
                    .map(|(h, &(a, phi))| a * ((h as f64 + 2.0) * theta + phi).cos())
                    .sum::<f64>());
        if dy.hypot(dx) <= r {
            1.0
        } else {
            0.0
        }
    })
}

fn gaussian(x: f64, sigma: f64) -> f64 {
    (-x * x / (2.0 * sigma * sigma)).exp()
}

/// Valid-mode 1-D convolution of a `h x w` grid with an odd-length kernel,
/// down the columns when `along_rows` is set and across the rows otherwise.
fn conv_axis(
    d: &[f64],
    h: usize,
    w: usize,
    k: &[f64],
    along_rows: bool,
) -> (Vec<f64>, usize, usize) {
    let half = k.len() / 2;
    let (oh, ow) = if along_rows {
        (h - 2 * half, w)
    } else {
        (h, w - 2 * half)
    };
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = k
                .iter()
                .enumerate()
                .map(|(t, &kv)| {
                    let (sr, sc) = if along_rows { (r + t, c) } else { (r, c + t) };
                    kv * d[sr * w + sc]
                })
                .sum();
        }
    }
    (out, oh, ow)
}

/// Envelope of the simulated echo before log compression, `size x size`.
pub fn render_envelope(mask: &Tensor<f32>, spec: &PhantomSpec, rng: &mut impl Rng) -> Tensor<f64> {
    let n = spec.size;
    let half_ax = (4.0 * spec.psf_axial_sigma).ceil() as usize;
    let half_lat = (4.0 * spec.psf_lateral_sigma).ceil() as usize;
    let (ph, pw) = (n + 2 * half_ax, n + 2 * half_lat);
    let m = mask.data();
    let mut amp = vec![0.0; ph * pw];
    for r in 0..ph {
        for c in 0..pw {
            let a: f64 = StandardNormal.sample(rng);
            let keep = spec.density >= 1.0 || rng.gen_bool(spec.density);
            let inside = (half_ax..half_ax + n).contains(&r)
                && (half_lat..half_lat + n).contains(&c)
                && m[(r - half_ax) * n + (c - half_lat)] > 0.5;
            amp[r * pw + c] = if keep && !inside { a } else { 0.0 };
        }
    }
    let lateral: Vec<f64> = (0..=2 * half_lat)
        .map(|t| gaussian(t as f64 - half_lat as f64, spec.psf_lateral_sigma))
        .collect();
    let axial = |phase: fn(f64) -> f64| -> Vec<f64> {
        (0..=2 * half_ax)
            .map(|t| {
                let z = t as f64 - half_ax as f64;
                gaussian(z, spec.psf_axial_sigma) * phase(2.0 * PI * z / spec.wavelength)
            })
            .collect()
    };
    let (cos_k, sin_k) = (axial(f64::cos), axial(f64::sin));
    let energy: f64 = {
        let l2: f64 = lateral.iter().map(|v| v * v).sum();
        let a2: f64 = cos_k.iter().chain(&sin_k).map(|v| v * v).sum();
        (l2 * a2).sqrt()
    };
    let (lat, h, w) = conv_axis(&amp, ph, pw, &lateral, false);
    let (i_part, _, _) = conv_axis(&lat, h, w, &cos_k, true);
    let (q_part, _, _) = conv_axis(&lat, h, w, &sin_k, true);
    let env = i_part
        .iter()
        .zip(&q_part)
        .map(|(i, q)| i.hypot(*q) / energy)
        .collect();
    Tensor::new(vec![n, n], env).expect("envelope is n x n")
}

/// Log compression over `dynamic_range_db`, mapped to [0, 1].
pub fn log_compress(envelope: &Tensor<f64>, dynamic_range_db: f64) -> Tensor<f32> {
    let peak = envelope
        .data()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let d = envelope.data();
    Tensor::from_fn(envelope.shape(), |k| {
        let db = 20.0 * (d[k].max(f64::MIN_POSITIVE) / peak).log10();
        ((db + dynamic_range_db) / dynamic_range_db).clamp(0.0, 1.0) as f32
    })
}

/// Speckle image in [0, 1] with a dark region where `mask` is set.
pub fn render_phantom(mask: &Tensor<f32>, spec: &PhantomSpec, rng: &mut impl Rng) -> Tensor<f32> {
    log_compress(&render_envelope(mask, spec, rng), spec.dynamic_range_db)
}

/// Mask and image of phantom `index`, from streams keyed by the spec seed.
pub fn generate_phantom(spec: &PhantomSpec, index: usize) -> (Tensor<f32>, Tensor<f32>) {
    let idx = index.to_string();
    let mask = generate_mask(spec, &mut stream(spec.seed, &["phantom-mask", &idx]));
    let image = render_phantom(
        &mask,
        spec,
        &mut stream(spec.seed, &["phantom-image", &idx]),
    );
    (image, mask)
}

pub fn stem(index: usize) -> String {
    format!("phantom_{index:04}")
}

/// Writes `images/`, `masks/`, the split manifest and the spec file under
/// `root`. Samples are numbered train first, then validation, then test.
pub fn make_synthetic_dataset(
    root: &Path,
    counts: (usize, usize, usize),
    spec: &PhantomSpec,
    workers: usize,
) -> Result<Splits> {
    spec.validate()?;
    let (n_train, n_val, n_test) = counts;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(vec![format!(
            "split counts must be >= 1, got ({n_train}, {n_val}, {n_test})"
        )]));
    }
    for sub in ["images", "masks"] {
        let dir = root.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let total = n_train + n_val + n_test;
    let indices: Vec<usize> = (0..total).collect();
    let written = parallel_map(&indices, workers, |&i| -> Result<()> {
        let (image, mask) = generate_phantom(spec, i);
        write_pgm(
            &root.join("images").join(format!("{}.pgm", stem(i))),
            &image,
        )?;
        write_pgm(&root.join("masks").join(format!("{}.pgm", stem(i))), &mask)
    });
    written.into_iter().collect::<Result<Vec<()>>>()?;
    let splits = Splits {
        train: (0..n_train).map(stem).collect(),
        val: (n_train..n_train + n_val).map(stem).collect(),
        test: (n_train + n_val..total).map(stem).collect(),
    };
    splits.write(root)?;
    let spec_path = root.join(SPEC_FILE);
    let text = toml::to_string(spec).expect("flat spec serializes");
    fs::write(&spec_path, text).map_err(|e| Error::io(&spec_path, e))?;
    Ok(splits)
}
