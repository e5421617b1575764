use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use serde::{Deserialize, Serialize};

use super::{resample_bilinear, resample_nearest, Sample, SAMPLE_SIZE};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const SPLITS_FILE: &str = "splits.toml";

/// Reads an 8-bit grayscale PGM as a `[H, W]` tensor scaled to [0, 1].
pub fn read_pgm(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f32 / 255.0)
        .collect();
    Ok(Tensor::new(vec![h as usize, w as usize], data)?)
}

/// Writes a `[H, W]` tensor in [0, 1] as binary PGM, rounding to 8 bits.
pub fn write_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    let &[h, w] = img.shape() else {
        return Err(Error::format(
            path,
            format!("expected a 2-D image, got {:?}", img.shape()),
        ));
    };
    let raw = img
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = GrayImage::from_raw(w as u32, h as u32, raw).expect("length matches shape");
    buf.save_with_format(path, ImageFormat::Pnm)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Stem lists for the three splits.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(SPLITS_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        let path = root.join(SPLITS_FILE);
        let text = toml::to_string(self).expect("plain string lists serialize");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads one image/mask pair and resamples both to 138x138.
pub fn load_pair(image: &Path, mask: &Path, id: &str) -> Result<Sample> {
    let img = read_pgm(image)?;
    let m = read_pgm(mask)?;
    if img.shape() != m.shape() {
        return Err(Error::format(
            mask,
            format!(
                "mask shape {:?} differs from image shape {:?}",
                m.shape(),
                img.shape()
            ),
        ));
    }
    let m = m.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
    Ok(Sample {
        id: id.to_string(),
        image: resample_bilinear(&img, SAMPLE_SIZE, SAMPLE_SIZE),
        mask: resample_nearest(&m, SAMPLE_SIZE, SAMPLE_SIZE),
    })
}

/// Loads every pair under `root/images` and `root/masks` in stem order.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let images = stems(&root.join("images"))?;
    let masks = stems(&root.join("masks"))?;
    images
        .iter()
        .map(|(stem, img)| {
            let mask = masks
                .get(stem)
                .ok_or_else(|| Error::MissingMask(stem.clone()))?;
            load_pair(img, mask, stem)
        })
        .collect()
}

/// Loads the named stems in the given order.
pub fn load_stems(root: &Path, stems: &[String]) -> Result<Vec<Sample>> {
    stems
        .iter()
        .map(|stem| {
            let img = root.join("images").join(format!("{stem}.pgm"));
            let mask = root.join("masks").join(format!("{stem}.pgm"));
            if !img.exists() {
                return Err(Error::io(&img, std::io::ErrorKind::NotFound.into()));
            }
            if !mask.exists() {
                return Err(Error::MissingMask(stem.clone()));
            }
            load_pair(&img, &mask, stem)
        })
        .collect()
}

/// Train, validation and test samples of a dataset with a split manifest.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn load_splits(root: &Path) -> Result<SplitDataset> {
    let s = Splits::read(root)?;
    Ok(SplitDataset {
        train: load_stems(root, &s.train)?,
        val: load_stems(root, &s.val)?,
        test: load_stems(root, &s.test)?,
    })
}
