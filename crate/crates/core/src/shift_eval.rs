//! Translation-consistency evaluation over the 11x11 grid of crop offsets.
//!
//! A translation `(i, j)` moves the 128x128 window `i` pixels horizontally and
//! `j` pixels vertically from the center crop of a 138x138 sample.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{crop, to_batch, Sample, CROP_SIZE, MAX_SHIFT};
use crate::tensor::{FlushSubnormals, Tensor};
use crate::training::dice_loss_per_sample;
use crate::unet::Segmenter;
use crate::{Error, Result};

pub const SHIFT: isize = MAX_SHIFT as isize;
pub const GRID: usize = 2 * MAX_SHIFT + 1;
pub const GRID_ENTRIES: usize = GRID * GRID;

/// Crop of a 138x138 `[H, W]` tensor translated by `(i, j)`; the window's
/// top-left corner is row `5 + j`, column `5 + i`.
pub fn translate_crop(t: &Tensor<f32>, i: isize, j: isize) -> Result<Tensor<f32>> {
    if i.abs() > SHIFT || j.abs() > SHIFT {
        return Err(Error::TranslationOutOfRange { i, j, max: SHIFT });
    }
    crop(t, (SHIFT + j) as usize, (SHIFT + i) as usize, CROP_SIZE)
}

/// Translated crop of both image and mask.
pub fn translate_sample(s: &Sample, i: isize, j: isize) -> Result<Sample> {
    Ok(Sample {
        id: s.id.clone(),
        image: translate_crop(&s.image, i, j)?,
        mask: translate_crop(&s.mask, i, j)?,
    })
}

/// 1 where `p > tau`, else 0.
pub fn binarize(p: &Tensor<f32>, tau: f32) -> Tensor<f32> {
    p.map(|v| if v > tau { 1.0 } else { 0.0 })
}

/// How network outputs are scored against the mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Scoring {
    /// Threshold at `tau` first.
    Binary { tau: f32 },
    /// Score the probabilities directly.
    Soft,
}

impl Default for Scoring {
    fn default() -> Self {
        Scoring::Binary { tau: 0.5 }
    }
}

/// Segmentation errors of one sample at every translation.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftGrid {
    pub sample_id: String,
    /// `errors[i + 5][j + 5]`.
    pub errors: [[f64; GRID]; GRID],
}

impl ShiftGrid {
    pub fn get(&self, i: isize, j: isize) -> f64 {
        self.errors[(i + SHIFT) as usize][(j + SHIFT) as usize]
    }

    /// `(i, j, loss)` with `i` changing fastest.
    pub fn entries_i_fastest(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        (-SHIFT..=SHIFT).flat_map(move |j| (-SHIFT..=SHIFT).map(move |i| (i, j, self.get(i, j))))
    }

    /// `(i, j, loss)` with `j` changing fastest.
    pub fn entries_j_fastest(&self) -> impl Iterator<Item = (isize, isize, f64)> + '_ {
        (-SHIFT..=SHIFT).flat_map(move |i| (-SHIFT..=SHIFT).map(move |j| (i, j, self.get(i, j))))
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.errors.iter().flatten().copied()
    }
}

/// Scores `model` on all 121 translated crops of `sample`.
pub fn eval_grid(
    model: &dyn Segmenter,
    sample: &Sample,
    eps: f64,
    scoring: Scoring,
) -> Result<ShiftGrid> {
    let _ftz = FlushSubnormals::new();
    let mut errors = [[0.0; GRID]; GRID];
    for i in -SHIFT..=SHIFT {
        let crops = (-SHIFT..=SHIFT)
            .map(|j| translate_sample(sample, i, j))
            .collect::<Result<Vec<_>>>()?;
        let (x, y) = to_batch(&crops)?;
        let mut pred = model.predict(&x)?;
        if let Scoring::Binary { tau } = scoring {
            pred = binarize(&pred, tau);
        }
        let losses = dice_loss_per_sample(&y, &pred, eps)?;
        errors[(i + SHIFT) as usize].copy_from_slice(&losses);
    }
    Ok(ShiftGrid {
        sample_id: sample.id.clone(),
        errors,
    })
}

/// Mean over the 121 grid entries.
pub fn error_mean(g: &ShiftGrid) -> f64 {
    g.values().sum::<f64>() / GRID_ENTRIES as f64
}

/// Unbiased variance over the 121 grid entries.
pub fn error_variance(g: &ShiftGrid) -> f64 {
    let m = error_mean(g);
    g.values().map(|v| (v - m) * (v - m)).sum::<f64>() / (GRID_ENTRIES - 1) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleStat {
    pub seed: u64,
    pub sample_id: String,
    pub error_mean: f64,
    pub error_variance: f64,
}

/// Averages of one test sample across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub sample_id: String,
    pub error_mean: f64,
    pub error_variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub per_run: Vec<SampleStat>,
    pub per_sample: Vec<SampleSummary>,
    /// Seed-level averages over the test set: `(seed, mean, variance)`.
    pub per_seed: Vec<(u64, f64, f64)>,
    pub mean_of_means: f64,
    pub mean_of_variances: f64,
    pub n_seeds: usize,
    pub n_samples: usize,
}

/// Averages per-sample statistics over seeds, then over the test set.
pub fn aggregate(runs: &[(u64, Vec<ShiftGrid>)]) -> Result<ConsistencyReport> {
    let stats: Vec<(u64, Vec<SampleStat>)> = runs
        .iter()
        .map(|(seed, grids)| {
            let s = grids
                .iter()
                .map(|g| SampleStat {
                    seed: *seed,
                    sample_id: g.sample_id.clone(),
                    error_mean: error_mean(g),
                    error_variance: error_variance(g),
                })
                .collect();
            (*seed, s)
        })
        .collect();
    aggregate_stats(&stats)
}

/// Same as [`aggregate`] from precomputed per-sample statistics.
pub fn aggregate_stats(runs: &[(u64, Vec<SampleStat>)]) -> Result<ConsistencyReport> {
    let Some((_, first)) = runs.first() else {
        return Err(Error::Coverage("no runs to aggregate".into()));
    };
    let ids: BTreeSet<&str> = first.iter().map(|s| s.sample_id.as_str()).collect();
    if ids.is_empty() {
        return Err(Error::Coverage("runs contain no samples".into()));
    }
    let mut seeds = BTreeSet::new();
    for (seed, stats) in runs {
        if !seeds.insert(*seed) {
            return Err(Error::Coverage(format!("seed {seed} appears twice")));
        }
        let these: BTreeSet<&str> = stats.iter().map(|s| s.sample_id.as_str()).collect();
        if these != ids || these.len() != stats.len() {
            return Err(Error::Coverage(format!(
                "seed {seed} covers {} samples, expected the {} of the first run",
                stats.len(),
                ids.len()
            )));
        }
    }
    let n_seeds = runs.len() as f64;
    let mut sums: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (_, stats) in runs {
        for s in stats {
            let e = sums.entry(&s.sample_id).or_default();
            e.0 += s.error_mean;
            e.1 += s.error_variance;
        }
    }
    let per_sample: Vec<SampleSummary> = sums
        .into_iter()
        .map(|(id, (m, v))| SampleSummary {
            sample_id: id.to_string(),
            error_mean: m / n_seeds,
            error_variance: v / n_seeds,
        })
        .collect();
    let n = per_sample.len() as f64;
    let per_seed = runs
        .iter()
        .map(|(seed, stats)| {
            let k = stats.len() as f64;
            (
                *seed,
                stats.iter().map(|s| s.error_mean).sum::<f64>() / k,
                stats.iter().map(|s| s.error_variance).sum::<f64>() / k,
            )
        })
        .collect();
    Ok(ConsistencyReport {
        per_run: runs.iter().flat_map(|(_, s)| s.iter().cloned()).collect(),
        mean_of_means: per_sample.iter().map(|s| s.error_mean).sum::<f64>() / n,
        mean_of_variances: per_sample.iter().map(|s| s.error_variance).sum::<f64>() / n,
        per_sample,
        per_seed,
        n_seeds: runs.len(),
        n_samples: ids.len(),
    })
}

pub const PER_SAMPLE_HEADER: [&str; 5] = [
    "run_id",
    "seed",
    "sample_id",
    "error_mean",
    "error_variance",
];
pub const GRID_HEADER: [&str; 4] = ["sample_id", "i", "j", "loss"];
pub const AGGREGATE_HEADER: [&str; 6] = [
    "variant",
    "aug_mode",
    "mean_of_means",
    "mean_of_variances",
    "n_seeds",
    "n_samples",
];

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<std::fs::File>> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_record(header)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(w)
}

fn finish(path: &Path, mut w: csv::Writer<std::fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-sample rows of one trained run.
pub fn write_per_sample(path: &Path, run_id: &str, seed: u64, grids: &[ShiftGrid]) -> Result<()> {
    write_per_sample_runs(path, &[(run_id.to_string(), seed, grids.to_vec())])
}

/// Per-sample rows of several runs, as `(run_id, seed, grids)`.
pub fn write_per_sample_runs(path: &Path, runs: &[(String, u64, Vec<ShiftGrid>)]) -> Result<()> {
    let mut w = writer(path, &PER_SAMPLE_HEADER)?;
    for (run_id, seed, grids) in runs {
        for g in grids {
            w.write_record([
                run_id.clone(),
                seed.to_string(),
                g.sample_id.clone(),
                format!("{:e}", error_mean(g)),
                format!("{:e}", error_variance(g)),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    finish(path, w)
}

/// Long-format grid dump; `i_fastest` selects the row order.
pub fn write_grids(path: &Path, grids: &[ShiftGrid], i_fastest: bool) -> Result<()> {
    let mut w = writer(path, &GRID_HEADER)?;
    for g in grids {
        let rows: Box<dyn Iterator<Item = _>> = if i_fastest {
            Box::new(g.entries_i_fastest())
        } else {
            Box::new(g.entries_j_fastest())
        };
        for (i, j, loss) in rows {
            w.write_record([
                g.sample_id.clone(),
                i.to_string(),
                j.to_string(),
                format!("{loss:e}"),
            ])
            .map_err(|e| Error::format(path, e.to_string()))?;
        }
    }
    finish(path, w)
}

/// One aggregate row per `(variant, aug_mode)`.
pub fn write_aggregate(path: &Path, rows: &[(String, String, ConsistencyReport)]) -> Result<()> {
    let mut w = writer(path, &AGGREGATE_HEADER)?;
    for (variant, aug, r) in rows {
        w.write_record([
            variant.clone(),
            aug.clone(),
            format!("{:e}", r.mean_of_means),
            format!("{:e}", r.mean_of_variances),
            r.n_seeds.to_string(),
            r.n_samples.to_string(),
        ])
        .map_err(|e| Error::format(path, e.to_string()))?;
    }
    finish(path, w)
}

#[derive(Debug, Deserialize)]
struct PerSampleRow {
    run_id: String,
    seed: u64,
    sample_id: String,
    error_mean: f64,
    error_variance: f64,
}

/// Reads a per-sample CSV, rejecting rows that break the schema.
/// Returns the run id and the statistics.
pub fn read_per_sample(path: &Path) -> Result<Vec<(String, SampleStat)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != PER_SAMPLE_HEADER {
        return Err(Error::format(
            path,
            format!("row 1: header {header:?} does not match {PER_SAMPLE_HEADER:?}"),
        ));
    }
    let mut out = Vec::new();
    for (k, row) in r.deserialize::<PerSampleRow>().enumerate() {
        let row_no = k + 2;
        let row = row.map_err(|e| Error::format(path, format!("row {row_no}: {e}")))?;
        let bad = |what: &str| Error::format(path, format!("row {row_no}: {what}"));
        if !(0.0..=1.0).contains(&row.error_mean) {
            return Err(bad("error_mean outside [0, 1]"));
        }
        if !(row.error_variance >= 0.0 && row.error_variance.is_finite()) {
            return Err(bad("error_variance is negative or not finite"));
        }
        out.push((
            row.run_id,
            SampleStat {
                seed: row.seed,
                sample_id: row.sample_id,
                error_mean: row.error_mean,
                error_variance: row.error_variance,
            },
        ));
    }
    Ok(out)
}
