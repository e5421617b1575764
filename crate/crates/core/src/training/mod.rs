//! Dice loss, AdamW and the training loop with early stopping.

mod adamw;
mod loss;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TapeError};
use crate::data::{
    center_crop, full_augment, to_batch, translate_augment, AugmentParams, Sample, CROP_SIZE,
};
use crate::rng::{fingerprint, sample_stream, stream};
use crate::tensor::FlushSubnormals;
use crate::unet::{model_forward, Checkpoint, CheckpointMeta, UNet};
use crate::{Error, Result};

pub use adamw::AdamW;
pub use loss::{dice_loss, dice_loss_per_sample, dsc, record_dice_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMode {
    /// Center crops only.
    None,
    /// Uniformly random 128x128 crops.
    Translate,
    /// The full photometric and geometric pipeline followed by a random crop.
    Full,
}

impl fmt::Display for AugMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AugMode::None => "none",
            AugMode::Translate => "translate",
            AugMode::Full => "full",
        })
    }
}

impl FromStr for AugMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "none" => Ok(AugMode::None),
            "translate" => Ok(AugMode::Translate),
            "full" => Ok(AugMode::Full),
            other => Err(Error::InvalidConfig(vec![format!(
                "unknown augmentation mode `{other}`"
            )])),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Mini-batch size; when unset, 24, or 8 for training sets under 100 samples.
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    /// Dice smoothing term.
    pub epsilon: f64,
    pub seeds: Vec<u64>,
    pub augmentation: AugMode,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: None,
            weight_decay: 1e-2,
            patience: 100,
            max_epochs: 1000,
            epsilon: 1.0,
            seeds: (1..=10).collect(),
            augmentation: AugMode::None,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0) {
            v.push(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            ));
        }
        if self.batch_size == Some(0) {
            v.push("batch_size must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            v.push("weight_decay must be >= 0".into());
        }
        if self.patience == 0 {
            v.push("patience must be >= 1".into());
        }
        if self.max_epochs == 0 {
            v.push("max_epochs must be >= 1".into());
        }
        if !(self.epsilon > 0.0) {
            v.push(format!("epsilon {} must be positive", self.epsilon));
        }
        if self.seeds.is_empty() {
            v.push("seed list is empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            v.push(format!("seeds {:?} are not distinct", self.seeds));
        }
        v.extend(self.augment.validate());
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn effective_batch_size(&self, n_train: usize) -> usize {
        self.batch_size
            .unwrap_or(if n_train < 100 { 8 } else { 24 })
    }

    /// Short hash of everything that influences a training run except the seed.
    pub fn fingerprint(&self, model: &UNet<f32>) -> String {
        let mut text = toml::to_string(self).expect("config serializes");
        text.push_str(&format!("{:?}", model.config()));
        fingerprint(text.as_bytes(), 16)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub best_so_far: f64,
}

pub const EPOCH_LOG_HEADER: [&str; 6] = [
    "run_id",
    "seed",
    "epoch",
    "train_loss",
    "val_loss",
    "best_so_far",
];

pub fn write_epoch_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(EPOCH_LOG_HEADER).map_err(csv_err)?;
    for r in log {
        w.write_record([
            r.run_id.clone(),
            r.seed.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.train_loss),
            format!("{:e}", r.val_loss),
            format!("{:e}", r.best_so_far),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub best: Checkpoint,
    pub log: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Mean Dice loss of soft predictions on center crops.
pub fn validation_loss(model: &UNet<f32>, val: &[Sample], eps: f64) -> Result<f64> {
    let crops = val
        .iter()
        .map(|s| center_crop(s, CROP_SIZE))
        .collect::<Result<Vec<_>>>()?;
    let (x, y) = to_batch(&crops)?;
    let pred = model_forward(model, &x, 8)?;
    let per = dice_loss_per_sample(&y, &pred, eps)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn training_crop(cfg: &TrainConfig, s: &Sample, seed: u64, epoch: usize) -> Result<Sample> {
    let mut rng = sample_stream(seed, &s.id, epoch);
    match cfg.augmentation {
        AugMode::None => center_crop(s, CROP_SIZE),
        AugMode::Translate => translate_augment(s, &mut rng),
        AugMode::Full => full_augment(s, &cfg.augment, &mut rng),
    }
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tape(TapeError::NonFinite { .. }) => Error::Divergence { epoch },
        other => other,
    }
}

/// Trains `model` in place and returns the best checkpoint and the epoch log.
///
/// Epochs are numbered from 1. `on_epoch` sees each record as it is produced.
pub fn train(
    cfg: &TrainConfig,
    model: &mut UNet<f32>,
    seed: u64,
    run_id: &str,
    train_set: &[Sample],
    val_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let _ftz = FlushSubnormals::new();
    if train_set.is_empty() {
        return Err(Error::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(Error::EmptyDataset("validation"));
    }
    let batch = cfg.effective_batch_size(train_set.len());
    let fp = cfg.fingerprint(model);
    let mut opt = AdamW::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(seed, &["shuffle", &epoch.to_string()]));
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let crops = chunk
                .iter()
                .map(|&i| training_crop(cfg, &train_set[i], seed, epoch))
                .collect::<Result<Vec<_>>>()?;
            let (x, y) = to_batch(&crops)?;
            let mut tape = Tape::new();
            let step = (|| -> Result<_> {
                let pred = model.forward_on(&mut tape, &x)?;
                let target = tape.constant(y)?;
                let loss = record_dice_loss(&mut tape, pred, target, cfg.epsilon)?;
                let value = tape.value(loss).data()[0] as f64;
                Ok((value, tape.backward(loss)?))
            })();
            let (value, grads) = step.map_err(diverged(epoch))?;
            if !value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            total += value * chunk.len() as f64;
            opt.step(model.params_mut(), &grads.params)?;
        }
        let train_loss = total / train_set.len() as f64;
        let val_loss = validation_loss(model, val_set, cfg.epsilon).map_err(diverged(epoch))?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        let improved = best.as_ref().map_or(true, |b| val_loss < b.meta.val_loss);
        if improved {
            since_best = 0;
            best = Some(Checkpoint {
                model: model.clone(),
                meta: CheckpointMeta {
                    run_id: run_id.to_string(),
                    seed,
                    epoch,
                    val_loss,
                    fingerprint: fp.clone(),
                },
            });
        } else {
            since_best += 1;
        }
        let record = EpochRecord {
            run_id: run_id.to_string(),
            seed,
            epoch,
            train_loss,
            val_loss,
            best_so_far: best.as_ref().expect("set on first epoch").meta.val_loss,
        };
        on_epoch(&record);
        log.push(record);
        if since_best >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch"),
        log,
        stopped_early,
    })
}

/// Appends one human-readable progress line per epoch.
pub fn progress_printer(mut out: impl Write) -> impl FnMut(&EpochRecord) {
    move |r| {
        let _ = writeln!(
            out,
            "{} epoch {:>4}  train {:.4}  val {:.4}  best {:.4}",
            r.run_id, r.epoch, r.train_loss, r.val_loss, r.best_so_far
        );
    }
}
