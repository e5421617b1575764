use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::AugmentParams;
use crate::ops::Padding;
use crate::phantom::PhantomSpec;
use crate::shift_eval::Scoring;
use crate::training::{AugMode, TrainConfig};
use crate::unet::{DownsamplingSpec, UNetConfig};
use crate::{Error, Result};

/// Top-level configuration file: one flat table per section.
///
/// ```toml
/// [simulate]
/// n_train = 100
/// n_val = 30
/// n_test = 33
///
/// [phantom]          # see PhantomSpec
/// seed = 0
///
/// [model]
/// base_channels = 8
/// depth = 4
/// padding = "zero"
///
/// [train]
/// variants = ["baseline", "bp3", "bp5", "bp7", "pbp"]
/// aug_modes = ["none", "translate"]
/// seeds = [1, 2, 3]
/// # cells = ["pbp/none", "baseline/translate"]   # overrides the product above
/// learning_rate = 2e-4
/// weight_decay = 1e-2
/// patience = 100
/// max_epochs = 1000
/// epsilon = 1.0
///
/// [augment]          # see AugmentParams
///
/// [evaluate]
/// scoring = "binary"
/// threshold = 0.5
///
/// [data]
/// dataset = "dataset"   # relative to the output directory
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub simulate: SimulateSection,
    pub phantom: PhantomSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub augment: AugmentParams,
    pub evaluate: EvaluateSection,
    pub data: DataSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            n_train: 100,
            n_val: 30,
            n_test: 33,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub base_channels: usize,
    pub depth: usize,
    pub padding: String,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 4,
            padding: "zero".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub variants: Vec<String>,
    pub aug_modes: Vec<AugMode>,
    pub seeds: Vec<u64>,
    /// Explicit `variant/aug_mode` cells; replaces `variants x aug_modes` when non-empty.
    pub cells: Vec<String>,
    pub learning_rate: f64,
    pub batch_size: Option<usize>,
    pub weight_decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub epsilon: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            variants: ["baseline", "bp3", "bp5", "bp7", "pbp"]
                .map(String::from)
                .to_vec(),
            aug_modes: vec![AugMode::None, AugMode::Translate],
            seeds: vec![1, 2, 3],
            cells: Vec::new(),
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            patience: t.patience,
            max_epochs: t.max_epochs,
            epsilon: t.epsilon,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// `binary` or `soft`.
    pub scoring: String,
    pub threshold: f32,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            scoring: "binary".into(),
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root; relative paths resolve against the output directory.
    pub dataset: Option<PathBuf>,
}

/// One `(variant, augmentation, seed)` training run.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Cell {
    pub variant: String,
    pub aug: AugMode,
    pub seed: u64,
}

impl Cell {
    /// Directory-safe name, e.g. `pbp_none_seed1`.
    pub fn name(&self) -> String {
        format!(
            "{}_{}_seed{}",
            variant_dir(&self.variant),
            self.aug,
            self.seed
        )
    }
}

pub fn variant_dir(variant: &str) -> String {
    variant.replace([':', '/'], "_")
}

impl RunConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", origin.display())]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        let mut section = |name: &str, r: Result<()>| {
            if let Err(Error::InvalidConfig(items)) = r {
                v.extend(items.into_iter().map(|i| format!("[{name}] {i}")));
            }
        };
        section("phantom", self.phantom.validate());
        let s = &self.simulate;
        if s.n_train == 0 || s.n_val == 0 || s.n_test == 0 {
            section(
                "simulate",
                Err(Error::InvalidConfig(vec![
                    "n_train, n_val and n_test must be >= 1".into(),
                ])),
            );
        }
        section(
            "train",
            self.train_config(AugMode::None).and_then(|t| t.validate()),
        );
        match self.cells() {
            Ok(cells) => {
                for c in cells {
                    section("model", self.unet_config(&c.variant).map(|_| ()));
                }
            }
            Err(e) => section("train", Err(e)),
        }
        section("evaluate", self.scoring().map(|_| ()));
        if v.is_empty() {
            Ok(())
        } else {
            v.dedup();
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn padding(&self) -> Result<Padding> {
        self.model
            .padding
            .parse()
            .map_err(|e: String| Error::InvalidConfig(vec![format!("padding: {e}")]))
    }

    pub fn unet_config(&self, variant: &str) -> Result<UNetConfig> {
        let downsampling: DownsamplingSpec = variant.parse()?;
        let cfg = UNetConfig {
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            downsampling,
            padding: self.padding()?,
            ..UNetConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, aug: AugMode) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            patience: t.patience,
            max_epochs: t.max_epochs,
            epsilon: t.epsilon,
            seeds: t.seeds.clone(),
            augmentation: aug,
            augment: self.augment.clone(),
        })
    }

    pub fn scoring(&self) -> Result<Scoring> {
        match self.evaluate.scoring.as_str() {
            "binary" => Ok(Scoring::Binary {
                tau: self.evaluate.threshold,
            }),
            "soft" => Ok(Scoring::Soft),
            other => Err(Error::InvalidConfig(vec![format!(
                "scoring `{other}` is neither `binary` nor `soft`"
            )])),
        }
    }

    /// The run matrix in a fixed order: variant, then augmentation, then seed.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let t = &self.train;
        let pairs: Vec<(String, AugMode)> = if t.cells.is_empty() {
            t.variants
                .iter()
                .flat_map(|v| t.aug_modes.iter().map(move |a| (v.clone(), *a)))
                .collect()
        } else {
            t.cells
                .iter()
                .map(|c| {
                    let (v, a) = c.split_once('/').ok_or_else(|| {
                        Error::InvalidConfig(vec![format!("cell `{c}` is not `variant/aug_mode`")])
                    })?;
                    Ok((v.trim().to_string(), a.parse()?))
                })
                .collect::<Result<_>>()?
        };
        if pairs.is_empty() {
            return Err(Error::InvalidConfig(vec!["the run matrix is empty".into()]));
        }
        Ok(pairs
            .into_iter()
            .flat_map(|(variant, aug)| {
                t.seeds.iter().map(move |&seed| Cell {
                    variant: variant.clone(),
                    aug,
                    seed,
                })
            })
            .collect())
    }

    pub fn dataset_root(&self, out: &Path) -> PathBuf {
        match &self.data.dataset {
            Some(p) if p.is_absolute() => p.clone(),
            Some(p) => out.join(p),
            None => out.join("dataset"),
        }
    }
}
