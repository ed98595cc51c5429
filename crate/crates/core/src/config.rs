//! Pipeline configuration: one TOML document with a section per stage.
//!
//! Every field is optional. A file is merged onto a base preset (the default
//! or the toy preset), and `--paper-grid` then pins the protocol values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SimulateConfig;
use crate::error::{Error, Result};
use crate::model::{Architecture, EncoderConfig, HeadConfig, InitMode, ModalityMode, DEFAULT_HEAD_HIDDEN, PAPER_EMBED_DIM};
use crate::objectives::{ContrastiveConfig, DEFAULT_TEMPERATURE};
use crate::preprocess::PreprocessConfig;
use crate::tissue::{TissueClass, NUM_CLASSES};

/// Label fractions of the training-set sweep.
pub const FRACTION_GRID: [f64; 6] = [0.10, 0.20, 0.30, 0.60, 0.80, 1.00];
pub const PAPER_BATCH_SIZE: usize = 28;
pub const PAPER_EPOCHS: usize = 100;
pub const PAPER_FOLDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::Resnet18Style,
            embed_dim: PAPER_EMBED_DIM,
            head_hidden: DEFAULT_HEAD_HIDDEN,
        }
    }
}

impl ModelConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            architecture: self.architecture,
            embed_dim: self.embed_dim,
            input_channels: 3,
        }
    }

    pub fn head(&self, mode: ModalityMode) -> HeadConfig {
        HeadConfig {
            mode,
            hidden: self.head_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    /// Adam step size for pretraining, and for finetuning unless overridden.
    pub learning_rate: f64,
    pub finetune_learning_rate: Option<f64>,
    pub folds: usize,
    /// Fixed-order gradient reduction; reproducible across thread counts.
    pub deterministic: bool,
    /// Local trunk checkpoint for `generic_pretrained` initialization.
    pub generic_weights: Option<PathBuf>,
    /// Finetuning cross-entropy weights in class index order
    /// (gelatin, pork, beef, turkey). Unweighted when absent.
    pub class_weights: Option<[f64; NUM_CLASSES]>,
}

impl TrainConfig {
    pub fn finetune_lr(&self) -> f64 {
        self.finetune_learning_rate.unwrap_or(self.learning_rate)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: PAPER_BATCH_SIZE,
            pretrain_epochs: PAPER_EPOCHS,
            finetune_epochs: PAPER_EPOCHS,
            learning_rate: 1e-4,
            finetune_learning_rate: None,
            folds: PAPER_FOLDS,
            deterministic: false,
            generic_weights: None,
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Initializations compared in dual mode.
    pub inits: Vec<InitMode>,
    pub fractions: Vec<f64>,
    /// Modality modes compared under `modality_init`.
    pub modality_modes: Vec<ModalityMode>,
    pub modality_fractions: Vec<f64>,
    pub modality_init: InitMode,
    /// Concurrent cells; 0 uses every core.
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            inits: InitMode::ALL.to_vec(),
            fractions: FRACTION_GRID.to_vec(),
            modality_modes: ModalityMode::ALL.to_vec(),
            modality_fractions: FRACTION_GRID.to_vec(),
            modality_init: InitMode::ContrastiveCheckpoint,
            workers: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub simulate: SimulateConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelConfig,
    pub objectives: ContrastiveConfig,
    pub train: TrainConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simulate: SimulateConfig::default(),
            preprocess: PreprocessConfig::default(),
            model: ModelConfig::default(),
            objectives: ContrastiveConfig::default(),
            train: TrainConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

/// Index of `f` in the fraction grid.
pub fn grid_fraction(f: f64) -> Result<f64> {
    FRACTION_GRID
        .iter()
        .copied()
        .find(|g| (g - f).abs() < 1e-9)
        .ok_or_else(|| Error::InvalidConfig(format!("label fraction {f} is not one of {FRACTION_GRID:?}")))
}

impl PipelineConfig {
    /// Minute-scale preset: small dataset, tiny_conv encoders, short schedules.
    pub fn toy() -> Self {
        let mut c = Self::default();
        c.simulate.counts = [TissueClass::Beef, TissueClass::Pork, TissueClass::Turkey]
            .into_iter()
            .map(|m| (m, 4))
            .collect();
        c.simulate.min_layers = 4;
        c.simulate.max_layers = 4;
        c.simulate.layer_thickness = [900, 1300];
        c.model = ModelConfig {
            architecture: Architecture::TinyConv,
            embed_dim: 32,
            head_hidden: 64,
        };
        c.train.pretrain_epochs = 20;
        c.train.finetune_epochs = 30;
        c.train.learning_rate = 1e-3;
        c.train.finetune_learning_rate = Some(3e-4);
        c.train.class_weights = Some([0.5, 1.6, 1.6, 1.5]);
        c.train.deterministic = true;
        c.sweep.inits = vec![InitMode::Scratch, InitMode::ContrastiveCheckpoint];
        c.sweep.fractions = vec![0.10, 1.00];
        c.sweep.modality_fractions = vec![1.00];
        c
    }

    /// Pin the protocol values: batch 28, temperature 0.1, 512-d resnet18_style
    /// encoders, 100 epochs per phase, three folds and the full fraction grid.
    pub fn apply_paper_grid(&mut self) {
        self.model.architecture = Architecture::Resnet18Style;
        self.model.embed_dim = PAPER_EMBED_DIM;
        self.model.head_hidden = DEFAULT_HEAD_HIDDEN;
        self.objectives.temperature = DEFAULT_TEMPERATURE;
        self.objectives.symmetric = false;
        self.train.batch_size = PAPER_BATCH_SIZE;
        self.train.pretrain_epochs = PAPER_EPOCHS;
        self.train.finetune_epochs = PAPER_EPOCHS;
        self.train.folds = PAPER_FOLDS;
        self.sweep.inits = InitMode::ALL.to_vec();
        self.sweep.fractions = FRACTION_GRID.to_vec();
        self.sweep.modality_modes = ModalityMode::ALL.to_vec();
        self.sweep.modality_fractions = FRACTION_GRID.to_vec();
        self.sweep.modality_init = InitMode::ContrastiveCheckpoint;
    }

    /// Merge a TOML document onto `base`; keys absent from the document keep
    /// the base value, unknown keys are rejected.
    pub fn merge_toml(base: &Self, text: &str) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut merged = toml::Table::try_from(base).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        merge_tables(&mut merged, overlay);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &Self, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::merge_toml(base, &text).map_err(|e| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.simulate.validate()?;
        self.model.encoder().validate()?;
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::InvalidConfig("train.batch_size must be >= 2".into()));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("train.learning_rate must be > 0".into()));
        }
        if t.finetune_learning_rate.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
            return Err(Error::InvalidConfig("train.finetune_learning_rate must be > 0".into()));
        }
        if t.class_weights.is_some_and(|w| w.iter().any(|&x| !(x >= 0.0 && x.is_finite()))) {
            return Err(Error::InvalidConfig("train.class_weights must be finite and >= 0".into()));
        }
        if t.folds == 0 {
            return Err(Error::InvalidConfig("train.folds must be >= 1".into()));
        }
        if !(self.objectives.temperature > 0.0) {
            return Err(Error::InvalidConfig("objectives.temperature must be > 0".into()));
        }
        for &f in self.sweep.fractions.iter().chain(&self.sweep.modality_fractions) {
            grid_fraction(f)?;
        }
        if self.model.head_hidden == 0 {
            return Err(Error::InvalidConfig("model.head_hidden must be >= 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hash_json(self)
    }

    /// Hash of everything that determines a single sweep cell's result; the
    /// sweep grid and worker count are excluded so growing a grid keeps
    /// finished cells valid.
    pub fn cell_hash(&self) -> String {
        let mut c = self.clone();
        c.sweep = SweepConfig::default();
        hash_json(&c)
    }
}

fn hash_json<T: Serialize>(v: &T) -> String {
    let bytes = serde_json::to_vec(v).expect("config serializes");
    hex::encode(Sha256::digest(&bytes))
}

fn merge_tables(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if k != "counts" => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
