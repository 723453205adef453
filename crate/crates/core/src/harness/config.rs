use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{MechanismKind, QueueInit, DEFAULT_BANK_MOMENTUM, DEFAULT_MOMENTUM, DEFAULT_QUEUE_SIZE, DEFAULT_TEMPERATURE};
use crate::data::{AugmentationConfig, SynthSpec};
use crate::encoder::{Arch, BnBufferPolicy, EncoderConfig};
use crate::error::{Error, Result};
use crate::eval::{ProbeConfig, Tap, DEFAULT_KNN_K, DEFAULT_KNN_TEMPERATURE};
use crate::shuffled_bn::DEFAULT_SHARDS;

pub const SCHEMA_VERSION: u32 = 1;

/// Above this batch size the end-to-end mechanism scales its learning rate
/// linearly (`lr · N / 256`) unless told otherwise.
pub const LINEAR_SCALING_BASE: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Step-decay schedule: `initial · factor^j` after the `j`-th milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    /// Fractions of the run, in `(0, 1]`, at whose epoch the rate decays.
    pub milestones: Vec<f64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.03,
            milestones: vec![0.6, 0.8],
            factor: 0.1,
        }
    }
}

impl LrSchedule {
    pub fn at_epoch(&self, epoch: usize, epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&f| epoch >= (f * epochs as f64).round() as usize)
            .count();
        self.initial * self.factor.powi(passed as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Paths of an IDX corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub val_images: PathBuf,
    pub val_labels: PathBuf,
}

impl IdxPaths {
    /// The file names `gen-data` writes into `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_images: dir.join("train-images-idx3-ubyte"),
            train_labels: dir.join("train-labels-idx1-ubyte"),
            val_images: dir.join("val-images-idx3-ubyte"),
            val_labels: dir.join("val-labels-idx1-ubyte"),
        }
    }
}

/// A synthetic corpus cut into a train and a validation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub spec: SynthSpec,
    pub train: usize,
    pub val: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default(),
            train: 5000,
            val: 1000,
        }
    }
}

impl SyntheticData {
    pub fn validate(&self) -> Result<()> {
        let total = self.spec.n_classes * self.spec.n_per_class;
        if self.train == 0 || self.val == 0 || self.train + self.val > total {
            return Err(Error::Config(format!(
                "split {}+{} does not fit a corpus of {total} samples",
                self.train, self.val
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic(SyntheticData),
    Idx(IdxPaths),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic(SyntheticData::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// kNN monitor every this many epochs (0: final epoch only).
    pub knn_every: usize,
    pub knn_k: usize,
    /// `None` gives uniform votes.
    pub knn_temperature: Option<f64>,
    pub tap: Tap,
    /// Run the linear probe at the end of training.
    pub probe: bool,
    pub probe_config: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn_every: 1,
            knn_k: DEFAULT_KNN_K,
            knn_temperature: Some(DEFAULT_KNN_TEMPERATURE),
            tap: Tap::default(),
            probe: true,
            probe_config: ProbeConfig::default(),
        }
    }
}

/// Everything a run depends on. Unknown keys are rejected on load.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mechanism: MechanismKind,
    /// Negatives per query (queue length, or bank draws). Ignored by end-to-end.
    pub queue_size: usize,
    pub momentum: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub optimizer: OptimizerConfig,
    /// `None`: on for end-to-end runs with `batch_size > 256`.
    pub linear_lr_scaling: Option<bool>,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub augmentation: AugmentationConfig,
    pub shuffle_bn: bool,
    pub bn_shards: usize,
    pub bn_buffers: BnBufferPolicy,
    pub queue_init: QueueInit,
    pub bank_momentum: f64,
    /// End-to-end only: train a separate key tower instead of sharing weights.
    pub two_tower: bool,
    pub eval: EvalConfig,
    pub seed: u64,
    /// Zero the wall-clock column so metrics files depend on the config alone.
    pub deterministic: bool,
    pub precision: Precision,
    /// Largest batch a sweep may grow to when it realizes K through N.
    pub max_batch: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            mechanism: MechanismKind::Moco,
            queue_size: DEFAULT_QUEUE_SIZE,
            momentum: DEFAULT_MOMENTUM,
            temperature: DEFAULT_TEMPERATURE,
            batch_size: 64,
            epochs: 30,
            lr: LrSchedule::default(),
            optimizer: OptimizerConfig::default(),
            linear_lr_scaling: None,
            encoder: EncoderConfig {
                arch: Arch::Mlp { widths: vec![128, 64] },
                input_shape: vec![32],
                feature_dim: 32,
                use_bn: true,
            },
            data: DataConfig::default(),
            augmentation: AugmentationConfig::default(),
            shuffle_bn: true,
            bn_shards: DEFAULT_SHARDS,
            bn_buffers: BnBufferPolicy::default(),
            queue_init: QueueInit::default(),
            bank_momentum: DEFAULT_BANK_MOMENTUM,
            two_tower: false,
            eval: EvalConfig::default(),
            seed: 0,
            deterministic: false,
            precision: Precision::default(),
            max_batch: 1024,
        }
    }
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| cfg_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Canonical serialization; the config hash is taken over these bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of [`Self::to_json`], hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_json().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Pre-flight checks; every field the run will touch is checked here.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(cfg_err(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(cfg_err(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(cfg_err(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.mechanism != MechanismKind::EndToEnd && self.queue_size == 0 {
            return Err(cfg_err("queue_size must be positive"));
        }
        if self.batch_size < 2 {
            return Err(cfg_err("batch_size must be at least 2"));
        }
        if self.bn_shards == 0 || self.batch_size % self.bn_shards != 0 {
            return Err(cfg_err(format!(
                "batch_size {} is not divisible into {} shards",
                self.batch_size, self.bn_shards
            )));
        }
        if self.encoder.use_bn && self.batch_size / self.bn_shards < 2 {
            return Err(cfg_err("each BN shard needs at least 2 samples"));
        }
        if self.epochs == 0 {
            return Err(cfg_err("epochs must be positive"));
        }
        let lr = &self.lr;
        if !(lr.initial > 0.0) || !(lr.factor > 0.0 && lr.factor <= 1.0) {
            return Err(cfg_err("lr.initial must be positive and lr.factor in (0, 1]"));
        }
        if lr.milestones.iter().any(|&f| !(f > 0.0 && f <= 1.0)) || lr.milestones.windows(2).any(|w| w[0] > w[1]) {
            return Err(cfg_err("lr.milestones must be ascending fractions in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.optimizer.momentum) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(cfg_err("optimizer momentum must be in [0, 1) and weight_decay ≥ 0"));
        }
        if !(0.0..1.0).contains(&self.bank_momentum) {
            return Err(cfg_err("bank_momentum must be in [0, 1)"));
        }
        self.encoder.validate()?;
        self.augmentation.validate().map_err(|e| cfg_err(e.to_string()))?;
        if let DataConfig::Synthetic(s) = &self.data {
            s.validate()?;
            if s.spec.shape != self.encoder.input_shape {
                return Err(cfg_err(format!(
                    "encoder input_shape {:?} differs from the data shape {:?}",
                    self.encoder.input_shape, s.spec.shape
                )));
            }
            if self.batch_size > s.train {
                return Err(cfg_err("batch_size exceeds the training split"));
            }
            if self.mechanism == MechanismKind::MemoryBank && self.queue_size + self.batch_size > s.train {
                return Err(cfg_err(format!(
                    "memory bank: K={} plus N={} exceeds the {} training samples",
                    self.queue_size, self.batch_size, s.train
                )));
            }
        }
        if self.eval.knn_k == 0 {
            return Err(cfg_err("eval.knn_k must be positive"));
        }
        if let Some(t) = self.eval.knn_temperature {
            if !(t > 0.0) {
                return Err(cfg_err("eval.knn_temperature must be positive"));
            }
        }
        self.eval.probe_config.validate()?;
        if self.max_batch < self.batch_size {
            return Err(cfg_err("max_batch is below batch_size"));
        }
        Ok(())
    }

    /// Notes about fields the chosen mechanism ignores.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        match self.mechanism {
            MechanismKind::EndToEnd => w.push(format!(
                "end_to_end ignores queue_size={}; K_eff = N-1 = {}",
                self.queue_size,
                self.batch_size - 1
            )),
            MechanismKind::MemoryBank if self.shuffle_bn => {
                w.push("memory_bank has no key encoder; shuffle_bn has no effect".into())
            }
            _ => {}
        }
        w
    }

    /// Negatives each query actually sees.
    pub fn effective_k(&self) -> usize {
        match self.mechanism {
            MechanismKind::EndToEnd => self.batch_size - 1,
            _ => self.queue_size,
        }
    }

    pub fn linear_scaling_active(&self) -> bool {
        self.linear_lr_scaling
            .unwrap_or(self.mechanism == MechanismKind::EndToEnd && self.batch_size > LINEAR_SCALING_BASE)
    }

    /// Learning rate used during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let base = self.lr.at_epoch(epoch, self.epochs);
        if self.linear_scaling_active() {
            base * self.batch_size as f64 / LINEAR_SCALING_BASE as f64
        } else {
            base
        }
    }
}
