//! Run configuration, read from TOML. Unknown keys are rejected and every
//! value is range-checked before anything is computed.
//!
//! ```toml
//! task = "classification"      # or "regression"
//! seed = 7
//! out_dir = "runs/cifar"
//!
//! [data]
//! source = "synthetic-cifar"   # "cifar10" (needs path), "synthetic-regression"
//! # path = "cifar-10-batches-bin"
//! # eval_path = "cifar-10-batches-bin/test_batch.bin"
//! train_size = 5000
//! eval_size = 1000
//! # regression only
//! image_size = 16
//! noise_sigma = 0.08
//! mosaic = "bayer"             # or "full"
//!
//! [model]
//! arch = "mini-resnet"         # or "denoise-skip"
//! width = 16
//! # depth = 3                  # denoise-skip only: number of convolutions
//!
//! [train]                      # full-precision training
//! epochs = 8
//! batch_size = 32
//! optimizer = { kind = "sgd", momentum = 0.9, lr = 0.05, weight_decay = 5e-4, clamp_lr = 0.05 }
//!
//! [qat]                        # NICE fine-tuning
//! epochs = 8
//! epochs_per_stage = 1
//! batch_size = 32
//! noise_gradual = true
//! clamp_learning = true
//! calibration_batches = 4
//! optimizer = { kind = "sgd", momentum = 0.9, lr = 0.01, weight_decay = 5e-4, clamp_lr = 0.01 }
//!
//! [quant]
//! bits_w = 4
//! bits_a = 4
//! bits_b = 16
//! ```
//!
//! `qat.skip_first_last` defaults to true for classification and false for
//! regression; `qat.num_blocks` defaults to one block per quantized layer.
//! `quant.alpha`, `quant.beta` and `quant.mask_prob` default to 5, 3 and 0.05.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, Task};
use crate::qat::{OptimizerConfig, TrainConfig};
use crate::quant::QuantSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    SyntheticCifar,
    SyntheticRegression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MosaicKind {
    Bayer,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    MiniResnet,
    DenoiseSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub eval_path: Option<PathBuf>,
    pub train_size: usize,
    pub eval_size: usize,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_mosaic")]
    pub mosaic: MosaicKind,
}

fn default_image_size() -> usize {
    16
}

fn default_sigma() -> f64 {
    0.08
}

fn default_mosaic() -> MosaicKind {
    MosaicKind::Bayer
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: ArchKind,
    pub width: usize,
    /// Convolutions in the denoiser (default 3); not used by mini-resnet.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QatConfig {
    pub epochs: usize,
    pub epochs_per_stage: usize,
    #[serde(default)]
    pub num_blocks: Option<usize>,
    pub batch_size: usize,
    #[serde(default)]
    pub skip_first_last: Option<bool>,
    #[serde(default = "yes")]
    pub noise_gradual: bool,
    #[serde(default = "yes")]
    pub clamp_learning: bool,
    #[serde(default = "default_calibration")]
    pub calibration_batches: usize,
    pub optimizer: OptimizerConfig,
}

fn yes() -> bool {
    true
}

fn default_calibration() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: PhaseConfig,
    pub qat: QatConfig,
    #[serde(default)]
    pub quant: QuantSpec,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub subset_size: Option<usize>,
    pub bits_w: Option<u32>,
    pub bits_a: Option<u32>,
    pub bits_b: Option<u32>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = d.clone();
        }
        if let Some(n) = o.subset_size {
            self.data.train_size = n;
        }
        if let Some(b) = o.bits_w {
            self.quant.bits_w = b;
        }
        if let Some(b) = o.bits_a {
            self.quant.bits_a = b;
        }
        if let Some(b) = o.bits_b {
            self.quant.bits_b = b;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.quant.validate().map_err(|e| Error::Config(e.to_string()))?;
        let arch_task = match self.model.arch {
            ArchKind::MiniResnet => Task::Classification,
            ArchKind::DenoiseSkip => Task::Regression,
        };
        if arch_task != self.task {
            return bad(format!("model.arch {:?} does not fit task {:?}", self.model.arch, self.task));
        }
        let data_task = match self.data.source {
            DataSource::Cifar10 | DataSource::SyntheticCifar => Task::Classification,
            DataSource::SyntheticRegression => Task::Regression,
        };
        if data_task != self.task {
            return bad(format!("data.source {:?} does not fit task {:?}", self.data.source, self.task));
        }
        if self.data.source == DataSource::Cifar10 && self.data.path.is_none() {
            return bad("data.source = \"cifar10\" needs data.path".into());
        }
        if self.data.train_size == 0 || self.data.eval_size == 0 {
            return bad("data.train_size and data.eval_size must be positive".into());
        }
        if self.task == Task::Regression && !(4..=128).contains(&self.data.image_size) {
            return bad(format!("data.image_size {} outside [4, 128]", self.data.image_size));
        }
        if !(self.data.noise_sigma >= 0.0 && self.data.noise_sigma < 1.0) {
            return bad(format!("data.noise_sigma {} outside [0, 1)", self.data.noise_sigma));
        }
        if !(1..=512).contains(&self.model.width) {
            return bad(format!("model.width {} outside [1, 512]", self.model.width));
        }
        match (self.model.arch, self.model.depth) {
            (ArchKind::MiniResnet, Some(_)) => return bad("model.depth applies to denoise-skip only".into()),
            (ArchKind::DenoiseSkip, Some(d)) if !(2..=32).contains(&d) => {
                return bad(format!("model.depth {d} outside [2, 32]"));
            }
            _ => {}
        }
        if self.task == Task::Classification && self.skip_first_last() == Some(false) {
            return bad("classification keeps its first and last layers in full precision; qat.skip_first_last must be true".into());
        }
        self.pretrain_config().validate()?;
        self.qat_config(self.qat.noise_gradual, self.qat.clamp_learning).validate()?;
        let arch = self.arch();
        arch.validate()?;
        let quantized = arch.pinned_layers(self.skip()).iter().filter(|&&p| !p).count();
        let stages = self.qat.num_blocks.unwrap_or(quantized);
        if stages == 0 || stages > quantized {
            return bad(format!("qat.num_blocks {stages} must be in [1, {quantized}]"));
        }
        if self.qat.noise_gradual && self.qat.epochs < stages * self.qat.epochs_per_stage {
            return bad(format!(
                "qat.epochs {} cannot cover {stages} stages of {} epochs",
                self.qat.epochs, self.qat.epochs_per_stage
            ));
        }
        Ok(())
    }

    fn skip_first_last(&self) -> Option<bool> {
        self.qat.skip_first_last
    }

    pub fn arch(&self) -> Arch {
        match self.model.arch {
            ArchKind::MiniResnet => Arch::mini_resnet(self.model.width),
            ArchKind::DenoiseSkip => Arch::denoise_net(self.model.width, self.data.image_size, self.model.depth.unwrap_or(3)),
        }
    }

    /// First/last-layer policy in effect.
    pub fn skip(&self) -> bool {
        self.qat.skip_first_last.unwrap_or(self.task == Task::Classification)
    }

    pub fn pretrain_config(&self) -> TrainConfig {
        TrainConfig {
            total_epochs: self.train.epochs,
            epochs_per_stage: 1,
            num_blocks: None,
            batch_size: self.train.batch_size,
            optimizer: self.train.optimizer,
            quant: self.quant,
            skip_first_last: self.skip(),
            enable_noise_gradual: false,
            enable_clamp_learning: false,
            seed: self.seed,
            calibration_batches: self.qat.calibration_batches,
        }
    }

    pub fn qat_config(&self, noise_gradual: bool, clamp_learning: bool) -> TrainConfig {
        TrainConfig {
            total_epochs: self.qat.epochs,
            epochs_per_stage: self.qat.epochs_per_stage,
            num_blocks: self.qat.num_blocks,
            batch_size: self.qat.batch_size,
            optimizer: self.qat.optimizer,
            quant: self.quant,
            skip_first_last: self.skip(),
            enable_noise_gradual: noise_gradual,
            enable_clamp_learning: clamp_learning,
            seed: self.seed.wrapping_add(1),
            calibration_batches: self.qat.calibration_batches,
        }
    }
}
