//! Run configuration: one TOML file fully determines a run.
//!
//! ```toml
//! [model]
//! num_blocks = 3
//! hidden = 16
//! num_heads = 2
//! ffn_dim = 32
//! vocab_size = 16
//! max_positions = 16
//! num_classes = 2
//! head = "classifier"
//!
//! [task]
//! kind = "keyword_detect"
//! vocab_size = 16
//! seq_len = 8
//! num_classes = 2
//! train_n = 96
//! eval_n = 48
//! seed = 1
//!
//! [train]
//! epochs = 3
//! batch_size = 8
//! base_lr = 0.003
//! seed = 7
//!
//! [schedule]
//! stages = 3
//! mode = "progtune"
//! variant = "standard"
//!
//! [output]
//! dir = "runs/keyword"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelConfig};
use crate::peft::PeftConfig;
use crate::schedule::{Mode, Variant};
use crate::tasks::{TaskKind, TaskSpec};
use crate::trainer::{OptimizerConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub seed: u64,
    #[serde(default)]
    pub peft: PeftConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    /// Declared number of stages `T`; must equal `train.epochs`.
    pub stages: usize,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_true")]
    pub embeddings_always: bool,
}

fn default_mode() -> Mode {
    Mode::Progtune
}

fn default_variant() -> Variant {
    Variant::Standard
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    #[default]
    Csv,
    Jsonl,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(Error::config(format!("unknown export format `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    #[serde(default)]
    pub format: ExportFormat,
    #[serde(default)]
    pub save_checkpoint: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainSection,
    pub schedule: ScheduleSection,
    pub output: OutputSection,
}

impl RunConfig {
    /// Parses without validating, so hand-edited files can be inspected.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let cfg = Self::parse(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            base_lr: self.train.base_lr,
            seed: self.train.seed,
            mode: self.schedule.mode,
            variant: self.schedule.variant,
            embeddings_always: self.schedule.embeddings_always,
            peft: self.train.peft.clone(),
            optimizer: self.train.optimizer.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train_config().validate()?;
        self.train.peft.validate(self.model.hidden)?;
        // TOML integers are signed 64-bit.
        if self.train.seed > i64::MAX as u64 || self.task.seed > i64::MAX as u64 {
            return Err(Error::config("seeds must fit in a signed 64-bit integer"));
        }
        if self.train.epochs != self.schedule.stages {
            return Err(Error::config(format!(
                "train.epochs = {} but schedule.stages = {}; a progressive run trains one stage per epoch",
                self.train.epochs, self.schedule.stages
            )));
        }
        if self.schedule.mode == Mode::Progtune && self.schedule.stages > self.model.num_blocks {
            return Err(Error::config(format!(
                "{} stages cannot be formed from {} blocks",
                self.schedule.stages, self.model.num_blocks
            )));
        }
        if self.task.vocab_size > self.model.vocab_size {
            return Err(Error::config("task vocabulary is larger than the model's"));
        }
        if self.task.seq_len > self.model.max_positions {
            return Err(Error::config("task sequences are longer than max_positions"));
        }
        match self.model.head {
            HeadKind::Classifier if self.task.num_classes != self.model.num_classes => {
                Err(Error::config("task and model disagree on the number of classes"))
            }
            HeadKind::QaSpan if self.task.kind != TaskKind::KeywordDetect => {
                Err(Error::config("span heads need a task with answer spans (keyword_detect)"))
            }
            _ => Ok(()),
        }
    }
}
