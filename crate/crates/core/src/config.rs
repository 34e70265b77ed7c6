//! Run configuration files: one TOML table per concern, every key optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{split_point, synthetic_text, Corpus, Tokenizer, TokenizerMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Plain-text files concatenated in order. Empty selects the built-in synthetic corpus.
    pub files: Vec<PathBuf>,
    pub tokenizer: TokenizerMode,
    pub val_fraction: f64,
    pub synthetic_bytes: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            files: Vec::new(),
            tokenizer: TokenizerMode::Byte,
            val_fraction: 0.05,
            synthetic_bytes: 6_000_000,
            synthetic_seed: 1234,
        }
    }
}

impl DataConfig {
    /// Concatenated file contents, or the synthetic corpus when no files are listed.
    pub fn raw_text(&self) -> Result<Vec<u8>> {
        if self.files.is_empty() {
            return Ok(synthetic_text(self.synthetic_bytes, self.synthetic_seed).into_bytes());
        }
        let mut text = Vec::new();
        for p in &self.files {
            text.extend(std::fs::read(p).map_err(|e| Error::Corpus(format!("{}: {e}", p.display())))?);
        }
        Ok(text)
    }

    pub fn corpus(&self) -> Result<Corpus> {
        Corpus::from_bytes(&self.raw_text()?, self.tokenizer, self.val_fraction)
    }

    /// Validation split encoded with an existing tokenizer; unseen characters map to the
    /// unknown id and are counted.
    pub fn val_tokens(&self, tokenizer: &Tokenizer) -> Result<(Vec<usize>, usize)> {
        let text = self.raw_text()?;
        let cut = split_point(&text, tokenizer.mode(), self.val_fraction);
        let (ids, unknown) = tokenizer.encode_lossy(&text[cut..]);
        if ids.len() < 2 {
            return Err(Error::Corpus(format!("validation split has {} tokens", ids.len())));
        }
        Ok((ids, unknown))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Loop budget; defaults to the model's maximum.
    pub budget: Option<usize>,
    /// Explicit schedule (`uniform:M` or `a,b,c`); overrides `budget`.
    pub schedule: Option<String>,
    /// Window stride; defaults to half the context length.
    pub stride: Option<usize>,
    pub batch_size: usize,
    /// Validation tokens scored, taken from the start of the split. `None` scores all.
    pub max_tokens: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { budget: None, schedule: None, stride: None, batch_size: 8, max_tokens: Some(65_536) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Number of validation windows used as prompts.
    pub prompts: usize,
    /// Positions per prompt the metrics look at, counted from the end.
    pub last_tokens: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self { prompts: 8, last_tokens: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub diagnostics: DiagnosticsConfig,
}

pub const PRESETS: &[&str] = &["desk", "large-1b"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::default()),
            "large-1b" => Ok(Self {
                model: ModelConfig::large_1b(),
                train: TrainConfig {
                    total_steps: 50_000,
                    warmup_steps: 4_000,
                    batch_size: 48,
                    eval_interval: 2_000,
                    checkpoint_interval: 5_000,
                    ..TrainConfig::default()
                },
                ..Self::default()
            }),
            other => Err(Error::Config(format!("unknown preset {other:?}; expected one of {PRESETS:?}"))),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.data.val_fraction > 0.0 && self.data.val_fraction < 1.0) {
            return Err(Error::Config("data.val_fraction must lie in (0, 1)".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be at least 1".into()));
        }
        Ok(())
    }
}
