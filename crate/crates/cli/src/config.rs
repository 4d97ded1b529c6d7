//! Run configuration read from TOML. Every table and field is optional;
//! missing values take the defaults below.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crosscoherence::crosscoherence::AttentionConfig;
use crosscoherence::datasets::synthetic::SyntheticConfig;
use crosscoherence::distractors::MiningConfig;
use crosscoherence::encoders::{BuiltinTextConfig, DecoderConfig, EncoderConfig};
use crosscoherence::refine::{LiveConfig, RefineConfig};
use crosscoherence::{FitConfig, DEFAULT_SET_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Applied to every stage; stage tables carry no seeds of their own.
    pub seed: u64,
    /// Worker threads; all cores when unset.
    pub workers: Option<usize>,
    pub synthetic: SyntheticSection,
    pub encoder: EncoderConfig,
    pub autoencoder: AutoencoderSection,
    pub mining: MiningSection,
    pub triplets: TripletSection,
    pub scorer: ScorerSection,
    pub fit: FitSection,
    pub eval: EvalSection,
    pub refine: RefineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: None,
            synthetic: SyntheticSection::default(),
            encoder: EncoderConfig::desk(),
            autoencoder: AutoencoderSection::default(),
            mining: MiningSection::default(),
            triplets: TripletSection::default(),
            scorer: ScorerSection::default(),
            fit: FitSection::default(),
            eval: EvalSection::default(),
            refine: RefineSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSection {
    pub chairs: usize,
    pub tables: usize,
    pub points: usize,
    pub captions_per_shape: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SyntheticSection {
    fn default() -> Self {
        let d = SyntheticConfig::default();
        Self {
            chairs: d.chairs,
            tables: d.tables,
            points: 512,
            captions_per_shape: d.captions_per_shape,
            train_fraction: d.train_fraction,
            val_fraction: d.val_fraction,
        }
    }
}

impl SyntheticSection {
    pub fn resolve(&self, seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            chairs: self.chairs,
            tables: self.tables,
            points: self.points,
            captions_per_shape: self.captions_per_shape,
            train_fraction: self.train_fraction,
            val_fraction: self.val_fraction,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderSection {
    pub decoder: DecoderConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub color_weight: f64,
}

impl Default for AutoencoderSection {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::desk(),
            steps: 300,
            batch_size: 8,
            learning_rate: 1e-3,
            color_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSection {
    pub easy_percentile: f64,
}

impl Default for MiningSection {
    fn default() -> Self {
        Self {
            easy_percentile: MiningConfig::default().easy_percentile,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TripletSection {
    /// Candidates per stored triplet (reference included), 2 to 4.
    pub group_size: usize,
}

impl Default for TripletSection {
    fn default() -> Self {
        Self { group_size: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScorerSection {
    pub attention: AttentionConfig,
    pub depth: usize,
    pub head_widths: Vec<usize>,
    pub region_positions: bool,
    /// Hidden ReLU widths applied to each shape token before projection.
    pub shape_hidden: Vec<usize>,
    /// Built-in text encoder settings; ignored when `embeddings` is set.
    pub text: BuiltinTextConfig,
    pub train_text: bool,
    /// Precomputed per-caption embeddings (frozen) instead of the built-in
    /// encoder.
    pub embeddings: Option<PathBuf>,
}

impl Default for ScorerSection {
    fn default() -> Self {
        Self {
            attention: AttentionConfig {
                d_model: 32,
                heads: 4,
                use_residual_norm: true,
            },
            depth: 2,
            head_widths: vec![64, 32],
            region_positions: true,
            shape_hidden: vec![64],
            text: BuiltinTextConfig { dim: 32, heads: 4 },
            train_text: true,
            embeddings: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub group_size: usize,
    pub patience: Option<usize>,
}

impl Default for FitSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            group_size: 2,
            patience: None,
        }
    }
}

impl FitSection {
    pub fn resolve(&self, seed: u64) -> FitConfig {
        FitConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            group_size: self.group_size,
            patience: self.patience,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn split(self) -> crosscoherence::Split {
        match self {
            EvalSplit::Train => crosscoherence::Split::Train,
            EvalSplit::Val => crosscoherence::Split::Val,
            EvalSplit::Test => crosscoherence::Split::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub set_size: usize,
    pub split: EvalSplit,
    /// Drop items whose caption does not rule out the distractor, when the
    /// manifest has attributes.
    pub unambiguous_only: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            set_size: DEFAULT_SET_SIZE,
            split: EvalSplit::Test,
            unambiguous_only: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub provider: ProviderKind,
    pub template: String,
    pub min_words: usize,
    pub live: LiveConfig,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            provider: ProviderKind::Mock,
            template: d.template,
            min_words: d.min_words,
            live: LiveConfig::default(),
        }
    }
}

impl RefineSection {
    pub fn resolve(&self) -> RefineConfig {
        RefineConfig {
            template: self.template.clone(),
            min_words: self.min_words,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}
