use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{AugmentConfig, ViewMode};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, SccNormalization};
use crate::nn::{AdamConfig, EncoderConfig, ModelConfig, TransformerConfig};

/// Which contextual term the contrastive phases use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextualMode {
    Off,
    /// Self-supervised contextual term in pretraining, supervised in the
    /// class-aware phase.
    #[default]
    Unsup,
    /// Same schedule as `unsup`; only valid where labels reach the
    /// class-aware phase.
    Sup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Each view's context predicts the other view's future.
    pub cross_view: bool,
    pub contextual: ContextualMode,
    pub views: ViewMode,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            cross_view: true,
            contextual: ContextualMode::Unsup,
            views: ViewMode::WeakStrong,
        }
    }
}

/// Named ablation presets accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    TcOnly,
    TcCrossAug,
    WeakOnly,
    StrongOnly,
}

impl Ablation {
    pub fn apply(self, a: &mut AblationConfig) {
        match self {
            Ablation::Full => *a = AblationConfig::default(),
            Ablation::TcOnly => {
                a.cross_view = false;
                a.contextual = ContextualMode::Off;
            }
            Ablation::TcCrossAug => {
                a.cross_view = true;
                a.contextual = ContextualMode::Off;
            }
            Ablation::WeakOnly => a.views = ViewMode::WeakOnly,
            Ablation::StrongOnly => a.views = ViewMode::StrongOnly,
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "tc_only" => Ablation::TcOnly,
            "tc_xaug" => Ablation::TcCrossAug,
            "weak_only" => Ablation::WeakOnly,
            "strong_only" => Ablation::StrongOnly,
            other => {
                return Err(Error::config(format!(
                    "unknown ablation `{other}` (expected full, tc_only, tc_xaug, weak_only, strong_only)"
                )))
            }
        })
    }
}

/// How the final model is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalEval {
    /// Fine-tune encoder and classifier on the labeled subset.
    #[default]
    Finetune,
    /// Train only a classifier on frozen features.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Epochs for supervised phases; `epochs` when unset.
    pub finetune_epochs: Option<usize>,
    /// Shrunk to the training-set size when larger.
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Min-max scale every channel using training-set statistics.
    pub normalize: bool,
    pub scc_normalization: SccNormalization,
    /// Keep only pseudo labels whose softmax confidence reaches this value.
    pub pseudo_threshold: Option<f64>,
    pub final_eval: FinalEval,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub transformer: TransformerConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            finetune_epochs: None,
            batch_size: 128,
            eval_batch_size: 256,
            seed: 0,
            normalize: true,
            scc_normalization: SccNormalization::Mean,
            pseudo_threshold: None,
            final_eval: FinalEval::Finetune,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            transformer: TransformerConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            transformer: self.transformer.clone(),
        }
    }

    pub fn supervised_epochs(&self) -> usize {
        self.finetune_epochs.unwrap_or(self.epochs)
    }

    /// Full check for a run: every setting plus `epochs >= 1`.
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.finetune_epochs == Some(0) {
            return Err(Error::config("epochs must be at least 1"));
        }
        self.validate_settings()
    }

    /// Everything but the epoch counts. Library phases accept zero epochs
    /// and return their starting parameters.
    pub fn validate_settings(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::config("batch sizes must be at least 1"));
        }
        if let Some(t) = self.pseudo_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::config(format!("pseudo_threshold must be in [0, 1], got {t}")));
            }
        }
        self.optimizer.validate()?;
        self.loss.validate()?;
        self.augment.validate(None)?;
        self.encoder.validate()?;
        self.transformer.validate()?;
        Ok(())
    }
}

/// End-to-end recipes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Self-supervised pretraining, then fine-tuning on the labeled subset.
    #[default]
    Tstcc,
    /// Pretrain, fine-tune, pseudo-label, class-aware training, fine-tune.
    Catcc,
    /// Encoder and classifier trained from scratch on the labeled subset.
    Supervised,
    /// Linear classifier on a randomly initialized frozen encoder.
    RandomInit,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Tstcc => "tstcc",
            Protocol::Catcc => "catcc",
            Protocol::Supervised => "supervised",
            Protocol::RandomInit => "random_init",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tstcc" => Ok(Protocol::Tstcc),
            "catcc" => Ok(Protocol::Catcc),
            "supervised" => Ok(Protocol::Supervised),
            "random_init" => Ok(Protocol::RandomInit),
            other => Err(Error::config(format!(
                "unknown protocol `{other}` (expected tstcc, catcc, supervised, random_init)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Share of the training set whose labels are kept.
    pub labels_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            labels_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub protocol: Protocol,
    /// Validate config and data shapes, then stop.
    pub dry_run: bool,
}

/// File form of a run: paths, protocol and every training setting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub output: OutputSection,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.data.labels_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::config(format!("labels_fraction must be in (0, 1], got {f}")));
        }
        if self.train.ablation.contextual == ContextualMode::Sup && self.run.protocol != Protocol::Catcc {
            return Err(Error::config(
                "supervised contextual contrasting needs pseudo labels; use protocol catcc",
            ));
        }
        self.train.validate()
    }
}
