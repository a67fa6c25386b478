//! TOML run configuration.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! height = 8
//! width = 8
//! upscale = 2
//!
//! [train]
//! epochs = 20
//! mode = "end_to_end"
//! ```
//!
//! Every section and key is optional; unknown keys are rejected.

use flowsr_tensor::SimilarityMode;
use serde::{Deserialize, Serialize};

use crate::contrastive::PretrainConfig;
use crate::grid::Precision;
use crate::model::ModelConfig;
use crate::sampler::{SamplerConfig, ThresholdMode};
use crate::split::DatasetSplit;
use crate::synth::SynthConfig;
use crate::train::{DiffLossForm, TrainConfig, TrainMode};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub sampler: SamplerSection,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub height: usize,
    pub width: usize,
    pub upscale: usize,
    pub frames: usize,
    pub slots_per_day: usize,
    pub blobs: usize,
    pub blob_speed: u32,
    pub noise: f64,
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            height: s.height,
            width: s.width,
            upscale: s.upscale,
            frames: s.frames,
            slots_per_day: s.slots_per_day,
            blobs: s.blobs,
            blob_speed: s.blob_speed,
            noise: s.noise,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdKind {
    Absolute,
    Percentile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub delta: f64,
    pub theta: f64,
    pub k: usize,
    pub threshold_mode: ThresholdKind,
    pub percentile: f64,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self { delta: 1.0, theta: 1.0, k: 8, threshold_mode: ThresholdKind::Percentile, percentile: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    ExpInner,
    RawInner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub temperature: f64,
    pub similarity_mode: SimilarityKind,
    pub city_anchors: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
            temperature: p.temperature,
            similarity_mode: SimilarityKind::ExpInner,
            city_anchors: p.city_anchors,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeKind {
    TwoStage,
    EndToEnd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffFormKind {
    AsWritten,
    PenalizeSimilarity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda: f64,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// 0 runs every epoch over the whole training split.
    pub batches_per_epoch: usize,
    pub mode: ModeKind,
    pub freeze_encoders: bool,
    pub diff_loss_form: DiffFormKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            lambda: t.lambda,
            alpha: t.alpha,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            batches_per_epoch: t.batches_per_epoch.unwrap_or(0),
            mode: ModeKind::TwoStage,
            freeze_encoders: t.freeze_encoders,
            diff_loss_form: DiffFormKind::AsWritten,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub mape_mask: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { mape_mask: crate::metrics::DEFAULT_MAPE_MASK }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Effective configuration with all defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth(Precision::F32).validate()?;
        self.split()?;
        self.model.validate()?;
        if self.model.upscale != self.data.upscale {
            return Err(Error::Config(format!(
                "model.upscale {} differs from data.upscale {}",
                self.model.upscale, self.data.upscale
            )));
        }
        self.pretrain().validate()?;
        self.train().validate()
    }

    pub fn synth(&self, precision: Precision) -> SynthConfig {
        let d = &self.data;
        SynthConfig {
            height: d.height,
            width: d.width,
            upscale: d.upscale,
            frames: d.frames,
            slots_per_day: d.slots_per_day,
            blobs: d.blobs,
            blob_speed: d.blob_speed,
            noise: d.noise,
            seed: self.seed,
            precision,
        }
    }

    pub fn split_for(&self, frames: usize) -> Result<DatasetSplit> {
        DatasetSplit::chronological(frames, self.data.train_frac, self.data.val_frac)
    }

    fn split(&self) -> Result<DatasetSplit> {
        self.split_for(self.data.frames).map_err(|e| match e {
            Error::Usage(m) => Error::Config(m),
            e => e,
        })
    }

    pub fn sampler(&self) -> SamplerConfig {
        let s = &self.sampler;
        SamplerConfig {
            delta: s.delta,
            theta: s.theta,
            k: s.k,
            mode: match s.threshold_mode {
                ThresholdKind::Absolute => ThresholdMode::Absolute,
                ThresholdKind::Percentile => ThresholdMode::Percentile(s.percentile),
            },
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            epochs: p.epochs,
            batch: p.batch,
            lr: p.lr,
            temperature: p.temperature,
            similarity_mode: match p.similarity_mode {
                SimilarityKind::ExpInner => SimilarityMode::ExpInner,
                SimilarityKind::RawInner => SimilarityMode::RawInner,
            },
            sampler: self.sampler(),
            city_anchors: p.city_anchors,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lambda: t.lambda,
            alpha: t.alpha,
            lr: t.lr,
            epochs: t.epochs,
            batch: t.batch,
            batches_per_epoch: (t.batches_per_epoch > 0).then_some(t.batches_per_epoch),
            seed: self.seed,
            mode: match t.mode {
                ModeKind::TwoStage => TrainMode::TwoStage,
                ModeKind::EndToEnd => TrainMode::EndToEnd,
            },
            freeze_encoders: t.freeze_encoders,
            diff_loss_form: match t.diff_loss_form {
                DiffFormKind::AsWritten => DiffLossForm::AsWritten,
                DiffFormKind::PenalizeSimilarity => DiffLossForm::PenalizeSimilarity,
            },
            mape_mask: self.eval.mape_mask,
        }
    }
}
