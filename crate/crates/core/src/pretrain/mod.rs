//! Reconstruction plus log-ratio pre-training: losses, schedule, optimizers, checkpoints and
//! the training loop.

mod checkpoint;
mod loss;
mod optim;
mod schedule;
mod train;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Arch, EncoderConfig, ModelError};
use crate::preprocess::{normalize_unit, PreprocessError};
use crate::text::{TextError, TextProvider};
use crate::volume::{read_nifti, DatasetManifest, VolumeError};

pub use checkpoint::{
    check_compatible, decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, model_hash,
    save_checkpoint, Checkpoint, RngState, MAGIC,
};
pub use loss::{combine, l1_loss, log_ratio_loss, log_ratio_value, total_loss, LossParts, LOG_RATIO_EPS};
pub use optim::{Optimizer, OptimizerKind};
pub use schedule::{lr_schedule, poly_schedule};
pub use train::{
    batch_indices, checkpoint_path, crop_array, pooled_embedding, pretrain_loop, train_step, PretrainReport, StepMetrics,
    TrainState, METRICS_FILE,
};

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("pretrain config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("log-ratio loss needs a batch of at least 3, got {0}")]
    BatchSize(usize),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("checkpoint compatibility error: {0}")]
    Compatibility(String),
    #[error("training diverged at step {step}: {diagnostics}")]
    Divergence { step: u64, diagnostics: String },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PretrainError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: EncoderConfig,
    pub steps: u64,
    pub warmup: u64,
    pub batch: usize,
    pub roi: usize,
    /// Falls back to the per-architecture default.
    pub base_lr: Option<f64>,
    /// Weight of the log-ratio term.
    pub lambda: f64,
    pub optimizer: OptimizerKind,
    pub checkpoint_every: u64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            model: EncoderConfig::default(),
            steps: 200_000,
            warmup: 1_000,
            batch: 8,
            roi: 96,
            base_lr: None,
            lambda: 0.01,
            optimizer: OptimizerKind::adamw(),
            checkpoint_every: 20_000,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn base_lr(&self) -> f64 {
        self.base_lr.unwrap_or(match self.model.arch {
            Arch::Swin => 1e-6,
            Arch::Conv => 1e-4,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        lr_schedule(step, self.base_lr(), self.warmup, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.check_input(&[self.batch.max(1), self.model.in_channels, self.roi, self.roi, self.roi])?;
        let bad = |m: String| Err(PretrainError::Config(m));
        if self.warmup >= self.steps {
            return bad(format!("warmup {} must be below steps {}", self.warmup, self.steps));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("loss weight must be finite and >= 0, got {}", self.lambda));
        }
        if self.batch == 0 || (self.lambda > 0.0 && self.batch < 3) {
            return bad(format!("batch {} too small (log-ratio needs at least 3)", self.batch));
        }
        if !(self.base_lr() > 0.0 && self.base_lr().is_finite()) {
            return bad(format!("base learning rate must be positive, got {}", self.base_lr()));
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        if self.model.in_channels != 1 {
            return bad("pre-training reconstructs single-channel volumes".into());
        }
        Ok(())
    }
}

/// One pre-training volume with its text embedding.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    pub id: String,
    /// Intensities scaled to `[0, 1]`.
    pub image: Array3<f32>,
    pub text: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PretrainData {
    pub samples: Vec<PretrainSample>,
}

impl PretrainData {
    pub fn new(samples: Vec<PretrainSample>) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(PretrainError::Data("no pre-training samples".into()));
        };
        let d = first.text.len();
        for s in &samples {
            if s.text.len() != d || d == 0 {
                return Err(PretrainError::Data(format!("`{}`: text embedding width {} vs {d}", s.id, s.text.len())));
            }
            if !s.image.iter().all(|v| v.is_finite()) || !s.text.iter().all(|v| v.is_finite()) {
                return Err(PretrainError::NonFinite(format!("sample `{}`", s.id)));
            }
        }
        Ok(PretrainData { samples })
    }

    /// Every record of a manifest, normalized to `[0, 1]`, with its description embedded.
    pub fn from_manifest(manifest: &DatasetManifest, provider: &TextProvider) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            let v = normalize_unit(&read_nifti(&r.volume_path)?)?;
            let text = provider.embed(&r.description)?.vector;
            samples.push(PretrainSample { id: r.id.clone(), image: v.data, text });
        }
        Self::new(samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests;
