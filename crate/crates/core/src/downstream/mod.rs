//! Fine-tuning of pre-trained encoders for segmentation, classification and registration,
//! and the evaluation metrics.

mod losses;
mod metrics;
mod train;

use std::path::PathBuf;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    adapt_input_channels, build_encoder, transfer_encoder_weights, EncoderConfig, ModelError, ParamSet, DEFAULT_CLS_HIDDEN,
    ENCODER_PREFIX,
};
use crate::pretrain::{load_checkpoint, model_hash, OptimizerKind, PretrainError};

pub use losses::{ncc_loss, smoothness_loss, Similarity};
pub use metrics::{accuracy, confusion, dice, dice_per_class, roc_auc, roc_curve, ConfusionMatrix};
pub use train::{
    evaluate_cls, evaluate_reg, evaluate_seg, finetune_cls, finetune_reg, finetune_seg, predict_cls, predict_field,
    predict_seg, ClsReport, EpochRecord, FinetuneOutcome, RegReport, SegReport,
};

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("fine-tune config error: {0}")]
    Config(String),
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] PretrainError),
}

pub type Result<T, E = DownstreamError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Cls,
    Reg,
}

/// Where the encoder weights come from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitSource {
    Scratch,
    Checkpoint(PathBuf),
}

impl InitSource {
    /// `scratch` or a checkpoint path.
    pub fn parse(s: &str) -> Self {
        if s == "scratch" {
            InitSource::Scratch
        } else {
            InitSource::Checkpoint(PathBuf::from(s))
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InitSource::Scratch => "scratch",
            InitSource::Checkpoint(_) => "triad",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub task: Task,
    pub model: EncoderConfig,
    pub init: InitSource,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch: usize,
    /// Including background for segmentation.
    pub n_classes: usize,
    pub cls_hidden: usize,
    /// Linear warmup length of the classification schedule.
    pub warmup_epochs: usize,
    /// Polynomial decay exponent of the segmentation and registration schedules.
    pub poly_power: f64,
    /// Train only the task head.
    pub freeze_encoder: bool,
    pub similarity: Similarity,
    pub ncc_window: usize,
    pub smooth_weight: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::seg()
    }
}

impl FinetuneConfig {
    /// SGD with Nesterov momentum 0.99, lr 0.01, poly decay, cross-entropy plus soft dice.
    pub fn seg() -> Self {
        FinetuneConfig {
            task: Task::Seg,
            model: EncoderConfig::default(),
            init: InitSource::Scratch,
            epochs: 150,
            lr: 0.01,
            optimizer: OptimizerKind::sgd_nesterov(0.99),
            batch: 2,
            n_classes: 2,
            cls_hidden: DEFAULT_CLS_HIDDEN,
            warmup_epochs: 5,
            poly_power: 0.9,
            freeze_encoder: false,
            similarity: Similarity::Ncc,
            ncc_window: 9,
            smooth_weight: 1.0,
            seed: 0,
        }
    }

    /// Adam at 1e-3 with five warmup epochs and cosine decay.
    pub fn cls() -> Self {
        FinetuneConfig { task: Task::Cls, lr: 1e-3, optimizer: OptimizerKind::adam(), batch: 4, epochs: 100, ..Self::seg() }
    }

    /// Adam, batch 1, NCC similarity plus a diffusion regularizer of weight 1.
    pub fn reg() -> Self {
        FinetuneConfig {
            task: Task::Reg,
            model: EncoderConfig { in_channels: 2, ..EncoderConfig::default() },
            lr: 1e-4,
            optimizer: OptimizerKind::adam(),
            batch: 1,
            epochs: 500,
            ..Self::seg()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Seg => Self::seg(),
            Task::Cls => Self::cls(),
            Task::Reg => Self::reg(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(DownstreamError::Config(m));
        // lr = 0 is accepted: it is the frozen-parameter sanity check.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.lr));
        }
        if self.epochs == 0 || self.batch == 0 {
            return bad("epochs and batch must be at least 1".into());
        }
        match self.task {
            Task::Seg | Task::Cls if self.n_classes < 2 => return bad(format!("need at least 2 classes, got {}", self.n_classes)),
            Task::Cls if self.warmup_epochs >= self.epochs => {
                return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs))
            }
            Task::Cls if self.cls_hidden == 0 => return bad("classifier hidden width must be positive".into()),
            Task::Reg if self.model.in_channels != 2 => {
                return bad("registration encodes (moving, fixed) as two input channels".into())
            }
            Task::Seg | Task::Cls if self.model.in_channels != 1 => {
                return bad("segmentation and classification take single-channel volumes".into())
            }
            Task::Reg if !(self.smooth_weight >= 0.0 && self.smooth_weight.is_finite()) => {
                return bad(format!("smooth_weight must be >= 0, got {}", self.smooth_weight))
            }
            Task::Reg if self.ncc_window == 0 || self.ncc_window % 2 == 0 => {
                return bad(format!("ncc_window must be odd, got {}", self.ncc_window))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Encoder parameters for `model`: freshly initialized, or transferred from a pre-training
/// checkpoint. A single-channel checkpoint is widened for multi-channel inputs.
pub fn init_encoder(model: &EncoderConfig, init: &InitSource, seed: u64) -> Result<ParamSet> {
    let fresh = build_encoder(model, seed)?;
    let InitSource::Checkpoint(path) = init else {
        return Ok(fresh);
    };
    let ckpt = load_checkpoint(path)?;
    let single = EncoderConfig { in_channels: 1, ..model.clone() };
    if ckpt.config_hash != model_hash(model) && ckpt.config_hash != model_hash(&single) {
        return Err(PretrainError::Compatibility(format!(
            "checkpoint {} was written for another encoder configuration",
            path.display()
        ))
        .into());
    }
    let mut enc = ckpt.params.with_prefix(ENCODER_PREFIX);
    if ckpt.config_hash != model_hash(model) {
        enc = adapt_input_channels(&enc, model.arch, model.in_channels)?;
    }
    Ok(transfer_encoder_weights(&enc, &fresh)?)
}

/// Image with voxel labels in `[0, K)`.
#[derive(Clone, Debug)]
pub struct SegSample {
    pub id: String,
    pub image: Array3<f32>,
    pub labels: Array3<u16>,
}

#[derive(Clone, Debug)]
pub struct ClsSample {
    pub id: String,
    pub image: Array3<f32>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct RegPair {
    pub id: String,
    pub moving: Array3<f32>,
    pub fixed: Array3<f32>,
    pub moving_labels: Option<Array3<u16>>,
    pub fixed_labels: Option<Array3<u16>>,
}

/// Training, model-selection and held-out samples.
#[derive(Clone, Debug)]
pub struct Splits<S> {
    pub train: Vec<S>,
    pub val: Vec<S>,
    pub test: Vec<S>,
}

/// `k` disjoint folds covering `0..n` after a seeded shuffle; fold `i` is the validation
/// set of split `i`.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 || k > n {
        return Err(DownstreamError::Config(format!("cannot split {n} items into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|f| {
            let (lo, hi) = (f * n / k, (f + 1) * n / k);
            let val = idx[lo..hi].to_vec();
            let train = idx[..lo].iter().chain(&idx[hi..]).copied().collect();
            (train, val)
        })
        .collect())
}
