//! Encoders (shifted-window attention and residual CNN), the reconstruction decoder and the
//! segmentation, classification and registration heads.
//!
//! Parameters live in a [`ParamSet`] keyed by dotted names; everything an encoder owns sits
//! under `encoder.`, so a pre-trained encoder can be moved into any task model.

mod config;
mod conv_encoder;
mod heads;
mod layers;
mod params;
mod swin;
mod warp;

use thiserror::Error;
use triad_tensor::{Real, Tensor, Var};

pub use config::{Arch, EncoderConfig, ENCODER_STRIDE, PYRAMID_LEVELS};
pub use heads::{CLS_PREFIX, DEFAULT_CLS_HIDDEN, RECON_PREFIX, REG_PREFIX, SEG_PREFIX};
pub use params::{transfer_encoder_weights, Bound, Builder, Init, ParamSet, ENCODER_PREFIX};
pub use swin::MASK_VALUE;
pub use warp::{warp, WarpMode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config error: {0}")]
    Config(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("encoder transfer failed: missing {missing:?}, shape mismatch {mismatched:?}, unexpected {unexpected:?}")]
    Transfer { missing: Vec<String>, mismatched: Vec<String>, unexpected: Vec<String> },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Encoder outputs at strides 2, 4, 8, 16 and 32 with channels C, 2C, 4C, 8C and 16C.
pub struct Pyramid<'t, T: Real> {
    pub levels: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Pyramid<'t, T> {
    pub fn bottleneck(&self) -> &Var<'t, T> {
        self.levels.last().expect("pyramid has levels")
    }
}

pub fn build_encoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut b = Builder::new(seed, ENCODER_PREFIX);
    match cfg.arch {
        Arch::Swin => swin::build(cfg, &mut b),
        Arch::Conv => conv_encoder::build(cfg, &mut b),
    }
    Ok(b.finish())
}

pub fn encoder_forward<'t, T: Real>(cfg: &EncoderConfig, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Pyramid<'t, T>> {
    cfg.validate()?;
    cfg.check_input(x.shape())?;
    match cfg.arch {
        Arch::Swin => swin::forward(cfg, p, x),
        Arch::Conv => conv_encoder::forward(p, x),
    }
}

pub fn build_recon_decoder(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut b = Builder::new(seed, RECON_PREFIX);
    heads::build_recon(cfg, &mut b);
    Ok(b.finish())
}

/// `[B, 16C, d, h, w]` bottleneck -> `[B, 1, 32d, 32h, 32w]` reconstruction.
pub fn recon_decoder_forward<'t, T: Real>(p: &Bound<'t, T>, bottleneck: &Var<'t, T>) -> Result<Var<'t, T>> {
    heads::recon_forward(p, bottleneck)
}

pub fn build_seg_decoder(cfg: &EncoderConfig, n_classes: usize, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    heads::check_classes(n_classes)?;
    let mut b = Builder::new(seed, SEG_PREFIX);
    heads::build_seg(cfg, n_classes, &mut b);
    Ok(b.finish())
}

/// Logits `[B, K, D, H, W]` at input resolution; `x_in` is the encoder input.
pub fn seg_decoder_forward<'t, T: Real>(
    p: &Bound<'t, T>,
    x_in: &Var<'t, T>,
    pyramid: &Pyramid<'t, T>,
    n_classes: usize,
) -> Result<Var<'t, T>> {
    heads::seg_forward(p, x_in, pyramid, n_classes)
}

pub fn build_cls_head(cfg: &EncoderConfig, n_classes: usize, hidden: usize, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    heads::check_classes(n_classes)?;
    if hidden == 0 {
        return Err(ModelError::Config("classifier hidden width must be positive".into()));
    }
    let mut b = Builder::new(seed, CLS_PREFIX);
    heads::build_cls(cfg, n_classes, hidden, &mut b);
    Ok(b.finish())
}

/// Logits `[B, K]`.
pub fn cls_head_forward<'t, T: Real>(p: &Bound<'t, T>, bottleneck: &Var<'t, T>, n_classes: usize) -> Result<Var<'t, T>> {
    heads::cls_forward(p, bottleneck, n_classes)
}

/// The registration head needs a two-channel (moving, fixed) encoder.
pub fn build_reg_head(cfg: &EncoderConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    if cfg.in_channels != 2 {
        return Err(ModelError::Config(format!(
            "registration needs in_channels = 2 (moving and fixed), got {}",
            cfg.in_channels
        )));
    }
    let mut b = Builder::new(seed, REG_PREFIX);
    heads::build_reg(cfg, &mut b);
    Ok(b.finish())
}

/// Displacement field `[B, 3, D, H, W]` in voxel units.
pub fn reg_head_forward<'t, T: Real>(p: &Bound<'t, T>, x_in: &Var<'t, T>, pyramid: &Pyramid<'t, T>) -> Result<Var<'t, T>> {
    heads::reg_forward(p, x_in, pyramid)
}

/// Which complete model to count.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Encoder,
    /// Encoder plus reconstruction decoder.
    Pretrain,
    Segmentation { n_classes: usize },
    Classification { n_classes: usize, hidden: usize },
    /// Counted with the config's own `in_channels`.
    Registration,
}

/// Exact parameter count of the model `build_*` would create.
pub fn count_params(cfg: &EncoderConfig, kind: ModelKind) -> usize {
    let enc = match cfg.arch {
        Arch::Swin => swin::count(cfg),
        Arch::Conv => conv_encoder::count(cfg),
    };
    enc + match kind {
        ModelKind::Encoder => 0,
        ModelKind::Pretrain => heads::count_recon(cfg),
        ModelKind::Segmentation { n_classes } => heads::count_seg(cfg, n_classes),
        ModelKind::Classification { n_classes, hidden } => heads::count_cls(cfg, n_classes, hidden),
        ModelKind::Registration => heads::count_reg(cfg),
    }
}

/// Encoder weights that read the raw input channels.
fn input_layer_names(arch: Arch) -> &'static [&'static str] {
    match arch {
        Arch::Swin => &["encoder.patch_embed.proj.weight"],
        Arch::Conv => &["encoder.stages.0.conv1.weight", "encoder.stages.0.conv3.weight"],
    }
}

/// Widens the input layer of a pre-trained encoder to `in_channels` by replicating its
/// kernels across the new channels, scaled so a replicated input gives the same response.
pub fn adapt_input_channels(params: &ParamSet, arch: Arch, in_channels: usize) -> Result<ParamSet> {
    let mut out = params.clone();
    for &name in input_layer_names(arch) {
        let Some(t) = out.get_mut(name) else {
            return Err(ModelError::MissingParam(name.to_owned()));
        };
        let s = t.shape().to_vec();
        let (co, ci, k3) = (s[0], s[1], s[2..].iter().product::<usize>());
        if ci == in_channels {
            continue;
        }
        let scale = ci as f32 / in_channels as f32;
        let src = t.data();
        let mut data = Vec::with_capacity(co * in_channels * k3);
        for o in 0..co {
            for i in 0..in_channels {
                let from = (o * ci + i % ci) * k3;
                data.extend(src[from..from + k3].iter().map(|&w| w * scale));
            }
        }
        let mut shape = s;
        shape[1] = in_channels;
        *t = Tensor::from_vec(&shape, data);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
