//! Reconstruction decoder, U-shaped segmentation/registration decoder and classification head.

use triad_tensor::{Real, Var};

use super::config::EncoderConfig;
use super::layers::{self, build_res_block, build_up_block, res_block, res_block_params, up_block, up_block_params};
use super::params::{Bound, Builder, Init};
use super::{ModelError, Pyramid, Result};

pub const RECON_PREFIX: &str = "recon.";
pub const SEG_PREFIX: &str = "seg.";
pub const REG_PREFIX: &str = "reg.";
pub const CLS_PREFIX: &str = "cls.";
pub const DEFAULT_CLS_HIDDEN: usize = 512;

fn recon_channels(cfg: &EncoderConfig, i: usize) -> (usize, usize) {
    let ci = cfg.bottleneck_channels() >> i;
    (ci, ci / 2)
}

pub fn build_recon(cfg: &EncoderConfig, b: &mut Builder) {
    for i in 0..5 {
        let (ci, co) = recon_channels(cfg, i);
        b.conv_transpose(&format!("up{i}"), ci, co, 2, true);
    }
    b.conv("out", cfg.feature_size / 2, 1, 1, true);
}

pub fn count_recon(cfg: &EncoderConfig) -> usize {
    (0..5)
        .map(|i| {
            let (ci, co) = recon_channels(cfg, i);
            8 * ci * co + co
        })
        .sum::<usize>()
        + cfg.feature_size / 2
        + 1
}

fn check_channels(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(ModelError::Config(format!("{what} has {got} channels, expected {want}")));
    }
    Ok(())
}

/// Five x2 upsampling blocks (16C -> C/2) and a 1^3 conv to one channel; no skips.
pub fn recon_forward<'t, T: Real>(p: &Bound<'t, T>, bottleneck: &Var<'t, T>) -> Result<Var<'t, T>> {
    let expect = p.shape("recon.up0.weight")?[0];
    check_channels("bottleneck", bottleneck.shape()[1], expect)?;
    let mut x = bottleneck.clone();
    for i in 0..5 {
        x = layers::act(&layers::instance_norm(&layers::conv_transpose(p, &format!("recon.up{i}"), &x)?));
    }
    layers::conv(p, "recon.out", &x, 1, 0)
}

/// Skip-path blocks and up blocks of the U-shaped decoder: (name, in, out).
fn unet_layout(cfg: &EncoderConfig) -> ([(&'static str, usize, usize); 5], [(&'static str, usize, usize); 5]) {
    let c = cfg.feature_size;
    (
        [
            ("encoder1", cfg.in_channels, c),
            ("encoder2", c, c),
            ("encoder3", 2 * c, 2 * c),
            ("encoder4", 4 * c, 4 * c),
            ("encoder10", 16 * c, 16 * c),
        ],
        [
            ("decoder5", 16 * c, 8 * c),
            ("decoder4", 8 * c, 4 * c),
            ("decoder3", 4 * c, 2 * c),
            ("decoder2", 2 * c, c),
            ("decoder1", c, c),
        ],
    )
}

fn build_unet(cfg: &EncoderConfig, out_ch: usize, zero_out: bool, b: &mut Builder) {
    let (skips, ups) = unet_layout(cfg);
    for (n, ci, co) in skips {
        build_res_block(b, n, ci, co, 1);
    }
    for (n, ci, co) in ups {
        build_up_block(b, n, ci, co);
    }
    if zero_out {
        b.add("out.weight", &[out_ch, cfg.feature_size, 1, 1, 1], Init::Zeros);
        b.add("out.bias", &[out_ch], Init::Zeros);
    } else {
        b.conv("out", cfg.feature_size, out_ch, 1, true);
    }
}

fn count_unet(cfg: &EncoderConfig, out_ch: usize) -> usize {
    let (skips, ups) = unet_layout(cfg);
    skips.iter().map(|&(_, ci, co)| res_block_params(ci, co, 1)).sum::<usize>()
        + ups.iter().map(|&(_, ci, co)| up_block_params(ci, co)).sum::<usize>()
        + out_ch * cfg.feature_size
        + out_ch
}

fn unet_forward<'t, T: Real>(
    prefix: &str,
    p: &Bound<'t, T>,
    x_in: &Var<'t, T>,
    pyr: &Pyramid<'t, T>,
) -> Result<Var<'t, T>> {
    let n = |s: &str| format!("{prefix}{s}");
    let want = p.shape(&n("encoder10.conv1.weight"))?[1];
    check_channels("bottleneck", pyr.bottleneck().shape()[1], want)?;
    check_channels("decoder input", x_in.shape()[1], p.shape(&n("encoder1.conv1.weight"))?[1])?;
    let l = &pyr.levels;
    let enc0 = res_block(p, &n("encoder1"), x_in, 1)?;
    let enc1 = res_block(p, &n("encoder2"), &l[0], 1)?;
    let enc2 = res_block(p, &n("encoder3"), &l[1], 1)?;
    let enc3 = res_block(p, &n("encoder4"), &l[2], 1)?;
    let dec4 = res_block(p, &n("encoder10"), &l[4], 1)?;
    let dec3 = up_block(p, &n("decoder5"), &dec4, &l[3])?;
    let dec2 = up_block(p, &n("decoder4"), &dec3, &enc3)?;
    let dec1 = up_block(p, &n("decoder3"), &dec2, &enc2)?;
    let dec0 = up_block(p, &n("decoder2"), &dec1, &enc1)?;
    let out = up_block(p, &n("decoder1"), &dec0, &enc0)?;
    layers::conv(p, &n("out"), &out, 1, 0)
}

pub fn check_classes(k: usize) -> Result<()> {
    if k < 2 {
        return Err(ModelError::Config(format!("need at least 2 classes, got {k}")));
    }
    Ok(())
}

pub fn build_seg(cfg: &EncoderConfig, n_classes: usize, b: &mut Builder) {
    build_unet(cfg, n_classes, false, b);
}

pub fn count_seg(cfg: &EncoderConfig, n_classes: usize) -> usize {
    count_unet(cfg, n_classes)
}

pub fn seg_forward<'t, T: Real>(
    p: &Bound<'t, T>,
    x_in: &Var<'t, T>,
    pyr: &Pyramid<'t, T>,
    n_classes: usize,
) -> Result<Var<'t, T>> {
    check_classes(n_classes)?;
    check_channels("segmentation output", p.shape("seg.out.weight")?[0], n_classes)?;
    unet_forward(SEG_PREFIX, p, x_in, pyr)
}

pub fn build_reg(cfg: &EncoderConfig, b: &mut Builder) {
    build_unet(cfg, 3, true, b);
}

pub fn count_reg(cfg: &EncoderConfig) -> usize {
    count_unet(cfg, 3)
}

/// Displacement field `[B, 3, D, H, W]` in voxel units.
pub fn reg_forward<'t, T: Real>(p: &Bound<'t, T>, x_in: &Var<'t, T>, pyr: &Pyramid<'t, T>) -> Result<Var<'t, T>> {
    unet_forward(REG_PREFIX, p, x_in, pyr)
}

pub fn build_cls(cfg: &EncoderConfig, n_classes: usize, hidden: usize, b: &mut Builder) {
    b.linear("fc1", cfg.bottleneck_channels(), hidden, true);
    b.linear("fc2", hidden, n_classes, true);
}

pub fn count_cls(cfg: &EncoderConfig, n_classes: usize, hidden: usize) -> usize {
    cfg.bottleneck_channels() * hidden + hidden + hidden * n_classes + n_classes
}

/// Global average pool -> linear -> GELU -> linear.
pub fn cls_forward<'t, T: Real>(p: &Bound<'t, T>, bottleneck: &Var<'t, T>, n_classes: usize) -> Result<Var<'t, T>> {
    check_classes(n_classes)?;
    let s = bottleneck.shape().to_vec();
    check_channels("bottleneck", s[1], p.shape("cls.fc1.weight")?[1])?;
    check_channels("classifier output", p.shape("cls.fc2.weight")?[0], n_classes)?;
    let pooled = bottleneck.reshape(&[s[0], s[1], s[2..].iter().product()]).mean_last();
    Ok(pooled
        .linear(p.get("cls.fc1.weight")?, Some(p.get("cls.fc1.bias")?))
        .gelu()
        .linear(p.get("cls.fc2.weight")?, Some(p.get("cls.fc2.bias")?)))
}
