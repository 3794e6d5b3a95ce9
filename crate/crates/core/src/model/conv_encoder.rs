//! Plain residual CNN encoder with the same channel and stride schedule as the swin encoder.

use triad_tensor::{Real, Var};

use super::config::EncoderConfig;
use super::layers::{build_res_block, res_block, res_block_params};
use super::params::{Bound, Builder};
use super::{Pyramid, Result};

fn stage_channels(cfg: &EncoderConfig, k: usize) -> (usize, usize) {
    let ci = if k == 0 { cfg.in_channels } else { cfg.feature_size << (k - 1) };
    (ci, cfg.feature_size << k)
}

pub fn build(cfg: &EncoderConfig, b: &mut Builder) {
    for k in 0..5 {
        let (ci, co) = stage_channels(cfg, k);
        build_res_block(b, &format!("stages.{k}"), ci, co, 2);
    }
}

pub fn count(cfg: &EncoderConfig) -> usize {
    (0..5)
        .map(|k| {
            let (ci, co) = stage_channels(cfg, k);
            res_block_params(ci, co, 2)
        })
        .sum()
}

pub fn forward<'t, T: Real>(p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Pyramid<'t, T>> {
    let mut levels = Vec::with_capacity(5);
    let mut cur = x.clone();
    for k in 0..5 {
        cur = res_block(p, &format!("encoder.stages.{k}"), &cur, 2)?;
        levels.push(cur.clone());
    }
    Ok(Pyramid { levels })
}
