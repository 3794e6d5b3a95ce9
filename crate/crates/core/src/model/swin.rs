//! Shifted-window attention encoder (SwinUNETR-v2 style).

use std::rc::Rc;

use triad_tensor::{Real, Var, PAD_ROW};

use super::config::EncoderConfig;
use super::layers::{self, build_res_block, channel_norm, res_block, res_block_params};
use super::params::{Bound, Builder};
use super::{Pyramid, Result};

/// Attention logit added between tokens of different regions in a shifted window.
pub const MASK_VALUE: f64 = -100.0;
pub const MLP_RATIO: usize = 4;

pub fn build(cfg: &EncoderConfig, b: &mut Builder) {
    let c = cfg.feature_size;
    let w = cfg.window;
    b.conv("patch_embed.proj", cfg.in_channels, c, cfg.patch, true);
    for (i, (&depth, &heads)) in cfg.depths.iter().zip(&cfg.heads).enumerate() {
        let dim = c << i;
        build_res_block(b, &format!("layers{}c", i + 1), dim, dim, 1);
        for j in 0..depth {
            let n = format!("layers{}.blocks.{j}", i + 1);
            b.layer_norm(&format!("{n}.norm1"), dim);
            b.add(
                &format!("{n}.attn.relative_position_bias_table"),
                &[(2 * w - 1).pow(3), heads],
                super::params::Init::TruncNormal(0.02),
            );
            b.linear(&format!("{n}.attn.qkv"), dim, 3 * dim, true);
            b.linear(&format!("{n}.attn.proj"), dim, dim, true);
            b.layer_norm(&format!("{n}.norm2"), dim);
            b.linear(&format!("{n}.mlp.fc1"), dim, MLP_RATIO * dim, true);
            b.linear(&format!("{n}.mlp.fc2"), MLP_RATIO * dim, dim, true);
        }
        let n = format!("layers{}.downsample", i + 1);
        b.layer_norm(&format!("{n}.norm"), 8 * dim);
        b.linear(&format!("{n}.reduction"), 8 * dim, 2 * dim, false);
    }
}

pub fn count(cfg: &EncoderConfig) -> usize {
    let c = cfg.feature_size;
    let table = (2 * cfg.window - 1).pow(3);
    let mut n = c * cfg.in_channels * cfg.patch.pow(3) + c;
    for i in 0..4 {
        let dim = c << i;
        let block = 2 * dim + table * cfg.heads[i] + 3 * dim * dim + 3 * dim + dim * dim + dim
            + 2 * dim
            + MLP_RATIO * dim * dim
            + MLP_RATIO * dim
            + MLP_RATIO * dim * dim
            + dim;
        n += res_block_params(dim, dim, 1) + cfg.depths[i] * block + 16 * dim + 16 * dim * dim;
    }
    n
}

/// Window geometry of one stage for one shift setting.
pub(crate) struct WindowPlan {
    #[cfg_attr(not(test), allow(dead_code))]
    pub win: [usize; 3],
    #[cfg_attr(not(test), allow(dead_code))]
    pub shift: [usize; 3],
    pub n_windows: usize,
    pub tokens: usize,
    /// Row of the token grid feeding each (batch, window, position) slot; padding -> PAD_ROW.
    pub partition: Rc<Vec<u32>>,
    /// Slot holding each token of the grid.
    pub reverse: Rc<Vec<u32>>,
    /// Shift-region label of each (window, position) slot, when shifted.
    pub regions: Option<Rc<Vec<u8>>>,
    /// Bias-table row for each (query, key) pair.
    pub rel_index: Rc<Vec<u32>>,
}

impl WindowPlan {
    pub fn new(batch: usize, grid: [usize; 3], window: usize, shifted: bool) -> Self {
        // axes no larger than the window get a single unshifted window
        let win: [usize; 3] = grid.map(|g| g.min(window));
        let shift: [usize; 3] =
            std::array::from_fn(|k| if shifted && grid[k] > window { window / 2 } else { 0 });
        let padded: [usize; 3] = std::array::from_fn(|k| grid[k].div_ceil(win[k]) * win[k]);
        let nw: [usize; 3] = std::array::from_fn(|k| padded[k] / win[k]);
        let n_windows = nw[0] * nw[1] * nw[2];
        let tokens = win[0] * win[1] * win[2];
        let n_grid = grid[0] * grid[1] * grid[2];

        let mut partition = Vec::with_capacity(batch * n_windows * tokens);
        let mut reverse = vec![0u32; batch * n_grid];
        let any_shift = shift.iter().any(|&s| s > 0);
        let mut regions = Vec::with_capacity(if any_shift { n_windows * tokens } else { 0 });
        for b in 0..batch {
            for wz in 0..nw[0] {
                for wy in 0..nw[1] {
                    for wx in 0..nw[2] {
                        for iz in 0..win[0] {
                            for iy in 0..win[1] {
                                for ix in 0..win[2] {
                                    let p = [wz * win[0] + iz, wy * win[1] + iy, wx * win[2] + ix];
                                    let q: [usize; 3] = std::array::from_fn(|k| (p[k] + shift[k]) % padded[k]);
                                    let slot = partition.len() as u32;
                                    if (0..3).all(|k| q[k] < grid[k]) {
                                        let flat = (q[0] * grid[1] + q[1]) * grid[2] + q[2];
                                        partition.push((b * n_grid + flat) as u32);
                                        reverse[b * n_grid + flat] = slot;
                                    } else {
                                        partition.push(PAD_ROW);
                                    }
                                    if any_shift && b == 0 {
                                        let label = |k: usize| -> u8 {
                                            if shift[k] == 0 || p[k] < padded[k] - win[k] {
                                                0
                                            } else if p[k] < padded[k] - shift[k] {
                                                1
                                            } else {
                                                2
                                            }
                                        };
                                        regions.push(label(0) * 9 + label(1) * 3 + label(2));
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }

        let span = 2 * window - 1;
        let mut rel_index = Vec::with_capacity(tokens * tokens);
        let coord = |t: usize| [t / (win[1] * win[2]), (t / win[2]) % win[1], t % win[2]];
        for i in 0..tokens {
            let ci = coord(i);
            for j in 0..tokens {
                let cj = coord(j);
                let r: [usize; 3] = std::array::from_fn(|k| ci[k] + window - 1 - cj[k]);
                rel_index.push(((r[0] * span + r[1]) * span + r[2]) as u32);
            }
        }

        WindowPlan {
            win,
            shift,
            n_windows,
            tokens,
            partition: Rc::new(partition),
            reverse: Rc::new(reverse),
            regions: any_shift.then(|| Rc::new(regions)),
            rel_index: Rc::new(rel_index),
        }
    }
}

/// Adds [`MASK_VALUE`] to logits `[B, nW, heads, T, T]` wherever query and key lie in
/// different shift regions of their window.
fn add_region_mask<'t, T: Real>(logits: &Var<'t, T>, regions: &Rc<Vec<u8>>, n_windows: usize) -> Var<'t, T> {
    let s = logits.shape().to_vec();
    let (heads, t) = (s[2], s[3]);
    let mut out = logits.value().clone();
    let m = T::lit(MASK_VALUE);
    for (chunk_i, chunk) in out.data_mut().chunks_mut(heads * t * t).enumerate() {
        let w = chunk_i % n_windows;
        let lab = &regions[w * t..(w + 1) * t];
        if lab.iter().all(|&l| l == lab[0]) {
            continue;
        }
        for hm in chunk.chunks_mut(t * t) {
            for (i, row) in hm.chunks_mut(t).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    if lab[i] != lab[j] {
                        *v = *v + m;
                    }
                }
            }
        }
    }
    logits.tape().op(out, &[logits], |g, _| vec![Some(g.clone())])
}

pub(super) fn swin_block<'t, T: Real>(
    p: &Bound<'t, T>,
    name: &str,
    x: &Var<'t, T>,
    heads: usize,
    plan: &WindowPlan,
) -> Result<Var<'t, T>> {
    let s = x.shape().to_vec();
    let (batch, n, c) = (s[0], s[1], s[2]);
    let eps = T::lit(layers::NORM_EPS);
    let g = |k: &str| p.get(&format!("{name}.{k}"));
    let h = x.layer_norm(Some(g("norm1.weight")?), Some(g("norm1.bias")?), eps);
    let (nw, t) = (plan.n_windows, plan.tokens);
    let nwb = batch * nw;
    let hd = c / heads;
    let windows = h.gather_rows(plan.partition.clone(), c, &[nwb, t, c]);
    let qkv = windows
        .linear(g("attn.qkv.weight")?, Some(g("attn.qkv.bias")?))
        .reshape(&[nwb, t, 3, heads, hd])
        .permute(&[2, 0, 3, 1, 4]);
    let part = |i: usize| qkv.narrow(0, i, 1).reshape(&[nwb * heads, t, hd]);
    let q = part(0).scale(T::lit(1.0 / (hd as f64).sqrt()));
    let (k, v) = (part(1), part(2));
    let bias = g("attn.relative_position_bias_table")?
        .gather_rows(plan.rel_index.clone(), heads, &[t, t, heads])
        .permute(&[2, 0, 1]);
    let mut logits = q.bmm(&k, false, true).reshape(&[batch, nw, heads, t, t]).add_bcast(&bias);
    if let Some(regions) = &plan.regions {
        logits = add_region_mask(&logits, regions, nw);
    }
    let attn = logits.softmax_last().reshape(&[nwb * heads, t, t]);
    let o = attn
        .bmm(&v, false, false)
        .reshape(&[nwb, heads, t, hd])
        .permute(&[0, 2, 1, 3])
        .reshape(&[nwb, t, c])
        .linear(g("attn.proj.weight")?, Some(g("attn.proj.bias")?));
    let back = o.gather_rows(plan.reverse.clone(), c, &[batch, n, c]);
    let x = x.add(&back);
    let m = x
        .layer_norm(Some(g("norm2.weight")?), Some(g("norm2.bias")?), eps)
        .linear(g("mlp.fc1.weight")?, Some(g("mlp.fc1.bias")?))
        .gelu()
        .linear(g("mlp.fc2.weight")?, Some(g("mlp.fc2.bias")?));
    Ok(x.add(&m))
}

/// Concatenates the 8 sub-voxels of every 2^3 cell (channel-last grid), normalizes and
/// projects 8C -> 2C.
fn patch_merge<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>, grid: [usize; 3]) -> Result<Var<'t, T>> {
    let s = x.shape().to_vec();
    let (batch, c) = (s[0], s[s.len() - 1]);
    let half = grid.map(|g| g / 2);
    let n_grid = grid[0] * grid[1] * grid[2];
    let mut idx = Vec::with_capacity(batch * n_grid);
    for b in 0..batch {
        for z in 0..half[0] {
            for y in 0..half[1] {
                for xx in 0..half[2] {
                    for i in 0..2 {
                        for j in 0..2 {
                            for k in 0..2 {
                                let q = ((2 * z + i) * grid[1] + 2 * y + j) * grid[2] + 2 * xx + k;
                                idx.push((b * n_grid + q) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    let out_n = half[0] * half[1] * half[2];
    let cat = x.gather_rows(Rc::new(idx), c, &[batch, out_n, 8 * c]);
    let g = |k: &str| p.get(&format!("{name}.{k}"));
    Ok(cat
        .layer_norm(Some(g("norm.weight")?), Some(g("norm.bias")?), T::lit(layers::NORM_EPS))
        .linear(g("reduction.weight")?, None))
}

pub fn forward<'t, T: Real>(cfg: &EncoderConfig, p: &Bound<'t, T>, x: &Var<'t, T>) -> Result<Pyramid<'t, T>> {
    let batch = x.shape()[0];
    let x0 = layers::conv(p, "encoder.patch_embed.proj", x, cfg.patch, 0)?;
    let mut levels = vec![channel_norm(&x0)];
    let mut cur = x0;
    for i in 0..4 {
        let dim = cfg.feature_size << i;
        let s = cur.shape().to_vec();
        let grid = [s[2], s[3], s[4]];
        let n = grid[0] * grid[1] * grid[2];
        let h = res_block(p, &format!("encoder.layers{}c", i + 1), &cur, 1)?;
        let mut tok = h.permute(&[0, 2, 3, 4, 1]).reshape(&[batch, n, dim]);
        let plans = [WindowPlan::new(batch, grid, cfg.window, false), WindowPlan::new(batch, grid, cfg.window, true)];
        for j in 0..cfg.depths[i] {
            tok = swin_block(p, &format!("encoder.layers{}.blocks.{j}", i + 1), &tok, cfg.heads[i], &plans[j % 2])?;
        }
        let merged = patch_merge(p, &format!("encoder.layers{}.downsample", i + 1), &tok, grid)?;
        let half = grid.map(|g| g / 2);
        cur = merged.reshape(&[batch, half[0], half[1], half[2], 2 * dim]).permute(&[0, 4, 1, 2, 3]);
        levels.push(channel_norm(&cur));
    }
    Ok(Pyramid { levels })
}
