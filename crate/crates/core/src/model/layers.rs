//! Convolutional building blocks shared by the encoders and decoders.

use triad_tensor::{Real, Var};

use super::params::{Bound, Builder};
use super::Result;

pub const NORM_EPS: f64 = 1e-5;

pub fn conv<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>, stride: usize, pad: usize) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias")).ok();
    Ok(x.conv3d(w, b, stride, pad))
}

pub fn conv_transpose<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias")).ok();
    Ok(x.conv_transpose3d(w, b))
}

/// Identity on single-voxel maps, where normalizing would zero every channel.
pub fn instance_norm<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    if x.shape()[2..].iter().product::<usize>() == 1 {
        return x.clone();
    }
    x.instance_norm(None, None, T::lit(NORM_EPS))
}

pub fn act<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    x.gelu()
}

/// Two 3^3 conv + instance-norm stages with a residual path (1^3 conv when the shape
/// changes), ending in GELU.
pub fn build_res_block(b: &mut Builder, name: &str, ci: usize, co: usize, stride: usize) {
    b.conv(&format!("{name}.conv1"), ci, co, 3, false);
    b.conv(&format!("{name}.conv2"), co, co, 3, false);
    if ci != co || stride != 1 {
        b.conv(&format!("{name}.conv3"), ci, co, 1, false);
    }
}

pub fn res_block_params(ci: usize, co: usize, stride: usize) -> usize {
    27 * ci * co + 27 * co * co + if ci != co || stride != 1 { ci * co } else { 0 }
}

pub fn res_block<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>, stride: usize) -> Result<Var<'t, T>> {
    let h = act(&instance_norm(&conv(p, &format!("{name}.conv1"), x, stride, 1)?));
    let h = instance_norm(&conv(p, &format!("{name}.conv2"), &h, 1, 1)?);
    let skip_name = format!("{name}.conv3");
    let skip = if p.get(&format!("{skip_name}.weight")).is_ok() {
        instance_norm(&conv(p, &skip_name, x, stride, 0)?)
    } else {
        x.clone()
    };
    Ok(act(&h.add(&skip)))
}

/// x2 transposed-conv upsampling, concatenation with the skip, then a residual block.
pub fn build_up_block(b: &mut Builder, name: &str, ci: usize, co: usize) {
    b.conv_transpose(&format!("{name}.transp_conv"), ci, co, 2, false);
    build_res_block(b, &format!("{name}.conv_block"), 2 * co, co, 1);
}

pub fn up_block_params(ci: usize, co: usize) -> usize {
    8 * ci * co + res_block_params(2 * co, co, 1)
}

pub fn up_block<'t, T: Real>(p: &Bound<'t, T>, name: &str, x: &Var<'t, T>, skip: &Var<'t, T>) -> Result<Var<'t, T>> {
    let up = conv_transpose(p, &format!("{name}.transp_conv"), x)?;
    let cat = Var::concat(&[&up, skip], 1);
    res_block(p, &format!("{name}.conv_block"), &cat, 1)
}

/// Parameter-free layer norm over the channel axis of `[B, C, D, H, W]`.
pub fn channel_norm<'t, T: Real>(x: &Var<'t, T>) -> Var<'t, T> {
    x.permute(&[0, 2, 3, 4, 1]).layer_norm(None, None, T::lit(NORM_EPS)).permute(&[0, 4, 1, 2, 3])
}
