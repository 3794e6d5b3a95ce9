use serde::{Deserialize, Serialize};
use triad_tensor::{Real, Tape, Tensor};

use super::{ModelError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WarpMode {
    Trilinear,
    /// Nearest neighbour, for label volumes.
    Nearest,
}

fn check_shapes(moving: &[usize], field: &[usize]) -> Result<()> {
    if moving.len() != 5 || field.len() != 5 || field[0] != moving[0] || field[1] != 3 || field[2..] != moving[2..] {
        return Err(ModelError::Shape(format!(
            "warp needs moving [B, C, D, H, W] and field [B, 3, D, H, W], got {moving:?} and {field:?}"
        )));
    }
    Ok(())
}

/// Samples `moving` at `p + u(p)`; out-of-range positions clamp to the edge.
pub fn warp<T: Real>(moving: &Tensor<T>, field: &Tensor<T>, mode: WarpMode) -> Result<Tensor<T>> {
    check_shapes(moving.shape(), field.shape())?;
    if !field.all_finite() {
        return Err(ModelError::Shape("displacement field holds non-finite values".into()));
    }
    match mode {
        WarpMode::Trilinear => {
            let tape = Tape::inference();
            let m = tape.constant(moving.clone());
            let u = tape.constant(field.clone());
            Ok(m.warp_trilinear(&u).value().clone())
        }
        WarpMode::Nearest => Ok(warp_nearest(moving, field)),
    }
}

fn warp_nearest<T: Real>(moving: &Tensor<T>, field: &Tensor<T>) -> Tensor<T> {
    let s = moving.shape();
    let (b, c, dims) = (s[0], s[1], [s[2], s[3], s[4]]);
    let n = dims[0] * dims[1] * dims[2];
    let (m, u) = (moving.data(), field.data());
    let mut out = vec![T::zero(); m.len()];
    for bi in 0..b {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let v = (z * dims[1] + y) * dims[2] + x;
                    let pos = [z, y, x];
                    let src: [usize; 3] = std::array::from_fn(|k| {
                        let t = pos[k] as f64 + u[(bi * 3 + k) * n + v].to_f64().unwrap();
                        t.round().clamp(0.0, (dims[k] - 1) as f64) as usize
                    });
                    let sv = (src[0] * dims[1] + src[1]) * dims[2] + src[2];
                    for ci in 0..c {
                        out[(bi * c + ci) * n + v] = m[(bi * c + ci) * n + sv];
                    }
                }
            }
        }
    }
    Tensor::from_vec(s, out)
}
