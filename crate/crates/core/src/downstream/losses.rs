use serde::{Deserialize, Serialize};
use triad_tensor::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Mse,
    /// Local normalized cross-correlation.
    Ncc,
}

/// Mean over the three axes of the mean squared forward difference of `u` (`[B, 3, D, H, W]`).
pub fn smoothness_loss<'t, T: Real>(u: &Var<'t, T>) -> Var<'t, T> {
    let s = u.shape().to_vec();
    let mut acc: Option<Var<'t, T>> = None;
    let mut n = 0;
    for ax in 2..5 {
        if s[ax] < 2 {
            continue;
        }
        let d = u.narrow(ax, 1, s[ax] - 1).sub(&u.narrow(ax, 0, s[ax] - 1)).square().mean();
        acc = Some(match acc {
            None => d,
            Some(a) => a.add(&d),
        });
        n += 1;
    }
    match acc {
        Some(a) => a.scale(T::one() / T::from_usize(n).unwrap()),
        None => u.scale(T::zero()).sum(),
    }
}

/// Negative mean local NCC over cubic windows of side `win` between single-channel volumes.
pub fn ncc_loss<'t, T: Real>(a: &Var<'t, T>, b: &Var<'t, T>, win: usize) -> Var<'t, T> {
    let tape = a.tape();
    let k = tape.constant(Tensor::ones(&[1, 1, win, win, win]));
    let boxsum = |x: &Var<'t, T>| x.conv3d(&k, None, 1, win / 2);
    let n = T::from_usize(win * win * win).unwrap();
    let (sa, sb) = (boxsum(a), boxsum(b));
    let saa = boxsum(&a.square());
    let sbb = boxsum(&b.square());
    let sab = boxsum(&a.mul(b));
    let inv = T::one() / n;
    let cross = sab.sub(&sa.mul(&sb).scale(inv));
    let va = saa.sub(&sa.square().scale(inv));
    let vb = sbb.sub(&sb.square().scale(inv));
    let cc = cross.square().div(&va.mul(&vb).add_scalar(T::lit(1e-5)));
    cc.mean().neg()
}
