//! Differentiable dense resampling under a displacement field.

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Corner indices and weights for linear interpolation of coordinate `x` on an axis of
/// length `n`, with clamp-to-edge. Returns (i0, i1, frac, d frac/d x).
#[inline]
fn axis_lerp<T: Real>(x: T, n: usize) -> (usize, usize, T, T) {
    if n == 1 {
        return (0, 0, T::zero(), T::zero());
    }
    let hi = T::from_usize(n - 1).unwrap();
    if x <= T::zero() {
        return (0, 1, T::zero(), T::zero());
    }
    if x >= hi {
        return (n - 2, n - 1, T::one(), T::zero());
    }
    let f = x.floor();
    let i0 = f.to_usize().unwrap().min(n - 2);
    let frac = x - T::from_usize(i0).unwrap();
    (i0, i0 + 1, frac, T::one())
}

impl<'t, T: Real> Var<'t, T> {
    /// Samples `self` (`[B, C, D, H, W]`) at `p + u(p)` with trilinear interpolation and
    /// clamp-to-edge borders, where `field` is `[B, 3, D, H, W]` in voxel units.
    pub fn warp_trilinear(&self, field: &Var<'t, T>) -> Var<'t, T> {
        let ms = self.shape().to_vec();
        let fs = field.shape().to_vec();
        assert!(ms.len() == 5 && fs.len() == 5, "warp expects 5-d moving image and field");
        assert!(fs[0] == ms[0] && fs[1] == 3 && fs[2..] == ms[2..], "warp shape mismatch {ms:?} vs {fs:?}");
        let (b, c) = (ms[0], ms[1]);
        let [d, h, w] = [ms[2], ms[3], ms[4]];
        let s = d * h * w;
        let m = self.value.data();
        let u = field.value.data();
        let mut out = vec![T::zero(); b * c * s];
        for bi in 0..b {
            let ub = &u[bi * 3 * s..(bi + 1) * 3 * s];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..w {
                        let v = (z * h + y) * w + x;
                        let (z0, z1, fz, _) = axis_lerp(T::from_usize(z).unwrap() + ub[v], d);
                        let (y0, y1, fy, _) = axis_lerp(T::from_usize(y).unwrap() + ub[s + v], h);
                        let (x0, x1, fx, _) = axis_lerp(T::from_usize(x).unwrap() + ub[2 * s + v], w);
                        for ch in 0..c {
                            let img = &m[(bi * c + ch) * s..(bi * c + ch + 1) * s];
                            let at = |a: usize, bb: usize, e: usize| img[(a * h + bb) * w + e];
                            let c00 = at(z0, y0, x0) * (T::one() - fx) + at(z0, y0, x1) * fx;
                            let c01 = at(z0, y1, x0) * (T::one() - fx) + at(z0, y1, x1) * fx;
                            let c10 = at(z1, y0, x0) * (T::one() - fx) + at(z1, y0, x1) * fx;
                            let c11 = at(z1, y1, x0) * (T::one() - fx) + at(z1, y1, x1) * fx;
                            let c0 = c00 * (T::one() - fy) + c01 * fy;
                            let c1 = c10 * (T::one() - fy) + c11 * fy;
                            out[(bi * c + ch) * s + v] = c0 * (T::one() - fz) + c1 * fz;
                        }
                    }
                }
            }
        }
        let out = Tensor::from_vec(&ms, out);
        let (mv, uv) = (self.value_rc(), field.value_rc());
        self.tape.op(out, &[self, field], move |g, need| {
            let gd = g.data();
            let m = mv.data();
            let u = uv.data();
            let mut gm = need[0].then(|| vec![T::zero(); m.len()]);
            let mut gu = need[1].then(|| vec![T::zero(); u.len()]);
            let one = T::one();
            for bi in 0..b {
                let ub = &u[bi * 3 * s..(bi + 1) * 3 * s];
                for z in 0..d {
                    for y in 0..h {
                        for x in 0..w {
                            let v = (z * h + y) * w + x;
                            let (z0, z1, fz, dz) = axis_lerp(T::from_usize(z).unwrap() + ub[v], d);
                            let (y0, y1, fy, dy) = axis_lerp(T::from_usize(y).unwrap() + ub[s + v], h);
                            let (x0, x1, fx, dx) = axis_lerp(T::from_usize(x).unwrap() + ub[2 * s + v], w);
                            let corners = [
                                (z0, y0, x0, (one - fz) * (one - fy) * (one - fx)),
                                (z0, y0, x1, (one - fz) * (one - fy) * fx),
                                (z0, y1, x0, (one - fz) * fy * (one - fx)),
                                (z0, y1, x1, (one - fz) * fy * fx),
                                (z1, y0, x0, fz * (one - fy) * (one - fx)),
                                (z1, y0, x1, fz * (one - fy) * fx),
                                (z1, y1, x0, fz * fy * (one - fx)),
                                (z1, y1, x1, fz * fy * fx),
                            ];
                            for ch in 0..c {
                                let off = (bi * c + ch) * s;
                                let gv = gd[off + v];
                                if let Some(gm) = gm.as_mut() {
                                    for &(a, bb, e, wt) in &corners {
                                        let i = off + (a * h + bb) * w + e;
                                        gm[i] = gm[i] + gv * wt;
                                    }
                                }
                                if let Some(gu) = gu.as_mut() {
                                    let at = |a: usize, bb: usize, e: usize| m[off + (a * h + bb) * w + e];
                                    // partial derivatives of the interpolant w.r.t. each coordinate
                                    let c00 = at(z0, y0, x0) * (one - fx) + at(z0, y0, x1) * fx;
                                    let c01 = at(z0, y1, x0) * (one - fx) + at(z0, y1, x1) * fx;
                                    let c10 = at(z1, y0, x0) * (one - fx) + at(z1, y0, x1) * fx;
                                    let c11 = at(z1, y1, x0) * (one - fx) + at(z1, y1, x1) * fx;
                                    let c0 = c00 * (one - fy) + c01 * fy;
                                    let c1 = c10 * (one - fy) + c11 * fy;
                                    let d_z = (c1 - c0) * dz;
                                    let d_y = ((c01 - c00) * (one - fz) + (c11 - c10) * fz) * dy;
                                    let e00 = at(z0, y0, x1) - at(z0, y0, x0);
                                    let e01 = at(z0, y1, x1) - at(z0, y1, x0);
                                    let e10 = at(z1, y0, x1) - at(z1, y0, x0);
                                    let e11 = at(z1, y1, x1) - at(z1, y1, x0);
                                    let d_x = ((e00 * (one - fy) + e01 * fy) * (one - fz)
                                        + (e10 * (one - fy) + e11 * fy) * fz)
                                        * dx;
                                    let ub_off = bi * 3 * s;
                                    gu[ub_off + v] = gu[ub_off + v] + gv * d_z;
                                    gu[ub_off + s + v] = gu[ub_off + s + v] + gv * d_y;
                                    gu[ub_off + 2 * s + v] = gu[ub_off + 2 * s + v] + gv * d_x;
                                }
                            }
                        }
                    }
                }
            }
            vec![gm.map(|v| Tensor::from_vec(&ms, v)), gu.map(|v| Tensor::from_vec(&fs, v))]
        })
    }
}
