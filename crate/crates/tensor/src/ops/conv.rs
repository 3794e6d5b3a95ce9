//! 3D convolution (im2col + GEMM) and non-overlapping transposed convolution.

use crate::real::{gemm, MatRef, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Upper bound on im2col buffer elements; larger outputs are processed in depth chunks.
const COL_BUDGET: usize = 1 << 18;

#[derive(Clone, Copy, Debug)]
struct Geom {
    ci: usize,
    dims: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    stride: usize,
    pad: usize,
}

impl Geom {
    fn krows(&self) -> usize {
        self.ci * self.k[0] * self.k[1] * self.k[2]
    }

    fn out_plane(&self) -> usize {
        self.out[1] * self.out[2]
    }

    fn is_pointwise(&self) -> bool {
        self.k == [1, 1, 1] && self.stride == 1 && self.pad == 0
    }

    fn chunk_depth(&self) -> usize {
        let per = self.krows() * self.out_plane();
        (COL_BUDGET / per.max(1)).clamp(1, self.out[0].max(1))
    }
}

/// Fills `col` (`krows x (nd * Ho * Wo)`) for output depths `od0..od0 + nd`.
fn im2col<T: Real>(x: &[T], g: &Geom, od0: usize, nd: usize, col: &mut [T]) {
    let [d, h, w] = g.dims;
    let [kd, kh, kw] = g.k;
    let [_, oh_n, ow_n] = g.out;
    let ncol = nd * oh_n * ow_n;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut r = 0;
    for c in 0..g.ci {
        let xc = &x[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &mut col[r * ncol..(r + 1) * ncol];
                    let mut o = 0;
                    for od in od0..od0 + nd {
                        let id = od as isize * s - p + a as isize;
                        for oh in 0..oh_n {
                            let ih = oh as isize * s - p + b as isize;
                            let dst = &mut row[o..o + ow_n];
                            o += ow_n;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                dst.fill(T::zero());
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for (ow, v) in dst.iter_mut().enumerate() {
                                let iw = ow as isize * s - p + e as isize;
                                *v = if iw < 0 || iw >= w as isize { T::zero() } else { xc[base + iw as usize] };
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `col` back into `gx`.
fn col2im<T: Real>(col: &[T], g: &Geom, od0: usize, nd: usize, gx: &mut [T]) {
    let [d, h, w] = g.dims;
    let [kd, kh, kw] = g.k;
    let [_, oh_n, ow_n] = g.out;
    let ncol = nd * oh_n * ow_n;
    let (s, p) = (g.stride as isize, g.pad as isize);
    let mut r = 0;
    for c in 0..g.ci {
        let xc = &mut gx[c * d * h * w..(c + 1) * d * h * w];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let row = &col[r * ncol..(r + 1) * ncol];
                    let mut o = 0;
                    for od in od0..od0 + nd {
                        let id = od as isize * s - p + a as isize;
                        for oh in 0..oh_n {
                            let ih = oh as isize * s - p + b as isize;
                            let src = &row[o..o + ow_n];
                            o += ow_n;
                            if id < 0 || id >= d as isize || ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let base = (id as usize * h + ih as usize) * w;
                            for (ow, &v) in src.iter().enumerate() {
                                let iw = ow as isize * s - p + e as isize;
                                if iw >= 0 && iw < w as isize {
                                    xc[base + iw as usize] = xc[base + iw as usize] + v;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn strided<T>(data: &[T], rows: usize, cols: usize, ld: usize) -> MatRef<'_, T> {
    MatRef { data, rows, cols, ld, trans: false }
}

impl<'t, T: Real> Var<'t, T> {
    /// Cross-correlation of `[B, Ci, D, H, W]` with weights `[Co, Ci, kd, kh, kw]`.
    pub fn conv3d(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>, stride: usize, pad: usize) -> Var<'t, T> {
        let xs = self.shape().to_vec();
        let ws = w.shape().to_vec();
        assert!(xs.len() == 5 && ws.len() == 5, "conv3d expects 5-d input and weight, got {xs:?} {ws:?}");
        assert_eq!(xs[1], ws[1], "conv3d channel mismatch: input {xs:?}, weight {ws:?}");
        assert!(stride >= 1);
        let (batch, co) = (xs[0], ws[0]);
        let mut out_dims = [0; 3];
        for i in 0..3 {
            let span = xs[2 + i] + 2 * pad;
            assert!(span >= ws[2 + i], "conv3d kernel larger than padded input on axis {i}");
            out_dims[i] = (span - ws[2 + i]) / stride + 1;
        }
        let g = Geom {
            ci: xs[1],
            dims: [xs[2], xs[3], xs[4]],
            k: [ws[2], ws[3], ws[4]],
            out: out_dims,
            stride,
            pad,
        };
        let s_out = out_dims.iter().product::<usize>();
        let s_in = g.dims.iter().product::<usize>();
        let kr = g.krows();
        let mut y = vec![T::zero(); batch * co * s_out];
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[co], "conv3d bias shape");
            for yb in y.chunks_mut(co * s_out) {
                for (row, &bv) in yb.chunks_mut(s_out).zip(b.value.data()) {
                    row.fill(bv);
                }
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let wm = MatRef::new(w.value.data(), co, kr);
        let xd = self.value.data();
        let cd = g.chunk_depth();
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * cd * g.out_plane()] };
        for b in 0..batch {
            let xb = &xd[b * g.ci * s_in..(b + 1) * g.ci * s_in];
            let yb = &mut y[b * co * s_out..(b + 1) * co * s_out];
            if g.is_pointwise() {
                gemm(T::one(), wm, MatRef::new(xb, kr, s_in), beta, yb, s_out);
                continue;
            }
            let mut od0 = 0;
            while od0 < out_dims[0] {
                let nd = cd.min(out_dims[0] - od0);
                let ncol = nd * g.out_plane();
                im2col(xb, &g, od0, nd, &mut col[..kr * ncol]);
                gemm(T::one(), wm, MatRef::new(&col[..kr * ncol], kr, ncol), beta, &mut yb[od0 * g.out_plane()..], s_out);
                od0 += nd;
            }
        }
        let out = Tensor::from_vec(&[batch, co, out_dims[0], out_dims[1], out_dims[2]], y);
        let (xv, wv) = (self.value_rc(), w.value_rc());
        let mut parents = vec![self, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_b = bias.is_some();
        self.tape.op(out, &parents, move |gout, need| {
            let gd = gout.data();
            let xd = xv.data();
            let mut gx = need[0].then(|| vec![T::zero(); xd.len()]);
            let mut gw = need[1].then(|| vec![T::zero(); co * kr]);
            let wm = MatRef::new(wv.data(), co, kr);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); kr * cd * g.out_plane()] };
            for b in 0..batch {
                let xb = &xd[b * g.ci * s_in..(b + 1) * g.ci * s_in];
                let gb = &gd[b * co * s_out..(b + 1) * co * s_out];
                if g.is_pointwise() {
                    if let Some(gw) = gw.as_mut() {
                        gemm(T::one(), MatRef::new(gb, co, s_out), MatRef::new(xb, kr, s_in).t(), T::one(), gw, kr);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[b * g.ci * s_in..(b + 1) * g.ci * s_in];
                        gemm(T::one(), wm.t(), MatRef::new(gb, co, s_out), T::zero(), dst, s_in);
                    }
                    continue;
                }
                let mut od0 = 0;
                while od0 < out_dims[0] {
                    let nd = cd.min(out_dims[0] - od0);
                    let ncol = nd * g.out_plane();
                    let gchunk = strided(&gb[od0 * g.out_plane()..], co, ncol, s_out);
                    if let Some(gw) = gw.as_mut() {
                        im2col(xb, &g, od0, nd, &mut col[..kr * ncol]);
                        gemm(T::one(), gchunk, MatRef::new(&col[..kr * ncol], kr, ncol).t(), T::one(), gw, kr);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(T::one(), wm.t(), gchunk, T::zero(), &mut col[..kr * ncol], ncol);
                        col2im(&col[..kr * ncol], &g, od0, nd, &mut gx[b * g.ci * s_in..(b + 1) * g.ci * s_in]);
                    }
                    od0 += nd;
                }
            }
            let mut res = vec![
                gx.map(|v| Tensor::from_vec(&xs, v)),
                gw.map(|v| Tensor::from_vec(&ws, v)),
            ];
            if has_b {
                res.push(need[2].then(|| {
                    let mut gbias = vec![T::zero(); co];
                    for gbatch in gd.chunks(co * s_out) {
                        for (acc, row) in gbias.iter_mut().zip(gbatch.chunks(s_out)) {
                            *acc = *acc + row.iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[co], gbias)
                }));
            }
            res
        })
    }

    /// Transposed convolution with kernel size equal to stride (`[Ci, Co, k, k, k]` weights),
    /// upsampling each spatial axis by `k`.
    pub fn conv_transpose3d(&self, w: &Var<'t, T>, bias: Option<&Var<'t, T>>) -> Var<'t, T> {
        let xs = self.shape().to_vec();
        let ws = w.shape().to_vec();
        assert!(xs.len() == 5 && ws.len() == 5, "conv_transpose3d expects 5-d input and weight");
        assert_eq!(xs[1], ws[0], "conv_transpose3d channel mismatch: input {xs:?}, weight {ws:?}");
        let k = ws[2];
        assert!(ws[3] == k && ws[4] == k, "conv_transpose3d needs a cubic kernel");
        let (batch, ci, co) = (xs[0], xs[1], ws[1]);
        let [d, h, wd] = [xs[2], xs[3], xs[4]];
        let s_in = d * h * wd;
        let k3 = k * k * k;
        let (od, oh, ow) = (d * k, h * k, wd * k);
        let s_out = od * oh * ow;
        let rows = co * k3;
        // scatter map: for row (c, a, b, e) and input voxel v -> output offset within a sample
        let scatter = move |f: &mut dyn FnMut(usize, usize)| {
            for c in 0..co {
                for a in 0..k {
                    for b in 0..k {
                        for e in 0..k {
                            let r = ((c * k + a) * k + b) * k + e;
                            for z in 0..d {
                                for y in 0..h {
                                    let src = (r * d + z) * h * wd + y * wd;
                                    let dst = c * s_out + ((z * k + a) * oh + y * k + b) * ow + e;
                                    for x in 0..wd {
                                        f(src + x, dst + x * k);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        };
        let wm = MatRef::new(w.value.data(), ci, rows);
        let xd = self.value.data();
        let mut y = vec![T::zero(); batch * co * s_out];
        let mut tmp = vec![T::zero(); rows * s_in];
        for bi in 0..batch {
            gemm(T::one(), wm.t(), MatRef::new(&xd[bi * ci * s_in..(bi + 1) * ci * s_in], ci, s_in), T::zero(), &mut tmp, s_in);
            let yb = &mut y[bi * co * s_out..(bi + 1) * co * s_out];
            scatter(&mut |s, t| yb[t] = tmp[s]);
            if let Some(bias) = bias {
                for (row, &bv) in yb.chunks_mut(s_out).zip(bias.value.data()) {
                    for v in row {
                        *v = *v + bv;
                    }
                }
            }
        }
        if let Some(b) = bias {
            assert_eq!(b.shape(), &[co], "conv_transpose3d bias shape");
        }
        let out = Tensor::from_vec(&[batch, co, od, oh, ow], y);
        let (xv, wv) = (self.value_rc(), w.value_rc());
        let mut parents = vec![self, w];
        if let Some(b) = bias {
            parents.push(b);
        }
        let has_b = bias.is_some();
        self.tape.op(out, &parents, move |gout, need| {
            let gd = gout.data();
            let xd = xv.data();
            let wm = MatRef::new(wv.data(), ci, rows);
            let mut gx = need[0].then(|| vec![T::zero(); xd.len()]);
            let mut gw = need[1].then(|| vec![T::zero(); ci * rows]);
            let mut tmp = vec![T::zero(); rows * s_in];
            for bi in 0..batch {
                let gb = &gd[bi * co * s_out..(bi + 1) * co * s_out];
                scatter(&mut |s, t| tmp[s] = gb[t]);
                let xb = &xd[bi * ci * s_in..(bi + 1) * ci * s_in];
                if let Some(gx) = gx.as_mut() {
                    gemm(T::one(), wm, MatRef::new(&tmp, rows, s_in), T::zero(), &mut gx[bi * ci * s_in..(bi + 1) * ci * s_in], s_in);
                }
                if let Some(gw) = gw.as_mut() {
                    gemm(T::one(), MatRef::new(xb, ci, s_in), MatRef::new(&tmp, rows, s_in).t(), T::one(), gw, rows);
                }
            }
            let mut res = vec![gx.map(|v| Tensor::from_vec(&xs, v)), gw.map(|v| Tensor::from_vec(&ws, v))];
            if has_b {
                res.push(need[2].then(|| {
                    let mut gbias = vec![T::zero(); co];
                    for gbatch in gd.chunks(co * s_out) {
                        for (acc, row) in gbias.iter_mut().zip(gbatch.chunks(s_out)) {
                            *acc = *acc + row.iter().copied().sum::<T>();
                        }
                    }
                    Tensor::from_vec(&[co], gbias)
                }));
            }
            res
        })
    }
}
