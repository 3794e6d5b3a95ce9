//! Layout ops: reshape, permutation, slicing, concatenation and row gathers.

use std::rc::Rc;

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::{strides_of, Tensor};

/// Row index marking an all-zero output row in [`Var::gather_rows`].
pub const PAD_ROW: u32 = u32::MAX;

/// Copies `src` (shape `shape`) into a new buffer with axes reordered by `axes`.
pub fn permute_data<T: Real>(src: &[T], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    assert_eq!(axes.len(), rank, "permutation rank mismatch");
    let mut seen = vec![false; rank];
    for &a in axes {
        assert!(a < rank && !seen[a], "invalid permutation {axes:?}");
        seen[a] = true;
    }
    let in_str = strides_of(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_str: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let n = src.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(src[0]);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_s = src_str[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        if inner_s == 1 {
            out.extend_from_slice(&src[base..base + inner]);
        } else {
            let mut s = base;
            for _ in 0..inner {
                out.push(src[s]);
                s += inner_s;
            }
        }
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_str[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_str[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

impl<'t, T: Real> Var<'t, T> {
    pub fn reshape(&self, shape: &[usize]) -> Var<'t, T> {
        let old = self.shape().to_vec();
        let out = (*self.value).clone().reshape(shape);
        self.tape.op(out, &[self], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    pub fn permute(&self, axes: &[usize]) -> Var<'t, T> {
        let (shape, data) = permute_data(self.value.data(), self.shape(), axes);
        let out = Tensor::from_vec(&shape, data);
        let inv = inverse_perm(axes);
        self.tape.op(out, &[self], move |g, _| {
            let (s, d) = permute_data(g.data(), g.shape(), &inv);
            vec![Some(Tensor::from_vec(&s, d))]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        assert!(axis < shape.len() && start + len <= shape[axis], "narrow out of range");
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let src = self.value.data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * dim + start) * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let out = Tensor::from_vec(&out_shape, data);
        self.tape.op(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = g.data();
            let xd = gx.data_mut();
            for o in 0..outer {
                let b = (o * dim + start) * inner;
                xd[b..b + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(parts: &[&Var<'t, T>], axis: usize) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let first = parts[0].shape().to_vec();
        let mut total = 0;
        for p in parts {
            let s = p.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (i, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(i == axis || a == b, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.value.data()[o * w..(o + 1) * w]);
            }
        }
        let out = Tensor::from_vec(&out_shape, data);
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        tape.op(out, parts, move |g, n| {
            let gd = g.data();
            let row = total * inner;
            let mut off = 0;
            let mut res = Vec::with_capacity(shapes.len());
            for ((s, &w), &need) in shapes.iter().zip(&widths).zip(n) {
                if need {
                    let mut d = Vec::with_capacity(outer * w);
                    for o in 0..outer {
                        d.extend_from_slice(&gd[o * row + off..o * row + off + w]);
                    }
                    res.push(Some(Tensor::from_vec(s, d)));
                } else {
                    res.push(None);
                }
                off += w;
            }
            res
        })
    }

    /// Treats `self` as rows of `row_len` elements and gathers rows by index; [`PAD_ROW`]
    /// yields a zero row. Output shape is `out_shape` (its product must be `idx.len() * row_len`).
    pub fn gather_rows(&self, idx: Rc<Vec<u32>>, row_len: usize, out_shape: &[usize]) -> Var<'t, T> {
        let src = self.value.data();
        assert!(row_len > 0 && src.len() % row_len == 0, "gather_rows: bad row length");
        let n_rows = src.len() / row_len;
        assert_eq!(out_shape.iter().product::<usize>(), idx.len() * row_len, "gather_rows: bad output shape");
        let mut data = Vec::with_capacity(idx.len() * row_len);
        for &r in idx.iter() {
            if r == PAD_ROW {
                data.extend(std::iter::repeat_n(T::zero(), row_len));
            } else {
                let r = r as usize;
                assert!(r < n_rows, "gather_rows: row {r} out of {n_rows}");
                data.extend_from_slice(&src[r * row_len..(r + 1) * row_len]);
            }
        }
        let out = Tensor::from_vec(out_shape, data);
        let in_shape = self.shape().to_vec();
        self.tape.op(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&in_shape);
            let gd = g.data();
            let xd = gx.data_mut();
            for (k, &r) in idx.iter().enumerate() {
                if r != PAD_ROW {
                    let r = r as usize;
                    let dst = &mut xd[r * row_len..(r + 1) * row_len];
                    for (d, &s) in dst.iter_mut().zip(&gd[k * row_len..(k + 1) * row_len]) {
                        *d = *d + s;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}
