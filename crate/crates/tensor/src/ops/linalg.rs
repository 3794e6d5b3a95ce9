//! Dense layers and batched matrix products.

use crate::real::{gemm, MatRef, Real};
use crate::tape::Var;
use crate::tensor::Tensor;

impl<'t, T: Real> Var<'t, T> {
    /// `x W^T + b` over the last axis; `w` is `[out, in]`.
    pub fn linear(&self, w: &Var<'t, T>, b: Option<&Var<'t, T>>) -> Var<'t, T> {
        let xs = self.shape().to_vec();
        let fin = *xs.last().expect("linear on 0-d input");
        assert_eq!(w.shape().len(), 2, "linear weight must be 2-d");
        let (fout, fin_w) = (w.shape()[0], w.shape()[1]);
        assert_eq!(fin, fin_w, "linear: input features {fin} vs weight {fin_w}");
        let rows = self.value.numel() / fin.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = fout;
        let mut y = vec![T::zero(); rows * fout];
        if let Some(b) = b {
            assert_eq!(b.shape(), &[fout], "linear bias shape");
            for r in y.chunks_mut(fout) {
                r.copy_from_slice(b.value.data());
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(
            T::one(),
            MatRef::new(self.value.data(), rows, fin),
            MatRef::new(w.value.data(), fout, fin).t(),
            beta,
            &mut y,
            fout,
        );
        let out = Tensor::from_vec(&out_shape, y);
        let (xv, wv) = (self.value_rc(), w.value_rc());
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let has_b = b.is_some();
        self.tape.op(out, &parents, move |g, n| {
            let gd = g.data();
            let gx = n[0].then(|| {
                let mut gx = vec![T::zero(); rows * fin];
                gemm(T::one(), MatRef::new(gd, rows, fout), MatRef::new(wv.data(), fout, fin), T::zero(), &mut gx, fin);
                Tensor::from_vec(&xs, gx)
            });
            let gw = n[1].then(|| {
                let mut gw = vec![T::zero(); fout * fin];
                gemm(T::one(), MatRef::new(gd, rows, fout).t(), MatRef::new(xv.data(), rows, fin), T::zero(), &mut gw, fin);
                Tensor::from_vec(&[fout, fin], gw)
            });
            let mut res = vec![gx, gw];
            if has_b {
                res.push(n[2].then(|| {
                    let mut gb = vec![T::zero(); fout];
                    for r in gd.chunks(fout) {
                        for (a, &v) in gb.iter_mut().zip(r) {
                            *a = *a + v;
                        }
                    }
                    Tensor::from_vec(&[fout], gb)
                }));
            }
            res
        })
    }

    /// Batched product of 3-d tensors, `op(a)[b] op(c)[b]` with optional transposes of the
    /// last two axes.
    pub fn bmm(&self, other: &Var<'t, T>, trans_a: bool, trans_b: bool) -> Var<'t, T> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0], "bmm expects [B,.,.] operands, got {sa:?} {sb:?}");
        let batch = sa[0];
        let (m, k) = if trans_a { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, k2, "bmm inner dimension mismatch {sa:?} x {sb:?}");
        let (a_sz, b_sz) = (sa[1] * sa[2], sb[1] * sb[2]);
        let mut y = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value.data(), other.value.data());
        for i in 0..batch {
            let a = op_ref(&ad[i * a_sz..(i + 1) * a_sz], sa[1], sa[2], trans_a);
            let b = op_ref(&bd[i * b_sz..(i + 1) * b_sz], sb[1], sb[2], trans_b);
            gemm(T::one(), a, b, T::zero(), &mut y[i * m * n..(i + 1) * m * n], n);
        }
        let out = Tensor::from_vec(&[batch, m, n], y);
        let (av, bv) = (self.value_rc(), other.value_rc());
        self.tape.op(out, &[self, other], move |g, need| {
            let gd = g.data();
            let ga = need[0].then(|| {
                let mut ga = vec![T::zero(); batch * a_sz];
                for i in 0..batch {
                    let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let b = op_ref(&bv.data()[i * b_sz..(i + 1) * b_sz], sb[1], sb[2], trans_b);
                    let dst = &mut ga[i * a_sz..(i + 1) * a_sz];
                    if trans_a {
                        gemm(T::one(), b, gi.t(), T::zero(), dst, m);
                    } else {
                        gemm(T::one(), gi, b.t(), T::zero(), dst, k);
                    }
                }
                Tensor::from_vec(&sa, ga)
            });
            let gb = need[1].then(|| {
                let mut gb = vec![T::zero(); batch * b_sz];
                for i in 0..batch {
                    let gi = MatRef::new(&gd[i * m * n..(i + 1) * m * n], m, n);
                    let a = op_ref(&av.data()[i * a_sz..(i + 1) * a_sz], sa[1], sa[2], trans_a);
                    let dst = &mut gb[i * b_sz..(i + 1) * b_sz];
                    if trans_b {
                        gemm(T::one(), gi.t(), a, T::zero(), dst, k);
                    } else {
                        gemm(T::one(), a.t(), gi, T::zero(), dst, n);
                    }
                }
                Tensor::from_vec(&sb, gb)
            });
            vec![ga, gb]
        })
    }
}

fn op_ref<T>(data: &[T], rows: usize, cols: usize, trans: bool) -> MatRef<'_, T> {
    let m = MatRef::new(data, rows, cols);
    if trans {
        m.t()
    } else {
        m
    }
}
