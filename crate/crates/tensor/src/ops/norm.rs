//! Normalization layers and softmax.

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Standardizes each contiguous row of `row_len` values; returns (x_hat, 1/std per row).
fn standardize_rows<T: Real>(x: &[T], row_len: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize(row_len).unwrap();
    let mut xhat = Vec::with_capacity(x.len());
    let mut invs = Vec::with_capacity(x.len() / row_len.max(1));
    for row in x.chunks(row_len) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * inv));
        invs.push(inv);
    }
    (xhat, invs)
}

/// Backward of row standardization given d(loss)/d(x_hat).
fn standardize_rows_backward<T: Real>(dxhat: &[T], xhat: &[T], invs: &[T], row_len: usize) -> Vec<T> {
    let n = T::from_usize(row_len).unwrap();
    let mut dx = Vec::with_capacity(dxhat.len());
    for ((dr, xr), &inv) in dxhat.chunks(row_len).zip(xhat.chunks(row_len)).zip(invs) {
        let m1 = dr.iter().copied().sum::<T>() / n;
        let m2 = dr.iter().zip(xr).map(|(&d, &x)| d * x).sum::<T>() / n;
        dx.extend(dr.iter().zip(xr).map(|(&d, &x)| inv * (d - m1 - x * m2)));
    }
    dx
}

impl<'t, T: Real> Var<'t, T> {
    /// Layer normalization over the last axis with optional per-feature gain and bias.
    pub fn layer_norm(&self, gamma: Option<&Var<'t, T>>, beta: Option<&Var<'t, T>>, eps: T) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let c = *shape.last().expect("layer_norm on 0-d tensor");
        let (xhat, invs) = standardize_rows(self.value.data(), c, eps);
        let mut y = xhat.clone();
        if let Some(gm) = gamma {
            assert_eq!(gm.shape(), &[c], "layer_norm gain shape");
            for row in y.chunks_mut(c) {
                for (v, &s) in row.iter_mut().zip(gm.value.data()) {
                    *v = *v * s;
                }
            }
        }
        if let Some(bt) = beta {
            assert_eq!(bt.shape(), &[c], "layer_norm bias shape");
            for row in y.chunks_mut(c) {
                for (v, &s) in row.iter_mut().zip(bt.value.data()) {
                    *v = *v + s;
                }
            }
        }
        let out = Tensor::from_vec(&shape, y);
        let gv = gamma.map(|g| g.value_rc());
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_g, has_b) = (gamma.is_some(), beta.is_some());
        self.tape.op(out, &parents, move |g, need| {
            let gd = g.data();
            let mut res = Vec::with_capacity(3);
            let dx = need[0].then(|| {
                let dxhat: Vec<T> = match &gv {
                    Some(gm) => gd
                        .chunks(c)
                        .flat_map(|r| r.iter().zip(gm.data()).map(|(&a, &b)| a * b))
                        .collect(),
                    None => gd.to_vec(),
                };
                Tensor::from_vec(&shape, standardize_rows_backward(&dxhat, &xhat, &invs, c))
            });
            res.push(dx);
            let mut k = 1;
            if has_g {
                res.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (gr, xr) in gd.chunks(c).zip(xhat.chunks(c)) {
                        for ((a, &gv), &xv) in acc.iter_mut().zip(gr).zip(xr) {
                            *a = *a + gv * xv;
                        }
                    }
                    Tensor::from_vec(&[c], acc)
                }));
                k += 1;
            }
            if has_b {
                res.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for gr in gd.chunks(c) {
                        for (a, &gv) in acc.iter_mut().zip(gr) {
                            *a = *a + gv;
                        }
                    }
                    Tensor::from_vec(&[c], acc)
                }));
            }
            res
        })
    }

    /// Instance normalization of `[B, C, ...]` over the spatial axes with optional per-channel
    /// gain and bias.
    pub fn instance_norm(&self, gamma: Option<&Var<'t, T>>, beta: Option<&Var<'t, T>>, eps: T) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        assert!(shape.len() >= 3, "instance_norm expects [B, C, spatial..]");
        let c = shape[1];
        let s: usize = shape[2..].iter().product();
        let (xhat, invs) = standardize_rows(self.value.data(), s, eps);
        let mut y = xhat.clone();
        for (r, row) in y.chunks_mut(s).enumerate() {
            let ch = r % c;
            let gm = gamma.map_or(T::one(), |g| g.value.data()[ch]);
            let bt = beta.map_or(T::zero(), |b| b.value.data()[ch]);
            for v in row {
                *v = *v * gm + bt;
            }
        }
        for p in gamma.iter().chain(beta.iter()) {
            assert_eq!(p.shape(), &[c], "instance_norm affine shape");
        }
        let out = Tensor::from_vec(&shape, y);
        let gv = gamma.map(|g| g.value_rc());
        let mut parents = vec![self];
        parents.extend(gamma);
        parents.extend(beta);
        let (has_g, has_b) = (gamma.is_some(), beta.is_some());
        self.tape.op(out, &parents, move |g, need| {
            let gd = g.data();
            let mut res = Vec::with_capacity(3);
            res.push(need[0].then(|| {
                let dxhat: Vec<T> = match &gv {
                    Some(gm) => gd
                        .chunks(s)
                        .enumerate()
                        .flat_map(|(r, row)| {
                            let k = gm.data()[r % c];
                            row.iter().map(move |&v| v * k)
                        })
                        .collect(),
                    None => gd.to_vec(),
                };
                Tensor::from_vec(&shape, standardize_rows_backward(&dxhat, &xhat, &invs, s))
            }));
            let mut k = 1;
            if has_g {
                res.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (r, (gr, xr)) in gd.chunks(s).zip(xhat.chunks(s)).enumerate() {
                        acc[r % c] = acc[r % c] + gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>();
                    }
                    Tensor::from_vec(&[c], acc)
                }));
                k += 1;
            }
            if has_b {
                res.push(need[k].then(|| {
                    let mut acc = vec![T::zero(); c];
                    for (r, gr) in gd.chunks(s).enumerate() {
                        acc[r % c] = acc[r % c] + gr.iter().copied().sum::<T>();
                    }
                    Tensor::from_vec(&[c], acc)
                }));
            }
            res
        })
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let c = *shape.last().expect("softmax on 0-d tensor");
        let mut y = Vec::with_capacity(self.value.numel());
        for row in self.value.data().chunks(c) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = y.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - m).exp();
                z = z + e;
                y.push(e);
            }
            for v in &mut y[start..] {
                *v = *v / z;
            }
        }
        let out = Tensor::from_vec(&shape, y);
        let yv = std::rc::Rc::new(out.clone());
        self.tape.op(out, &[self], move |g, _| {
            let mut dx = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(c).zip(yv.data().chunks(c)) {
                let dot = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>();
                dx.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }
}
