//! Fused classification and overlap losses over channel-first logits.

use crate::real::Real;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Softmax over axis 1 of `[B, K, S]`-shaped data (S = product of trailing dims).
pub fn softmax_channels<T: Real>(logits: &[T], b: usize, k: usize, s: usize) -> Vec<T> {
    let mut p = vec![T::zero(); logits.len()];
    for bi in 0..b {
        let base = bi * k * s;
        for v in 0..s {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(logits[base + c * s + v]);
            }
            let mut z = T::zero();
            for c in 0..k {
                let e = (logits[base + c * s + v] - m).exp();
                p[base + c * s + v] = e;
                z = z + e;
            }
            for c in 0..k {
                p[base + c * s + v] = p[base + c * s + v] / z;
            }
        }
    }
    p
}

fn split_shape(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "logits must be [B, K, ...]");
    (shape[0], shape[1], shape[2..].iter().product())
}

impl<'t, T: Real> Var<'t, T> {
    /// Mean softmax cross-entropy of `[B, K, ...]` logits against integer labels laid out as
    /// `[B, ...]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let (b, k, s) = split_shape(&shape);
        assert_eq!(labels.len(), b * s, "cross_entropy label count");
        let x = self.value.data();
        let p = softmax_channels(x, b, k, s);
        let mut total = T::zero();
        for bi in 0..b {
            for v in 0..s {
                let y = labels[bi * s + v];
                assert!(y < k, "label {y} out of range for {k} classes");
                total = total - p[bi * k * s + y * s + v].max(T::min_positive_value()).ln();
            }
        }
        let n = T::from_usize(b * s).unwrap();
        let out = Tensor::scalar(total / n);
        let labels = labels.to_vec();
        self.tape.op(out, &[self], move |g, _| {
            let scale = g.item() / n;
            let mut dx = p.clone();
            for bi in 0..b {
                for v in 0..s {
                    let i = bi * k * s + labels[bi * s + v] * s + v;
                    dx[i] = dx[i] - T::one();
                }
            }
            for d in &mut dx {
                *d = *d * scale;
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }

    /// `1 - mean_k dice_k` over foreground classes `1..K`, with soft dice computed on the
    /// softmax of the logits and summed over the whole batch.
    pub fn soft_dice_loss(&self, labels: &[usize], smooth: T) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        let (b, k, s) = split_shape(&shape);
        assert!(k >= 2, "soft dice needs at least two classes");
        assert_eq!(labels.len(), b * s, "soft_dice label count");
        let p = softmax_channels(self.value.data(), b, k, s);
        let mut inter = vec![T::zero(); k];
        let mut psum = vec![T::zero(); k];
        let mut gsum = vec![T::zero(); k];
        for bi in 0..b {
            for c in 0..k {
                for v in 0..s {
                    let pv = p[(bi * k + c) * s + v];
                    psum[c] = psum[c] + pv;
                    if labels[bi * s + v] == c {
                        inter[c] = inter[c] + pv;
                        gsum[c] = gsum[c] + T::one();
                    }
                }
            }
        }
        let two = T::lit(2.0);
        let nfg = T::from_usize(k - 1).unwrap();
        let mut mean_dice = T::zero();
        for c in 1..k {
            mean_dice = mean_dice + (two * inter[c] + smooth) / (psum[c] + gsum[c] + smooth);
        }
        mean_dice = mean_dice / nfg;
        let out = Tensor::scalar(T::one() - mean_dice);
        let labels = labels.to_vec();
        self.tape.op(out, &[self], move |g, _| {
            let up = g.item();
            let mut dx = vec![T::zero(); p.len()];
            for bi in 0..b {
                for v in 0..s {
                    let y = labels[bi * s + v];
                    // dL/dp_c for every class at this voxel
                    let mut dp = vec![T::zero(); k];
                    for (c, d) in dp.iter_mut().enumerate().skip(1) {
                        let den = psum[c] + gsum[c] + smooth;
                        let num = two * inter[c] + smooth;
                        let gi = if y == c { T::one() } else { T::zero() };
                        *d = -(two * gi * den - num) / (den * den) / nfg;
                    }
                    let base = bi * k * s + v;
                    let dot = (0..k).map(|c| p[base + c * s] * dp[c]).sum::<T>();
                    for c in 0..k {
                        dx[base + c * s] = up * p[base + c * s] * (dp[c] - dot);
                    }
                }
            }
            vec![Some(Tensor::from_vec(&shape, dx))]
        })
    }
}
