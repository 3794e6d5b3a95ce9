//! Central finite-difference gradient checking in `f64`.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over all checked coordinates.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Picks up to `count` distinct coordinates out of `n`, deterministically from `seed`.
pub fn sample_coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= n {
        return (0..n).collect();
    }
    let mut state = seed ^ 0x9E37_79B9_7F4A_7C15;
    let mut next = || {
        // splitmix64
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < count {
        picked.insert((next() % n as u64) as usize);
    }
    picked.into_iter().collect()
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central differences
/// with step `h`, on at most `per_input` coordinates of each input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], f: F, h: f64, per_input: usize, seed: u64) -> GradCheck
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars);
    let grads = tape.backward(&out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<Var<'_, f64>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).value().item()
    };

    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut checked = 0;
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for c in sample_coords(input.numel(), per_input, seed.wrapping_add(i as u64)) {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + h;
            let fp = eval(&work);
            work[i].data_mut()[c] = orig - h;
            let fm = eval(&work);
            work[i].data_mut()[c] = orig;
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[i].data()[c];
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
            max_abs = max_abs.max((ana - num).abs());
            checked += 1;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let rel_err = if denom == 0.0 { diff2.sqrt() } else { diff2.sqrt() / denom };
    GradCheck { rel_err, max_abs_err: max_abs, checked }
}
