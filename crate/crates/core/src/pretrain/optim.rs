use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use triad_tensor::Tensor;

use crate::model::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Decoupled weight decay.
    AdamW { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    /// Weight decay folded into the gradient.
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
    Sgd { momentum: f64, nesterov: bool, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }

    pub fn sgd_nesterov(momentum: f64) -> Self {
        OptimizerKind::Sgd { momentum, nesterov: true, weight_decay: 3e-5 }
    }

    /// Names of the per-parameter state buffers.
    pub fn slots(&self) -> &'static [&'static str] {
        match self {
            OptimizerKind::AdamW { .. } | OptimizerKind::Adam { .. } => &["m", "v"],
            OptimizerKind::Sgd { .. } => &["momentum"],
        }
    }
}

/// Optimizer kind plus its moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    /// Number of updates applied so far.
    pub t: u64,
    /// `slot -> parameter name -> buffer`.
    pub state: BTreeMap<String, BTreeMap<String, Tensor<f32>>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        let state = kind.slots().iter().map(|s| (s.to_string(), BTreeMap::new())).collect();
        Optimizer { kind, t: 0, state }
    }

    fn buffer(&mut self, slot: &str, name: &str, shape: &[usize]) -> &mut Tensor<f32> {
        self.state
            .get_mut(slot)
            .expect("slot exists")
            .entry(name.to_owned())
            .or_insert_with(|| Tensor::zeros(shape))
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let t = self.t as i32;
        let kind = self.kind;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            assert_eq!(g.shape(), p.shape(), "gradient shape for `{name}`");
            match kind {
                OptimizerKind::AdamW { beta1, beta2, eps, weight_decay }
                | OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                    let decoupled = matches!(kind, OptimizerKind::AdamW { .. });
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let mut m = std::mem::replace(self.buffer("m", name, p.shape()), Tensor::zeros(&[0]));
                    let v = self.buffer("v", name, p.shape());
                    let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
                    for i in 0..pd.len() {
                        let w = pd[i] as f64;
                        let mut gi = g.data()[i] as f64;
                        if !decoupled {
                            gi += weight_decay * w;
                        }
                        let mi = beta1 * md[i] as f64 + (1.0 - beta1) * gi;
                        let vi = beta2 * vd[i] as f64 + (1.0 - beta2) * gi * gi;
                        md[i] = mi as f32;
                        vd[i] = vi as f32;
                        let mut upd = (mi / bc1) / ((vi / bc2).sqrt() + eps);
                        if decoupled {
                            upd += weight_decay * w;
                        }
                        pd[i] = (w - lr * upd) as f32;
                    }
                    *self.buffer("m", name, p.shape()) = m;
                }
                OptimizerKind::Sgd { momentum, nesterov, weight_decay } => {
                    let buf = self.buffer("momentum", name, p.shape());
                    let (pd, bd) = (p.data_mut(), buf.data_mut());
                    for i in 0..pd.len() {
                        let w = pd[i] as f64;
                        let gi = g.data()[i] as f64 + weight_decay * w;
                        let b = if t == 1 { gi } else { momentum * bd[i] as f64 + gi };
                        bd[i] = b as f32;
                        let d = if nesterov { gi + momentum * b } else { b };
                        pd[i] = (w - lr * d) as f32;
                    }
                }
            }
        }
    }
}
