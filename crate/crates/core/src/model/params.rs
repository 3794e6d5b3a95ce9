use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use triad_tensor::{Real, Tape, Tensor, Var};

use super::{ModelError, Result};

pub const ENCODER_PREFIX: &str = "encoder.";

/// Named `f32` tensors in a hierarchical dotted namespace.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        assert!(!self.tensors.contains_key(&name), "duplicate parameter `{name}`");
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(Tensor::all_finite)
    }

    /// Moves every tensor of `other` in; names must not collide.
    pub fn extend(&mut self, other: ParamSet) {
        for (k, v) in other.tensors {
            self.insert(k, v);
        }
    }

    pub fn with_prefix(&self, prefix: &str) -> ParamSet {
        let tensors = self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(k, v)| (k.clone(), v.clone()));
        ParamSet { tensors: tensors.collect() }
    }

    /// Places every tensor on `tape`, as a leaf when `trainable(name)` holds.
    pub fn bind<'t, T: Real>(&self, tape: &'t Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let t = v.cast::<T>();
                let var = if trainable(k) { tape.leaf(t) } else { tape.constant(t) };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a tape for one forward pass.
pub struct Bound<'t, T: Real> {
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn from_vars(vars: BTreeMap<String, Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<&Var<'t, T>> {
        self.vars.get(name).ok_or_else(|| ModelError::MissingParam(name.to_owned()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'t, T>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameter shapes as bound, for config checks before a forward pass.
    pub fn shape(&self, name: &str) -> Result<&[usize]> {
        Ok(self.get(name)?.shape())
    }
}

/// Copies every `encoder.*` tensor of `src` into `dst`. Strict: any encoder name of `dst`
/// missing from `src`, or present with another shape, aborts the transfer.
pub fn transfer_encoder_weights(src: &ParamSet, dst: &ParamSet) -> Result<ParamSet> {
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    for (name, t) in dst.iter().filter(|(k, _)| k.starts_with(ENCODER_PREFIX)) {
        match src.get(name) {
            None => missing.push(name.to_owned()),
            Some(s) if s.shape() != t.shape() => {
                mismatched.push(format!("{name}: {:?} vs {:?}", s.shape(), t.shape()))
            }
            Some(_) => {}
        }
    }
    let unexpected: Vec<String> =
        src.names().filter(|k| k.starts_with(ENCODER_PREFIX) && !dst.contains(k)).map(str::to_owned).collect();
    if !missing.is_empty() || !mismatched.is_empty() || !unexpected.is_empty() {
        return Err(ModelError::Transfer { missing, mismatched, unexpected });
    }
    let mut out = dst.clone();
    for (name, t) in out.iter_mut().filter(|(k, _)| k.starts_with(ENCODER_PREFIX)) {
        *t = src.get(name).unwrap().clone();
    }
    Ok(out)
}

/// Initialization rule of one tensor.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) truncated to two standard deviations.
    TruncNormal(f64),
    /// Uniform(-bound, bound).
    Uniform(f64),
}

fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Creates tensors with an RNG stream keyed by (seed, name), so adding or removing one
/// parameter never shifts the values of the others.
pub struct Builder {
    seed: u64,
    prefix: String,
    pub params: ParamSet,
}

impl Builder {
    pub fn new(seed: u64, prefix: &str) -> Self {
        Builder { seed, prefix: prefix.to_owned(), params: ParamSet::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init) {
        let full = format!("{}{name}", self.prefix);
        let n: usize = shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ name_hash(&full).rotate_left(17));
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => {
                let d = Normal::new(0.0, std).unwrap();
                (0..n)
                    .map(|_| loop {
                        let x: f64 = d.sample(&mut rng);
                        if x.abs() <= 2.0 * std {
                            break x as f32;
                        }
                    })
                    .collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..=b) as f32).collect(),
        };
        self.params.insert(full, Tensor::from_vec(shape, data));
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize, bias: bool) {
        self.add(&format!("{name}.weight"), &[fout, fin], Init::TruncNormal(0.02));
        if bias {
            self.add(&format!("{name}.bias"), &[fout], Init::Zeros);
        }
    }

    pub fn layer_norm(&mut self, name: &str, c: usize) {
        self.add(&format!("{name}.weight"), &[c], Init::Ones);
        self.add(&format!("{name}.bias"), &[c], Init::Zeros);
    }

    /// Cubic conv kernel `[co, ci, k, k, k]` with the uniform fan-in rule.
    pub fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, bias: bool) {
        let bound = 1.0 / ((ci * k * k * k) as f64).sqrt();
        self.add(&format!("{name}.weight"), &[co, ci, k, k, k], Init::Uniform(bound));
        if bias {
            self.add(&format!("{name}.bias"), &[co], Init::Uniform(bound));
        }
    }

    /// Transposed conv kernel `[ci, co, k, k, k]`; fan-in counted over `co * k^3`.
    pub fn conv_transpose(&mut self, name: &str, ci: usize, co: usize, k: usize, bias: bool) {
        let bound = 1.0 / ((co * k * k * k) as f64).sqrt();
        self.add(&format!("{name}.weight"), &[ci, co, k, k, k], Init::Uniform(bound));
        if bias {
            self.add(&format!("{name}.bias"), &[co], Init::Uniform(bound));
        }
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}
