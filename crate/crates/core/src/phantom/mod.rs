//! Synthetic ellipsoid phantoms with known labels, task datasets built from them, the
//! staged experiment harness and its config format.

mod experiment;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use triad_tensor::Tensor;

use crate::downstream::{ClsSample, RegPair, SegSample};
use crate::model::{warp, WarpMode};
use crate::text::{build_description, ImagingMeta};
use crate::volume::{write_nifti, DType, ManifestRecord, Split, Volume, VolumeError};

pub use experiment::{
    config_hash, load_experiment_config, run_experiment, ExperimentConfig, ExperimentError, FailureRecord,
    FinetuneSections, GenerateConfig, InitChoice, Stage, StageRecord, Summary, TaskSection, TextConfig, SUMMARY_FILE,
};

/// Largest displacement a generated registration field may carry, in voxels.
pub const MAX_DISPLACEMENT: f64 = 4.0;
const PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom spec: {0}")]
    Spec(String),
    #[error("could not place object {object} of {n_objects} after {tries} tries")]
    Placement { object: usize, n_objects: usize, tries: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Text(#[from] crate::text::TextError),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1w,
    T2w,
}

impl Modality {
    /// Foreground and background intensity of a noiseless phantom.
    pub fn intensities(self) -> (f32, f32) {
        match self {
            Modality::T1w => (0.8, 0.2),
            Modality::T2w => (0.2, 0.8),
        }
    }

    pub fn class_id(self) -> usize {
        match self {
            Modality::T1w => 0,
            Modality::T2w => 1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::T1w => "T1w",
            Modality::T2w => "T2w",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub size: [usize; 3],
    pub n_objects: usize,
    pub modality: Modality,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { size: [32; 3], n_objects: 3, modality: Modality::T1w, noise_sigma: 0.05, seed: 0 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size.iter().any(|&d| d < 16) {
            return Err(PhantomError::Spec(format!("size {:?} needs every dim >= 16", self.size)));
        }
        if self.n_objects == 0 {
            return Err(PhantomError::Spec("n_objects must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PhantomError::Spec(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

/// A generated image with its object labels `0..=n_objects` and acquisition metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub volume: Volume,
    pub labels: Array3<u16>,
    pub meta: ImagingMeta,
}

fn acquisition(modality: Modality, rng: &mut ChaCha8Rng) -> ImagingMeta {
    let field = if rng.random_bool(0.5) { 3.0 } else { 1.5 };
    let (tr, te) = match modality {
        Modality::T1w => ([1900.0, 2300.0, 2500.0][rng.random_range(0..3)], [2.5, 3.0][rng.random_range(0..2)]),
        Modality::T2w => ([3200.0, 4000.0, 6000.0][rng.random_range(0..3)], [90.0, 100.0, 400.0][rng.random_range(0..3)]),
    };
    let vendor = ["Siemens", "GE", "Philips"][rng.random_range(0..3)];
    ImagingMeta {
        modality: modality.to_string(),
        field_strength: Some(field),
        tr_ms: Some(tr),
        te_ms: Some(te),
        manufacturer: Some(vendor.into()),
        sequence_name: None,
    }
}

/// Claims the still-free voxels of a random ellipsoid for `label`. Fails when the ellipsoid
/// is empty or mostly covered by earlier objects.
fn try_place(labels: &mut Array3<u16>, label: u16, rng: &mut ChaCha8Rng) -> bool {
    let dims = labels.shape().to_vec();
    let lo = *dims.iter().min().unwrap() as f64;
    let radii: [f64; 3] = std::array::from_fn(|_| rng.random_range(lo / 10.0..lo / 4.0));
    let center: [f64; 3] = std::array::from_fn(|k| rng.random_range(radii[k]..dims[k] as f64 - radii[k]));
    let inside = |p: [usize; 3]| -> bool {
        (0..3).map(|k| ((p[k] as f64 + 0.5 - center[k]) / radii[k]).powi(2)).sum::<f64>() <= 1.0
    };
    let (mut total, mut free) = (0usize, Vec::new());
    for ((i, j, k), &v) in labels.indexed_iter() {
        if inside([i, j, k]) {
            total += 1;
            if v == 0 {
                free.push([i, j, k]);
            }
        }
    }
    if total == 0 || free.len() * 2 < total {
        return false;
    }
    for p in free {
        labels[p] = label;
    }
    true
}

/// `n_objects` random ellipsoids on a blank grid at 1 mm RAS spacing, with modality-coupled
/// intensities, additive Gaussian noise and clamping to `[0, 1]`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Array3::<u16>::zeros(spec.size);
    for obj in 1..=spec.n_objects {
        if !(0..PLACEMENT_TRIES).any(|_| try_place(&mut labels, obj as u16, &mut rng)) {
            return Err(PhantomError::Placement { object: obj, n_objects: spec.n_objects, tries: PLACEMENT_TRIES });
        }
    }
    let (fg, bg) = spec.modality.intensities();
    let mut data = labels.mapv(|l| if l > 0 { fg } else { bg });
    if spec.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        data.mapv_inplace(|v| (v as f64 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32);
    }
    let meta = acquisition(spec.modality, &mut rng);
    Ok(Phantom { volume: Volume::new(data, [1.0; 3])?, labels, meta })
}

/// Registration phantom: `moving` is `fixed` warped by `field`, so a perfect model predicts a
/// field that maps the moving labels back onto the fixed ones.
#[derive(Clone, Debug)]
pub struct RegPhantom {
    pub moving: Volume,
    pub fixed: Volume,
    pub moving_labels: Array3<u16>,
    pub fixed_labels: Array3<u16>,
    /// `[3, D, H, W]` in voxels.
    pub field: Array4<f32>,
    pub meta: ImagingMeta,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with clamped borders.
fn blur(a: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let mut cur = a.clone();
    for ax in 0..3 {
        let n = cur.shape()[ax] as i64;
        let mut out = Array3::<f64>::zeros(cur.raw_dim());
        for (mut o, line) in out.lanes_mut(Axis(ax)).into_iter().zip(cur.lanes(Axis(ax))) {
            for i in 0..n {
                o[i as usize] = k.iter().enumerate().map(|(j, w)| w * line[(i + j as i64 - r).clamp(0, n - 1) as usize]).sum();
            }
        }
        cur = out;
    }
    cur
}

/// Smooth random field whose largest per-voxel displacement norm equals `amplitude`.
pub fn smooth_field(size: [usize; 3], amplitude: f64, sigma: f64, rng: &mut ChaCha8Rng) -> Array4<f32> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    // noise on a grid padded by the kernel radius, so the cropped field is stationary up to the edges
    let r = gaussian_kernel(sigma).len() / 2;
    let padded = size.map(|d| d + 2 * r);
    let comps: Vec<Array3<f64>> = (0..3)
        .map(|_| {
            let b = blur(&Array3::from_shape_simple_fn(padded, || normal.sample(&mut *rng)), sigma);
            b.slice(ndarray::s![r..r + size[0], r..r + size[1], r..r + size[2]]).to_owned()
        })
        .collect();
    let mut peak = 0.0f64;
    for ((a, b), c) in comps[0].iter().zip(comps[1].iter()).zip(comps[2].iter()) {
        peak = peak.max((a * a + b * b + c * c).sqrt());
    }
    let scale = if peak > 0.0 { amplitude / peak } else { 0.0 };
    Array4::from_shape_fn([3, size[0], size[1], size[2]], |(k, i, j, l)| (comps[k][[i, j, l]] * scale) as f32)
}

fn to_tensor(a: &Array3<f32>) -> Tensor<f32> {
    let s = a.shape();
    Tensor::from_vec(&[1, 1, s[0], s[1], s[2]], a.iter().copied().collect())
}

fn from_tensor(t: &Tensor<f32>, size: [usize; 3]) -> Array3<f32> {
    Array3::from_shape_vec(size, t.data().to_vec()).expect("warp keeps the grid")
}

/// Fixed phantom from `spec` and a moving image warped by a smooth field of the given peak
/// displacement (at most four voxels).
pub fn gen_reg_pair(spec: &PhantomSpec, amplitude: f64) -> Result<RegPhantom> {
    if !(0.0..=MAX_DISPLACEMENT).contains(&amplitude) {
        return Err(PhantomError::Spec(format!("field amplitude {amplitude} outside [0, {MAX_DISPLACEMENT}]")));
    }
    let fixed = gen_phantom(spec)?;
    let size = spec.size;
    if amplitude == 0.0 {
        return Ok(RegPhantom {
            moving: fixed.volume.clone(),
            moving_labels: fixed.labels.clone(),
            fixed: fixed.volume,
            fixed_labels: fixed.labels,
            field: Array4::zeros([3, size[0], size[1], size[2]]),
            meta: fixed.meta,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7265_6770_6169_72);
    let field = smooth_field(size, amplitude, size.iter().min().copied().unwrap() as f64 / 8.0, &mut rng);
    let ft = Tensor::from_vec(&[1, 3, size[0], size[1], size[2]], field.iter().copied().collect());
    let moving = from_tensor(&warp(&to_tensor(&fixed.volume.data), &ft, WarpMode::Trilinear)?, size);
    let lab = fixed.labels.mapv(|v| v as f32);
    let moving_labels = from_tensor(&warp(&to_tensor(&lab), &ft, WarpMode::Nearest)?, size).mapv(|v| v as u16);
    Ok(RegPhantom {
        moving: Volume { data: moving, ..fixed.volume.clone() },
        fixed: fixed.volume,
        moving_labels,
        fixed_labels: fixed.labels,
        field,
        meta: fixed.meta,
    })
}

/// Phantom spec for item `i` of a corpus; modalities alternate so every corpus is balanced.
pub fn corpus_spec(base: &PhantomSpec, seed: u64, i: usize) -> PhantomSpec {
    let modality = if i % 2 == 0 { Modality::T1w } else { Modality::T2w };
    PhantomSpec { modality, seed: seed.wrapping_mul(1_000_003).wrapping_add(i as u64), ..base.clone() }
}

/// Binary foreground labels.
pub fn foreground(labels: &Array3<u16>) -> Array3<u16> {
    labels.mapv(|v| (v > 0) as u16)
}

/// Label map stored as an integer volume with identity scaling.
pub fn label_volume(labels: &Array3<u16>, like: &Volume) -> Volume {
    Volume {
        data: labels.mapv(|v| v as f32),
        dtype: DType::U16,
        intensity_offset: 0.0,
        intensity_scale: 1.0,
        ..like.clone()
    }
}

/// Writes `<dir>/<id>.nii` and returns the manifest record with a path relative to `dir`.
pub fn write_record(dir: &Path, id: &str, p: &Phantom, split: Split) -> Result<ManifestRecord> {
    let file = PathBuf::from(format!("{id}.nii"));
    write_nifti(&p.volume, dir.join(&file))?;
    Ok(ManifestRecord {
        id: id.to_owned(),
        volume_path: file,
        organ: "phantom".into(),
        modality: p.meta.modality.clone(),
        description: build_description(&p.meta)?,
        split,
    })
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| VolumeError::Io { path: dir.to_path_buf(), source }.into())
}

/// In-memory segmentation samples with binary foreground labels.
pub fn seg_samples(base: &PhantomSpec, seed: u64, n: usize) -> Result<Vec<SegSample>> {
    (0..n)
        .map(|i| {
            let p = gen_phantom(&corpus_spec(base, seed, i))?;
            Ok(SegSample { id: format!("seg{i:03}"), image: p.volume.data, labels: foreground(&p.labels) })
        })
        .collect()
}

/// In-memory modality classification samples (T1w = 0, T2w = 1).
pub fn cls_samples(base: &PhantomSpec, seed: u64, n: usize) -> Result<Vec<ClsSample>> {
    (0..n)
        .map(|i| {
            let spec = corpus_spec(base, seed, i);
            let p = gen_phantom(&spec)?;
            Ok(ClsSample { id: format!("cls{i:03}"), image: p.volume.data, label: spec.modality.class_id() })
        })
        .collect()
}

/// In-memory registration pairs with binary foreground labels.
pub fn reg_pairs(base: &PhantomSpec, seed: u64, n: usize, amplitude: f64) -> Result<Vec<RegPair>> {
    (0..n)
        .map(|i| {
            let r = gen_reg_pair(&corpus_spec(base, seed, i), amplitude)?;
            Ok(RegPair {
                id: format!("reg{i:03}"),
                moving: r.moving.data,
                fixed: r.fixed.data,
                moving_labels: Some(foreground(&r.moving_labels)),
                fixed_labels: Some(foreground(&r.fixed_labels)),
            })
        })
        .collect()
}
