//! Volume standardization: frame selection, reorientation, isotropic resampling, fixed-grid
//! resizing and 16-bit quantization, plus the pre-network helpers (unit scaling, ROI crops).

mod interp;

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    self, read_nifti_any, stack_to_volume, write_nifti, DType, DatasetManifest, ManifestRecord, NiftiImage,
    Orientation, SeriesStack, StackOutput, Volume, Volume4D, VolumeError,
};

pub use interp::{source_coords, trilinear_resample};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_orientation: Orientation,
    pub target_spacing_mm: f64,
    pub target_grid: [usize; 3],
    pub quantize: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            target_orientation: Orientation::RAS,
            target_spacing_mm: 1.0,
            target_grid: [256, 256, 128],
            quantize: true,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.target_spacing_mm > 0.0 && self.target_spacing_mm.is_finite()) {
            return Err(PreprocessError::Config(format!("spacing {} must be positive", self.target_spacing_mm)));
        }
        if self.target_grid.iter().any(|&d| d < 2) {
            return Err(PreprocessError::Config(format!("grid {:?} needs every dim >= 2", self.target_grid)));
        }
        Ok(())
    }
}

/// 0-based index of the frame kept from a `t`-frame series: `floor((t - 1) / 2)`.
pub fn middle_frame_index(t: usize) -> usize {
    t.saturating_sub(1) / 2
}

pub fn select_3d_from_4d(v: &Volume4D) -> Volume {
    v.frames()[middle_frame_index(v.t())].clone()
}

/// Permutes and flips axes so the data is laid out in `target`, keeping every voxel at the
/// same world position.
pub fn reorient(v: &Volume, target: Orientation) -> Volume {
    let src = v.orientation;
    // for each target axis j: the source axis that lies on the same world axis, and whether it flips
    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    for j in 0..3 {
        let k = (0..3).find(|&k| src.0[k].world_axis() == target.0[j].world_axis()).unwrap();
        perm[j] = k;
        flip[j] = src.0[k] != target.0[j];
    }
    let shape = v.shape();
    let mut view = v.data.view().permuted_axes(perm);
    for (j, &f) in flip.iter().enumerate() {
        if f {
            view.invert_axis(Axis(j));
        }
    }
    let data = view.as_standard_layout().to_owned();
    // new voxel 0 sits at the far end of every flipped source axis
    let mut corner = [0.0f64; 3];
    for j in 0..3 {
        if flip[j] {
            corner[perm[j]] = (shape[perm[j]] - 1) as f64;
        }
    }
    let origin = v.world(corner).map(|x| x as f32);
    Volume {
        data,
        spacing: [v.spacing[perm[0]], v.spacing[perm[1]], v.spacing[perm[2]]],
        origin,
        orientation: target,
        dtype: v.dtype,
        intensity_offset: v.intensity_offset,
        intensity_scale: v.intensity_scale,
    }
}

/// Resamples onto `new_shape` with per-axis output spacing `new_spacing`, mapping output voxel
/// centres into the input's continuous index space.
fn resample(v: &Volume, new_shape: [usize; 3], new_spacing: [f64; 3]) -> Volume {
    let coords: [Vec<f64>; 3] =
        std::array::from_fn(|k| source_coords(new_shape[k], new_spacing[k] / v.spacing[k] as f64));
    let data = trilinear_resample(&v.physical(), &coords);
    let first = [0, 1, 2].map(|k| coords[k][0]);
    let origin = v.world(first).map(|x| x as f32);
    Volume {
        data,
        spacing: new_spacing.map(|s| s as f32),
        origin,
        orientation: v.orientation,
        dtype: DType::F32,
        intensity_offset: 0.0,
        intensity_scale: 1.0,
    }
}

/// Trilinear resampling to isotropic `spacing` (mm), clamp-to-edge borders.
pub fn resample_iso(v: &Volume, spacing: f64) -> Result<Volume> {
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(PreprocessError::Config(format!("spacing {spacing} must be positive")));
    }
    let shape = v.shape();
    let new_shape: [usize; 3] =
        std::array::from_fn(|k| ((shape[k] as f64 * v.spacing[k] as f64 / spacing).round() as usize).max(1));
    Ok(resample(v, new_shape, [spacing; 3]))
}

/// Trilinear resize onto exactly `grid`, rescaling spacing so the physical extent is kept.
pub fn resize_to(v: &Volume, grid: [usize; 3]) -> Result<Volume> {
    if grid.iter().any(|&d| d < 2) {
        return Err(PreprocessError::Config(format!("grid {grid:?} needs every dim >= 2")));
    }
    let shape = v.shape();
    let spacing: [f64; 3] = std::array::from_fn(|k| v.spacing[k] as f64 * shape[k] as f64 / grid[k] as f64);
    Ok(resample(v, grid, spacing))
}

fn finite_range(v: &Volume) -> Result<(f64, f64, Array3<f32>)> {
    let phys = v.physical();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in phys.iter() {
        if !x.is_finite() {
            return Err(PreprocessError::Data("volume holds NaN or infinite values".into()));
        }
        lo = lo.min(x as f64);
        hi = hi.max(x as f64);
    }
    Ok((lo, hi, phys))
}

/// Per-volume min-max quantization to `u16`; physical value = offset + q * scale.
pub fn quantize_u16(v: &Volume) -> Result<Volume> {
    let (lo, hi, phys) = finite_range(v)?;
    let offset = lo as f32;
    let (data, scale) = if hi > lo {
        let scale = ((hi - lo) / 65535.0) as f32;
        let (o, s) = (offset as f64, scale as f64);
        (phys.mapv(|x| ((x as f64 - o) / s).round().clamp(0.0, 65535.0) as f32), scale)
    } else {
        (Array3::zeros(phys.raw_dim()), 0.0)
    };
    Ok(Volume { data, dtype: DType::U16, intensity_offset: offset, intensity_scale: scale, ..v.clone() })
}

/// Min-max scaling of physical intensities to `[0, 1]` as `f32`.
pub fn normalize_unit(v: &Volume) -> Result<Volume> {
    let (lo, hi, phys) = finite_range(v)?;
    let data = if hi > lo {
        let r = hi - lo;
        phys.mapv(|x| ((x as f64 - lo) / r) as f32)
    } else {
        Array3::zeros(phys.raw_dim())
    };
    Ok(Volume { data, dtype: DType::F32, intensity_offset: 0.0, intensity_scale: 1.0, ..v.clone() })
}

/// Zero-pads symmetrically so every axis is at least `roi` long.
pub fn pad_to_roi(v: &Volume, roi: usize) -> Volume {
    let shape = v.shape();
    if shape.iter().all(|&d| d >= roi) {
        return v.clone();
    }
    let new_shape = shape.map(|d| d.max(roi));
    let before: [usize; 3] = std::array::from_fn(|k| (new_shape[k] - shape[k]) / 2);
    let mut data = Array3::zeros(new_shape);
    data.slice_mut(s![
        before[0]..before[0] + shape[0],
        before[1]..before[1] + shape[1],
        before[2]..before[2] + shape[2]
    ])
    .assign(&v.data);
    let origin = v.world(before.map(|b| -(b as f64))).map(|x| x as f32);
    Volume { data, origin, ..v.clone() }
}

/// Uniformly samples the corner of a cubic `roi` crop inside `shape` (each dim >= roi).
pub fn sample_roi_offset<R: Rng + ?Sized>(shape: [usize; 3], roi: usize, rng: &mut R) -> [usize; 3] {
    shape.map(|d| rng.random_range(0..=d - roi))
}

/// Axis-aligned cubic crop of side `roi` at a uniformly random valid offset.
pub fn random_roi_crop<R: Rng + ?Sized>(v: &Volume, roi: usize, rng: &mut R) -> Volume {
    let padded = pad_to_roi(v, roi);
    let off = sample_roi_offset(padded.shape(), roi, rng);
    crop(&padded, off, [roi; 3])
}

pub fn crop(v: &Volume, offset: [usize; 3], size: [usize; 3]) -> Volume {
    let data = v
        .data
        .slice(s![
            offset[0]..offset[0] + size[0],
            offset[1]..offset[1] + size[1],
            offset[2]..offset[2] + size[2]
        ])
        .to_owned();
    let origin = v.world(offset.map(|o| o as f64)).map(|x| x as f32);
    Volume { data, origin, ..v.clone() }
}

/// What the pipeline can ingest.
#[derive(Clone, Debug)]
pub enum PipelineInput {
    Stack(SeriesStack),
    Volume(Volume),
    Series(Volume4D),
}

/// assemble -> 4D select -> reorient -> resample_iso -> resize_to -> quantize.
pub fn preprocess_pipeline(input: PipelineInput, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let vol = match input {
        PipelineInput::Stack(s) => match stack_to_volume(&s)? {
            StackOutput::Volume(v) => v,
            StackOutput::Series(s) => select_3d_from_4d(&s),
        },
        PipelineInput::Volume(v) => v,
        PipelineInput::Series(s) => select_3d_from_4d(&s),
    };
    vol.validate()?;
    let vol = reorient(&vol, cfg.target_orientation);
    let vol = if vol.spacing.iter().all(|&s| s as f64 == cfg.target_spacing_mm) {
        vol
    } else {
        resample_iso(&vol, cfg.target_spacing_mm)?
    };
    let vol = if vol.shape() == cfg.target_grid { vol } else { resize_to(&vol, cfg.target_grid)? };
    if cfg.quantize {
        if vol.dtype == DType::U16 {
            return Ok(vol);
        }
        quantize_u16(&vol)
    } else if vol.dtype == DType::U16 {
        Ok(Volume { data: vol.physical(), dtype: DType::F32, intensity_offset: 0.0, intensity_scale: 1.0, ..vol })
    } else {
        Ok(vol)
    }
}

/// Loads a manifest entry: a NIfTI file (3D or 4D) or a JSON-serialized slice stack.
pub fn load_input(path: &Path) -> Result<PipelineInput> {
    if path.extension().is_some_and(|e| e == "json") {
        let text = fs::read_to_string(path).map_err(|source| VolumeError::Io { path: path.to_path_buf(), source })?;
        let stack: SeriesStack =
            serde_json::from_str(&text).map_err(|e| PreprocessError::Data(format!("{}: {e}", path.display())))?;
        return Ok(PipelineInput::Stack(stack));
    }
    Ok(match read_nifti_any(path)? {
        NiftiImage::Volume(v) => PipelineInput::Volume(v),
        NiftiImage::Series(s) => PipelineInput::Series(s),
    })
}

/// Outcome of batch preprocessing.
#[derive(Debug, Default)]
pub struct BatchReport {
    pub manifest: DatasetManifest,
    /// `(id, reason)` for every record skipped as corrupt.
    pub skipped: Vec<(String, String)>,
}

/// Preprocesses every record into `out_dir/<id>.nii` and writes `out_dir/manifest.jsonl`.
/// Records whose input fails any precondition are logged and skipped. Output order follows
/// the input manifest.
pub fn preprocess_manifest(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    out_dir: &Path,
    cfg: &PreprocessConfig,
) -> Result<BatchReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|source| VolumeError::Io { path: out_dir.to_path_buf(), source })?;
    let mut report = BatchReport::default();
    for rec in &manifest.records {
        let src: PathBuf =
            if rec.volume_path.is_relative() { manifest_dir.join(&rec.volume_path) } else { rec.volume_path.clone() };
        let file = format!("{}.nii", rec.id);
        let result = load_input(&src)
            .and_then(|input| preprocess_pipeline(input, cfg))
            .and_then(|v| write_nifti(&v, out_dir.join(&file)).map_err(PreprocessError::from));
        match result {
            Ok(()) => report.manifest.records.push(ManifestRecord { volume_path: PathBuf::from(file), ..rec.clone() }),
            Err(e) => {
                warn!("skipping corrupt volume `{}`: {e}", rec.id);
                report.skipped.push((rec.id.clone(), e.to_string()));
            }
        }
    }
    volume::save_manifest(&report.manifest, out_dir.join("manifest.jsonl"))?;
    Ok(report)
}
