//! In-memory volumes, NIfTI-1 I/O, slice-stack assembly and dataset manifests.
//!
//! World coordinates are RAS+ millimetres: +x points Right, +y Anterior, +z Superior. An
//! orientation code names, for each array axis, the world direction in which the index grows
//! (`"RAS"` means axis 0 runs left to right).

mod manifest;
mod nifti;
mod series;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use manifest::{load_manifest, save_manifest, validate_manifest, DatasetManifest, ManifestRecord, Split};
pub use nifti::{read_nifti, read_nifti_4d, read_nifti_any, write_nifti, write_nifti_4d, NiftiImage, HEADER_BYTES};
pub use series::{stack_to_volume, SeriesSlice, SeriesStack, StackOutput};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a supported NIfTI-1 file: {0}")]
    Format(String),
    #[error("unsupported NIfTI datatype code {0} (supported: 4 int16, 16 float32, 512 uint16)")]
    UnsupportedDtype(i16),
    #[error("corrupt NIfTI header: {0}")]
    CorruptHeader(String),
    #[error("file truncated: expected at least {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("file holds a 4D series with {t} frames; use read_nifti_4d")]
    Is4D { t: usize },
    #[error("orientation error: {0}")]
    Orientation(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("slice spacing error: {0}")]
    Spacing(String),
    #[error("manifest line {line}: {msg}")]
    ManifestParse { line: usize, msg: String },
    #[error("duplicate manifest id `{0}`")]
    DuplicateId(String),
    #[error("invalid volume: {0}")]
    Invalid(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// World direction along which an array index increases.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AxisDir {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisDir {
    pub fn from_char(c: char) -> Option<Self> {
        Some(match c.to_ascii_uppercase() {
            'R' => AxisDir::R,
            'L' => AxisDir::L,
            'A' => AxisDir::A,
            'P' => AxisDir::P,
            'S' => AxisDir::S,
            'I' => AxisDir::I,
            _ => return None,
        })
    }

    pub fn as_char(self) -> char {
        match self {
            AxisDir::R => 'R',
            AxisDir::L => 'L',
            AxisDir::A => 'A',
            AxisDir::P => 'P',
            AxisDir::S => 'S',
            AxisDir::I => 'I',
        }
    }

    /// World axis (0 = x, 1 = y, 2 = z).
    pub fn world_axis(self) -> usize {
        match self {
            AxisDir::R | AxisDir::L => 0,
            AxisDir::A | AxisDir::P => 1,
            AxisDir::S | AxisDir::I => 2,
        }
    }

    /// +1 when the direction points along the RAS+ world axis.
    pub fn sign(self) -> f64 {
        match self {
            AxisDir::R | AxisDir::A | AxisDir::S => 1.0,
            _ => -1.0,
        }
    }

    pub fn from_world(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => AxisDir::R,
            (0, false) => AxisDir::L,
            (1, true) => AxisDir::A,
            (1, false) => AxisDir::P,
            (2, true) => AxisDir::S,
            _ => AxisDir::I,
        }
    }
}

/// Three-letter axis code such as `RAS` or `LPS`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Orientation(pub [AxisDir; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisDir::R, AxisDir::A, AxisDir::S]);

    pub fn new(axes: [AxisDir; 3]) -> Result<Self> {
        let mut seen = [false; 3];
        for a in axes {
            if std::mem::replace(&mut seen[a.world_axis()], true) {
                return Err(VolumeError::Orientation(format!(
                    "`{}` uses the same world axis twice",
                    axes.iter().map(|a| a.as_char()).collect::<String>()
                )));
            }
        }
        Ok(Orientation(axes))
    }

    /// Unit direction of array axis `k` in world space.
    pub fn direction(&self, k: usize) -> [f64; 3] {
        let mut d = [0.0; 3];
        d[self.0[k].world_axis()] = self.0[k].sign();
        d
    }

    /// All 48 valid codes.
    pub fn all() -> Vec<Orientation> {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut out = Vec::with_capacity(48);
        for p in perms {
            for signs in 0..8 {
                let axes = [0, 1, 2].map(|k| AxisDir::from_world(p[k], signs & (1 << k) == 0));
                out.push(Orientation(axes));
            }
        }
        out
    }
}

impl FromStr for Orientation {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 {
            return Err(VolumeError::Orientation(format!("`{s}` is not a 3-letter axis code")));
        }
        let mut axes = [AxisDir::R; 3];
        for (slot, c) in axes.iter_mut().zip(&chars) {
            *slot = AxisDir::from_char(*c)
                .ok_or_else(|| VolumeError::Orientation(format!("`{c}` in `{s}` is not one of L,R,A,P,S,I")))?;
        }
        Orientation::new(axes)
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for a in self.0 {
            write!(f, "{}", a.as_char())?;
        }
        Ok(())
    }
}

impl Serialize for Orientation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Orientation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U16,
    F32,
}

/// A 3D scalar grid with physical geometry.
///
/// `data` is indexed `[axis0, axis1, axis2]`. Geometric metadata is kept in `f32`, the
/// precision NIfTI stores, so files roundtrip exactly. For `u16` volumes the stored integers
/// live in `data` (as exact `f32` values) and map to physical intensity through
/// `intensity_offset + value * intensity_scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: [f32; 3],
    /// World position (mm) of voxel `(0, 0, 0)`.
    pub origin: [f32; 3],
    pub orientation: Orientation,
    pub dtype: DType,
    pub intensity_offset: f32,
    pub intensity_scale: f32,
}

impl Volume {
    /// An `f32` RAS volume at the world origin.
    pub fn new(data: Array3<f32>, spacing: [f32; 3]) -> Result<Self> {
        let v = Volume {
            data,
            spacing,
            origin: [0.0; 3],
            orientation: Orientation::RAS,
            dtype: DType::F32,
            intensity_offset: 0.0,
            intensity_scale: 1.0,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub fn with_origin(mut self, origin: [f32; 3]) -> Self {
        self.origin = origin;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.shape().iter().any(|&d| d == 0) {
            return Err(VolumeError::Invalid(format!("empty dimension in shape {:?}", self.data.shape())));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::Invalid(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(VolumeError::Invalid("non-finite origin".into()));
        }
        Orientation::new(self.orientation.0)?;
        match self.dtype {
            DType::U16 => {
                if let Some(v) = self.data.iter().find(|&&v| !(0.0..=65535.0).contains(&v) || v.fract() != 0.0) {
                    return Err(VolumeError::Invalid(format!("u16 volume holds non-integer or out-of-range value {v}")));
                }
            }
            DType::F32 => {
                if self.intensity_offset != 0.0 || self.intensity_scale != 1.0 {
                    return Err(VolumeError::Invalid("f32 volumes carry the identity intensity mapping".into()));
                }
            }
        }
        Ok(())
    }

    /// World position (mm) of a continuous voxel index.
    pub fn world(&self, idx: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin.map(f64::from);
        for (k, &i) in idx.iter().enumerate() {
            let d = self.orientation.direction(k);
            for (pw, dw) in p.iter_mut().zip(d) {
                *pw += dw * self.spacing[k] as f64 * i;
            }
        }
        p
    }

    /// Physical intensities (`offset + value * scale` for `u16`).
    pub fn physical(&self) -> Array3<f32> {
        match self.dtype {
            DType::F32 => self.data.clone(),
            DType::U16 => {
                let (o, s) = (self.intensity_offset as f64, self.intensity_scale as f64);
                self.data.mapv(|v| (o + v as f64 * s) as f32)
            }
        }
    }

    /// Same geometry (shape, spacing, origin, orientation).
    pub fn same_geometry(&self, other: &Volume) -> bool {
        self.shape() == other.shape()
            && self.spacing == other.spacing
            && self.origin == other.origin
            && self.orientation == other.orientation
    }
}

/// A time series of geometrically identical frames (e.g. dynamic contrast series).
#[derive(Clone, Debug, PartialEq)]
pub struct Volume4D {
    frames: Vec<Volume>,
}

impl Volume4D {
    pub fn new(frames: Vec<Volume>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(VolumeError::Geometry(format!("a 4D series needs at least 2 frames, got {}", frames.len())));
        }
        let first = &frames[0];
        for (i, f) in frames.iter().enumerate().skip(1) {
            if !f.same_geometry(first) || f.dtype != first.dtype {
                return Err(VolumeError::Geometry(format!("frame {i} geometry differs from frame 0")));
            }
        }
        Ok(Volume4D { frames })
    }

    pub fn t(&self) -> usize {
        self.frames.len()
    }

    pub fn frames(&self) -> &[Volume] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Volume> {
        self.frames
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_codes_parse_and_reject() {
        assert_eq!("RAS".parse::<Orientation>().unwrap(), Orientation::RAS);
        assert_eq!("lps".parse::<Orientation>().unwrap().to_string(), "LPS");
        assert!("RLS".parse::<Orientation>().is_err());
        assert!("RA".parse::<Orientation>().is_err());
        assert!("RAX".parse::<Orientation>().is_err());
        let all = Orientation::all();
        assert_eq!(all.len(), 48);
        let uniq: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), 48);
    }

    #[test]
    fn u16_volume_rejects_fractional_values() {
        let mut v = Volume::new(Array3::from_elem((2, 2, 2), 1.5), [1.0; 3]).unwrap();
        v.dtype = DType::U16;
        assert!(v.validate().is_err());
        v.data.fill(3.0);
        assert!(v.validate().is_ok());
    }

    #[test]
    fn world_follows_axis_directions() {
        let v = Volume::new(Array3::zeros((4, 4, 4)), [2.0, 1.0, 3.0])
            .unwrap()
            .with_orientation("LPS".parse().unwrap())
            .with_origin([10.0, 0.0, 0.0]);
        assert_eq!(v.world([1.0, 2.0, 1.0]), [8.0, -2.0, 3.0]);
    }
}
