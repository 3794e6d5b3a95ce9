//! Assembly of 2D slice stacks (a stand-in for DICOM series) into volumes.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::{AxisDir, DType, Orientation, Result, Volume, Volume4D, VolumeError};

/// Relative slice-spacing irregularity tolerated when inferring the through-plane spacing.
pub const SPACING_TOLERANCE: f64 = 0.01;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesSlice {
    /// Rows along array axis 0, columns along axis 1.
    pub pixels: Array2<f32>,
    /// World position (RAS+ mm) of pixel `(0, 0)`.
    pub position: [f64; 3],
    /// Orders slices sharing a position (frames of a time series).
    #[serde(default)]
    pub temporal_index: u32,
}

/// An unordered collection of parallel slices sharing in-plane geometry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeriesStack {
    pub slices: Vec<SeriesSlice>,
    /// World direction of increasing row index (array axis 0).
    pub row_dir: [f64; 3],
    /// World direction of increasing column index (array axis 1).
    pub col_dir: [f64; 3],
    /// Spacing along rows and columns (mm).
    pub pixel_spacing: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub enum StackOutput {
    Volume(Volume),
    Series(Volume4D),
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn snap(v: [f64; 3], what: &str) -> Result<AxisDir> {
    let norm = dot(v, v).sqrt();
    let (i, m) = v
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, m)| (i, *m))
        .unwrap();
    if norm == 0.0 || m.abs() / norm < std::f64::consts::FRAC_1_SQRT_2 {
        return Err(VolumeError::Orientation(format!("{what} direction {v:?} is oblique beyond 45 degrees")));
    }
    Ok(AxisDir::from_world(i, m > 0.0))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sorts slices along the slice normal and stacks them into a volume, or into a 4D series
/// when every position is shared by the same number `t > 1` of slices.
pub fn stack_to_volume(stack: &SeriesStack) -> Result<StackOutput> {
    let n = stack.slices.len();
    if n < 2 {
        return Err(VolumeError::Geometry(format!("need at least 2 slices, got {n}")));
    }
    let shape = stack.slices[0].pixels.dim();
    if let Some((i, s)) = stack.slices.iter().enumerate().find(|(_, s)| s.pixels.dim() != shape) {
        return Err(VolumeError::Geometry(format!(
            "slice {i} has shape {:?}, slice 0 has {:?}",
            s.pixels.dim(),
            shape
        )));
    }
    if stack.pixel_spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(VolumeError::Geometry(format!("pixel spacing {:?} must be positive", stack.pixel_spacing)));
    }
    let unit = |v: [f64; 3]| {
        let n = dot(v, v).sqrt();
        v.map(|x| x / n)
    };
    let (rd, cd) = (unit(stack.row_dir), unit(stack.col_dir));
    if dot(rd, cd).abs() > 1e-3 {
        return Err(VolumeError::Geometry("row and column directions are not orthogonal".into()));
    }
    let normal = cross(rd, cd);
    let orientation = Orientation::new([snap(rd, "row")?, snap(cd, "column")?, snap(normal, "slice normal")?])?;

    let mut order: Vec<(f64, u32, usize)> =
        stack.slices.iter().enumerate().map(|(i, s)| (dot(s.position, normal), s.temporal_index, i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // group slices that share a position along the normal
    let eps = 1e-4 * stack.pixel_spacing[0].min(stack.pixel_spacing[1]).max(1e-6);
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NEG_INFINITY;
    for &(p, _, i) in &order {
        if groups.is_empty() || p - last > eps {
            groups.push(vec![i]);
        } else {
            groups.last_mut().unwrap().push(i);
        }
        last = p;
    }
    let t = groups[0].len();
    if let Some(g) = groups.iter().find(|g| g.len() != t) {
        return Err(VolumeError::Geometry(format!(
            "positions hold {} and {} slices; cannot form equal time frames",
            t,
            g.len()
        )));
    }
    if groups.len() < 2 {
        return Err(VolumeError::Geometry("all slices share one position".into()));
    }
    for g in &groups {
        let mut ti: Vec<u32> = g.iter().map(|&i| stack.slices[i].temporal_index).collect();
        ti.dedup();
        if ti.len() != t {
            return Err(VolumeError::Geometry("slices at one position share a temporal index".into()));
        }
    }
    let positions: Vec<f64> = groups.iter().map(|g| dot(stack.slices[g[0]].position, normal)).collect();
    let deltas: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
    let dz = median(deltas.clone());
    if let Some(d) = deltas.iter().find(|&&d| (d - dz).abs() > SPACING_TOLERANCE * dz) {
        return Err(VolumeError::Spacing(format!(
            "slice gap {d:.4} mm deviates from median {dz:.4} mm by more than {:.0}%",
            SPACING_TOLERANCE * 100.0
        )));
    }
    let origin = stack.slices[groups[0][0]].position.map(|v| v as f32);
    let spacing = [stack.pixel_spacing[0] as f32, stack.pixel_spacing[1] as f32, dz as f32];
    let (rows, cols) = shape;
    let nz = groups.len();
    let frames: Vec<Volume> = (0..t)
        .map(|f| {
            let mut data = Array3::<f32>::zeros((rows, cols, nz));
            for (z, g) in groups.iter().enumerate() {
                data.index_axis_mut(ndarray::Axis(2), z).assign(&stack.slices[g[f]].pixels);
            }
            Volume {
                data,
                spacing,
                origin,
                orientation,
                dtype: DType::F32,
                intensity_offset: 0.0,
                intensity_scale: 1.0,
            }
        })
        .collect();
    for f in &frames {
        f.validate()?;
    }
    if t == 1 {
        Ok(StackOutput::Volume(frames.into_iter().next().unwrap()))
    } else {
        Ok(StackOutput::Series(Volume4D::new(frames)?))
    }
}
