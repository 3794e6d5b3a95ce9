//! Little-endian single-file NIfTI-1 subset.
//!
//! Writes a 348-byte header, a 4-byte empty extension marker and raw voxel data at offset
//! 352, with NIfTI's first-axis-fastest ordering. The sform carries spacing, orientation and
//! origin; the qform is left unset.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ShapeBuilder};

use super::{DType, Orientation, Result, Volume, Volume4D, VolumeError};
use super::AxisDir;

pub const HEADER_BYTES: usize = 352;
const SIZEOF_HDR: i32 = 348;

const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

/// Result of reading a file that may hold either a 3D volume or a 4D series.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiImage {
    Volume(Volume),
    Series(Volume4D),
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    VolumeError::Io { path: path.to_path_buf(), source }
}

struct Header {
    dims: Vec<usize>,
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    scl_slope: f32,
    scl_inter: f32,
    qform_code: i16,
    sform_code: i16,
    srow: [[f32; 4]; 3],
    magic: [u8; 4],
}

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < SIZEOF_HDR as usize {
        return Err(VolumeError::Truncated { expected: SIZEOF_HDR as u64, actual: b.len() as u64 });
    }
    let sizeof_hdr = i32_at(b, 0);
    if sizeof_hdr != SIZEOF_HDR {
        if sizeof_hdr.swap_bytes() == SIZEOF_HDR {
            return Err(VolumeError::Format("big-endian files are not supported".into()));
        }
        return Err(VolumeError::Format(format!("sizeof_hdr is {sizeof_hdr}, expected 348")));
    }
    let magic: [u8; 4] = b[344..348].try_into().unwrap();
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(VolumeError::Format(format!("bad magic {magic:?}")));
    }
    let ndim = i16_at(b, 40);
    if !(3..=4).contains(&ndim) {
        return Err(VolumeError::CorruptHeader(format!("dim[0] = {ndim}, expected 3 or 4")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    for k in 1..=ndim as usize {
        let d = i16_at(b, 40 + 2 * k);
        if d < 1 {
            return Err(VolumeError::CorruptHeader(format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    let datatype = i16_at(b, 70);
    let bitpix = i16_at(b, 72);
    let expected_bits = match datatype {
        DT_INT16 | DT_UINT16 => 16,
        DT_FLOAT32 => 32,
        other => return Err(VolumeError::UnsupportedDtype(other)),
    };
    if bitpix != expected_bits {
        return Err(VolumeError::CorruptHeader(format!("bitpix {bitpix} does not match datatype {datatype}")));
    }
    let mut pixdim = [0f32; 8];
    for (k, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(b, 76 + 4 * k);
    }
    for k in 1..=3 {
        if !(pixdim[k] > 0.0 && pixdim[k].is_finite()) {
            return Err(VolumeError::CorruptHeader(format!("pixdim[{k}] = {} is not positive", pixdim[k])));
        }
    }
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(b, 280 + 16 * r + 4 * c);
        }
    }
    Ok(Header {
        dims,
        datatype,
        pixdim,
        vox_offset: f32_at(b, 108),
        scl_slope: f32_at(b, 112),
        scl_inter: f32_at(b, 116),
        qform_code: i16_at(b, 252),
        sform_code: i16_at(b, 254),
        srow,
        magic,
    })
}

/// Orientation and origin from the header's spatial transform.
fn geometry(h: &Header) -> Result<(Orientation, [f32; 3])> {
    if h.sform_code > 0 {
        let mut axes = [AxisDir::R; 3];
        for (k, axis) in axes.iter_mut().enumerate() {
            let col = [h.srow[0][k] as f64, h.srow[1][k] as f64, h.srow[2][k] as f64];
            let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (dom, val) = col
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .map(|(i, v)| (i, *v))
                .unwrap();
            if norm == 0.0 || val.abs() / norm < std::f64::consts::FRAC_1_SQRT_2 {
                return Err(VolumeError::Orientation(format!(
                    "axis {k} is oblique by more than 45 degrees (sform column {col:?})"
                )));
            }
            *axis = AxisDir::from_world(dom, val > 0.0);
        }
        let o = Orientation::new(axes)?;
        Ok((o, [h.srow[0][3], h.srow[1][3], h.srow[2][3]]))
    } else if h.qform_code > 0 {
        Err(VolumeError::Orientation("qform-only files are not supported; an sform is required".into()))
    } else {
        // no transform at all: voxel axes coincide with RAS
        Ok((Orientation::RAS, [0.0; 3]))
    }
}

fn data_path(path: &Path, h: &Header) -> PathBuf {
    if &h.magic == b"ni1\0" {
        path.with_extension("img")
    } else {
        path.to_path_buf()
    }
}

/// Reads a 3D volume, or a 4D series, from disk.
pub fn read_nifti_any(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let h = parse_header(&bytes)?;
    let (orientation, origin) = geometry(&h)?;
    let single = &h.magic == b"n+1\0";
    let offset = if single {
        if !(h.vox_offset >= SIZEOF_HDR as f32) || h.vox_offset.fract() != 0.0 {
            return Err(VolumeError::CorruptHeader(format!("vox_offset {} is invalid", h.vox_offset)));
        }
        h.vox_offset as usize
    } else {
        h.vox_offset.max(0.0) as usize
    };
    let img_bytes;
    let payload: &[u8] = if single {
        &bytes
    } else {
        let p = data_path(path, &h);
        img_bytes = fs::read(&p).map_err(|e| io_err(&p, e))?;
        &img_bytes
    };
    let spatial = [h.dims[0], h.dims[1], h.dims[2]];
    let t = h.dims.get(3).copied().unwrap_or(1);
    let n_frame = spatial.iter().product::<usize>();
    let bpv = if h.datatype == DT_FLOAT32 { 4 } else { 2 };
    let needed = offset + n_frame * t * bpv;
    if payload.len() < needed {
        return Err(VolumeError::Truncated { expected: needed as u64, actual: payload.len() as u64 });
    }
    let raw = &payload[offset..needed];
    let values: Vec<f32> = match h.datatype {
        DT_FLOAT32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
        DT_UINT16 => raw.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as f32).collect(),
        _ => raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f32).collect(),
    };
    if h.datatype != DT_UINT16 && values.iter().any(|v| !v.is_finite()) {
        return Err(VolumeError::CorruptHeader("non-finite voxel values".into()));
    }
    let scaled = h.scl_slope != 0.0 && h.scl_slope.is_finite() && !(h.scl_slope == 1.0 && h.scl_inter == 0.0);
    let (dtype, offset_i, scale_i) = if h.datatype == DT_UINT16 {
        // stored integers stay as they are; the scaling becomes the intensity mapping
        if h.scl_slope.is_finite() && h.scl_inter.is_finite() && (h.scl_slope != 0.0 || h.scl_inter != 0.0) {
            (DType::U16, h.scl_inter, h.scl_slope)
        } else {
            (DType::U16, 0.0, 1.0)
        }
    } else {
        (DType::F32, 0.0, 1.0)
    };
    let mut frames = Vec::with_capacity(t);
    for f in 0..t {
        let chunk = values[f * n_frame..(f + 1) * n_frame].to_vec();
        let mut data = Array3::from_shape_vec(spatial.f(), chunk)
            .map_err(|e| VolumeError::CorruptHeader(e.to_string()))?
            .as_standard_layout()
            .to_owned();
        if dtype == DType::F32 && scaled {
            let (s, i) = (h.scl_slope as f64, h.scl_inter as f64);
            data.mapv_inplace(|v| (v as f64 * s + i) as f32);
        }
        frames.push(Volume {
            data,
            spacing: [h.pixdim[1], h.pixdim[2], h.pixdim[3]],
            origin,
            orientation,
            dtype,
            intensity_offset: offset_i,
            intensity_scale: scale_i,
        });
    }
    if frames.len() == 1 {
        Ok(NiftiImage::Volume(frames.pop().unwrap()))
    } else {
        Ok(NiftiImage::Series(Volume4D::new(frames)?))
    }
}

/// Reads a 3D volume; a file holding a 4D series is reported as [`VolumeError::Is4D`].
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    match read_nifti_any(path)? {
        NiftiImage::Volume(v) => Ok(v),
        NiftiImage::Series(s) => Err(VolumeError::Is4D { t: s.t() }),
    }
}

pub fn read_nifti_4d(path: impl AsRef<Path>) -> Result<Volume4D> {
    match read_nifti_any(path)? {
        NiftiImage::Series(s) => Ok(s),
        NiftiImage::Volume(_) => Err(VolumeError::Geometry("file holds a single 3D volume".into())),
    }
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn encode(frames: &[&Volume]) -> Result<Vec<u8>> {
    let v = frames[0];
    v.validate()?;
    let [nx, ny, nz] = v.shape();
    for (i, &d) in [nx, ny, nz].iter().enumerate() {
        if d > i16::MAX as usize {
            return Err(VolumeError::Invalid(format!("axis {i} length {d} exceeds NIfTI-1 limits")));
        }
    }
    let t = frames.len();
    let (datatype, bitpix, bpv) = match v.dtype {
        DType::U16 => (DT_UINT16, 16i16, 2usize),
        DType::F32 => (DT_FLOAT32, 32, 4),
    };
    let n = nx * ny * nz;
    let mut b = vec![0u8; HEADER_BYTES + n * t * bpv];
    put_i32(&mut b, 0, SIZEOF_HDR);
    b[38] = b'r';
    let ndim: i16 = if t > 1 { 4 } else { 3 };
    let dims = [ndim, nx as i16, ny as i16, nz as i16, t as i16, 1, 1, 1];
    for (k, &d) in dims.iter().enumerate() {
        put_i16(&mut b, 40 + 2 * k, d);
    }
    put_i16(&mut b, 70, datatype);
    put_i16(&mut b, 72, bitpix);
    let pixdim = [1.0, v.spacing[0], v.spacing[1], v.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (k, &p) in pixdim.iter().enumerate() {
        put_f32(&mut b, 76 + 4 * k, p);
    }
    put_f32(&mut b, 108, HEADER_BYTES as f32);
    put_f32(&mut b, 112, v.intensity_scale);
    put_f32(&mut b, 116, v.intensity_offset);
    b[123] = if t > 1 { 10 } else { 2 };
    put_i16(&mut b, 254, 1);
    for k in 0..3 {
        let dir = v.orientation.direction(k);
        for r in 0..3 {
            put_f32(&mut b, 280 + 16 * r + 4 * k, dir[r] as f32 * v.spacing[k]);
        }
    }
    for r in 0..3 {
        put_f32(&mut b, 280 + 16 * r + 12, v.origin[r]);
    }
    b[344..348].copy_from_slice(b"n+1\0");
    let mut off = HEADER_BYTES;
    for f in frames {
        // NIfTI order: first axis fastest
        for &x in f.data.t().iter() {
            match v.dtype {
                DType::U16 => b[off..off + 2].copy_from_slice(&(x as u16).to_le_bytes()),
                DType::F32 => b[off..off + 4].copy_from_slice(&x.to_le_bytes()),
            }
            off += bpv;
        }
    }
    Ok(b)
}

pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(&[vol])?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn write_nifti_4d(series: &Volume4D, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let frames: Vec<&Volume> = series.frames().iter().collect();
    let bytes = encode(&frames)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hand_packed_u16(datatype: i16) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (k, d) in [3i16, 4, 4, 2, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * k..42 + 2 * k].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        for k in 0..4 {
            b[76 + 4 * k..80 + 4 * k].copy_from_slice(&1f32.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for v in 0u16..32 {
            b.extend_from_slice(&(v * 100).to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_hand_packed_u16_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        fs::write(&p, hand_packed_u16(512)).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.shape(), [4, 4, 2]);
        assert_eq!(v.dtype, DType::U16);
        assert_eq!(v.orientation, Orientation::RAS);
        // first axis fastest on disk
        assert_eq!(v.data[[1, 0, 0]], 100.0);
        assert_eq!(v.data[[0, 1, 0]], 400.0);
        assert_eq!(v.data[[0, 0, 1]], 1600.0);
        assert_eq!(v.data[[3, 3, 1]], 3100.0);
    }

    #[test]
    fn rejects_uint8() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let mut b = hand_packed_u16(2);
        b[72..74].copy_from_slice(&8i16.to_le_bytes());
        fs::write(&p, b).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::UnsupportedDtype(2))));
    }

    #[test]
    fn rejects_bad_magic_and_pixdim() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.nii");
        let mut b = hand_packed_u16(512);
        b[344..348].copy_from_slice(b"xyz\0");
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::Format(_))));
        let mut b = hand_packed_u16(512);
        b[80..84].copy_from_slice(&0f32.to_le_bytes());
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::CorruptHeader(_))));
    }

    #[test]
    fn zero_f32_volume_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.nii");
        let v = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        write_nifti(&v, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 352 + 32);
    }

    #[test]
    fn u16_header_constants() {
        let mut v = Volume::new(Array3::from_elem((2, 3, 2), 7.0), [1.0; 3]).unwrap();
        v.dtype = DType::U16;
        let b = encode(&[&v]).unwrap();
        assert_eq!(i16_at(&b, 70), 512);
        assert_eq!(i16_at(&b, 72), 16);
        assert_eq!(f32_at(&b, 108), 352.0);
        assert_eq!(&b[344..348], b"n+1\0");
        assert_eq!(b.len(), 352 + 12 * 2);
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        let v = Volume::new(Array3::zeros((3, 3, 3)), [1.0; 3]).unwrap();
        write_nifti(&v, &p).unwrap();
        let mut b = fs::read(&p).unwrap();
        b.pop();
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::Truncated { .. })));
    }

    #[test]
    fn oblique_sform_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("o.nii");
        let v = Volume::new(Array3::zeros((2, 2, 2)), [1.0; 3]).unwrap();
        let mut b = encode(&[&v]).unwrap();
        // rotate axis 0 by 60 degrees in the x-y plane
        put_f32(&mut b, 280, 0.5);
        put_f32(&mut b, 296, 0.866);
        fs::write(&p, &b).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::Orientation(_))));
    }

    #[test]
    fn series_roundtrip_and_dispatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let frames: Vec<Volume> = (0..3)
            .map(|i| Volume::new(Array3::from_elem((2, 3, 4), i as f32), [1.5, 1.0, 2.0]).unwrap())
            .collect();
        let s = Volume4D::new(frames).unwrap();
        write_nifti_4d(&s, &p).unwrap();
        assert!(matches!(read_nifti(&p), Err(VolumeError::Is4D { t: 3 })));
        assert_eq!(read_nifti_4d(&p).unwrap(), s);
    }

    #[test]
    fn int16_widens_and_applies_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("i.nii");
        let mut b = hand_packed_u16(4);
        b.truncate(352);
        for v in 0i16..32 {
            b.extend_from_slice(&(v - 16).to_le_bytes());
        }
        b[112..116].copy_from_slice(&2f32.to_le_bytes());
        b[116..120].copy_from_slice(&1f32.to_le_bytes());
        fs::write(&p, &b).unwrap();
        let v = read_nifti(&p).unwrap();
        assert_eq!(v.dtype, DType::F32);
        assert_eq!(v.data[[0, 0, 0]], -31.0);
        assert_eq!(v.data[[3, 3, 1]], 31.0);
    }
}
