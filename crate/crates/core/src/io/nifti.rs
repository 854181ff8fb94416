//! Single-file NIfTI-1 volumes (`.nii`, `.nii.gz`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion};

use crate::error::{Error, Result};
use crate::volume::{GridSpec, Volume};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";
/// Largest deviation from orthonormality for which a q-form is written.
const QFORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl NiftiDatatype {
    pub fn code(self) -> i16 {
        match self {
            NiftiDatatype::Uint8 => 2,
            NiftiDatatype::Int16 => 4,
            NiftiDatatype::Float32 => 16,
            NiftiDatatype::Float64 => 64,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(NiftiDatatype::Uint8),
            4 => Ok(NiftiDatatype::Int16),
            16 => Ok(NiftiDatatype::Float32),
            64 => Ok(NiftiDatatype::Float64),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            NiftiDatatype::Uint8 => 1,
            NiftiDatatype::Int16 => 2,
            NiftiDatatype::Float32 => 4,
            NiftiDatatype::Float64 => 8,
        }
    }
}

/// The header fields this codec reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: NiftiDatatype,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub qform_code: i16,
    pub sform_code: i16,
    /// `quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z`.
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
    pub big_endian: bool,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big: bool,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[at..at + N]);
        if self.big {
            a.reverse();
        }
        a
    }

    fn i16(&self, at: usize) -> i16 {
        i16::from_le_bytes(self.arr(at))
    }

    fn f32(&self, at: usize) -> f32 {
        f32::from_le_bytes(self.arr(at))
    }
}

impl NiftiHeader {
    /// Parses the first 348 bytes; byte order is detected from `sizeof_hdr`.
    pub fn parse(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < HEADER_SIZE {
            return Err(corrupt(format!("{} bytes, shorter than a NIfTI-1 header", bytes.len())));
        }
        let big = match (
            i32::from_le_bytes(bytes[0..4].try_into().unwrap()),
            i32::from_be_bytes(bytes[0..4].try_into().unwrap()),
        ) {
            (348, _) => false,
            (_, 348) => true,
            (n, _) => return Err(Error::Format(format!("{}: sizeof_hdr is {n}, not 348", path.display()))),
        };
        let c = Cursor { bytes, big };
        let magic = &bytes[344..348];
        if magic == b"ni1\0" {
            return Err(Error::Format(format!("{}: header/image pairs are not supported", path.display())));
        }
        if magic != MAGIC {
            return Err(Error::Format(format!("{}: bad magic {magic:?}", path.display())));
        }
        let dim: [i16; 8] = std::array::from_fn(|k| c.i16(40 + 2 * k));
        let datatype = NiftiDatatype::from_code(c.i16(70))?;
        let pixdim: [f32; 8] = std::array::from_fn(|k| c.f32(76 + 4 * k));
        let quatern: [f32; 6] = std::array::from_fn(|k| c.f32(256 + 4 * k));
        let srow: [[f32; 4]; 3] = std::array::from_fn(|r| std::array::from_fn(|k| c.f32(280 + 16 * r + 4 * k)));
        let h = Self {
            dim,
            datatype,
            pixdim,
            vox_offset: c.f32(108),
            scl_slope: c.f32(112),
            scl_inter: c.f32(116),
            qform_code: c.i16(252),
            sform_code: c.i16(254),
            quatern,
            srow,
            big_endian: big,
        };
        if !(1..=7).contains(&h.dim[0]) || h.dim[1..=h.dim[0] as usize].iter().any(|&d| d < 1) {
            return Err(corrupt(format!("invalid dim field {:?}", h.dim)));
        }
        if !(h.vox_offset >= HEADER_SIZE as f32) || h.vox_offset.fract() != 0.0 {
            return Err(corrupt(format!("invalid vox_offset {}", h.vox_offset)));
        }
        Ok(h)
    }

    /// Little-endian header for `vol` with an s-form (and a q-form when the
    /// linear part is a rotation times voxel sizes).
    pub fn for_volume(vol: &Volume, datatype: NiftiDatatype) -> Result<Self> {
        let g = vol.grid();
        let d = g.dims();
        let channels = vol.channels();
        let mut dim = [1i16; 8];
        dim[0] = if channels > 1 { 4 } else { 3 };
        for (k, &n) in d.iter().chain(std::iter::once(&channels)).enumerate() {
            dim[k + 1] = i16::try_from(n).map_err(|_| Error::Data(format!("axis length {n} exceeds NIfTI-1 limits")))?;
        }
        let a = g.affine();
        let srow = std::array::from_fn(|r| std::array::from_fn(|k| a[(r, k)] as f32));
        let sizes = g.voxel_sizes();
        let mut pixdim = [1.0f32; 8];
        for k in 0..3 {
            pixdim[k + 1] = sizes[k] as f32;
        }
        let (qform_code, quatern) = match qform_of(a) {
            Some((q, qfac)) => {
                pixdim[0] = qfac as f32;
                (1, q)
            }
            None => (0, [0.0; 6]),
        };
        Ok(Self {
            dim,
            datatype,
            pixdim,
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            qform_code,
            sform_code: 1,
            quatern,
            srow,
            big_endian: false,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_SIZE];
        let mut put = |at: usize, v: &[u8]| b[at..at + v.len()].copy_from_slice(v);
        put(0, &348i32.to_le_bytes());
        for (k, v) in self.dim.iter().enumerate() {
            put(40 + 2 * k, &v.to_le_bytes());
        }
        put(70, &self.datatype.code().to_le_bytes());
        put(72, &(8 * self.datatype.size() as i16).to_le_bytes());
        for (k, v) in self.pixdim.iter().enumerate() {
            put(76 + 4 * k, &v.to_le_bytes());
        }
        put(108, &self.vox_offset.to_le_bytes());
        put(112, &self.scl_slope.to_le_bytes());
        put(116, &self.scl_inter.to_le_bytes());
        // xyzt_units: millimetres
        put(123, &[2]);
        put(252, &self.qform_code.to_le_bytes());
        put(254, &self.sform_code.to_le_bytes());
        for (k, v) in self.quatern.iter().enumerate() {
            put(256 + 4 * k, &v.to_le_bytes());
        }
        for (r, row) in self.srow.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                put(280 + 16 * r + 4 * k, &v.to_le_bytes());
            }
        }
        put(344, MAGIC);
        b
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        std::array::from_fn(|k| if (k as i16) < self.dim[0] { self.dim[k + 1] as usize } else { 1 })
    }

    /// Product of the dimensions beyond the third.
    pub fn channels(&self) -> usize {
        (4..=self.dim[0] as usize).map(|k| self.dim[k] as usize).product()
    }

    /// Voxel-to-world affine: s-form, else q-form, else voxel sizes on the diagonal.
    pub fn affine(&self) -> Matrix4<f64> {
        if self.sform_code > 0 {
            let mut m = Matrix4::identity();
            for r in 0..3 {
                for k in 0..4 {
                    m[(r, k)] = self.srow[r][k] as f64;
                }
            }
            return m;
        }
        let size = |k: usize| {
            let p = self.pixdim[k] as f64;
            if p > 0.0 {
                p
            } else {
                1.0
            }
        };
        let mut m = Matrix4::identity();
        if self.qform_code > 0 {
            let [b, c, d, x, y, z] = self.quatern.map(|v| v as f64);
            let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
            let r = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(a, b, c, d)).to_rotation_matrix();
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let s = Matrix3::from_diagonal(&nalgebra::Vector3::new(size(1), size(2), qfac * size(3)));
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r.matrix() * s));
            m[(0, 3)] = x;
            m[(1, 3)] = y;
            m[(2, 3)] = z;
        } else {
            for k in 0..3 {
                m[(k, k)] = size(k + 1);
            }
        }
        m
    }
}

/// Quaternion parameters and `qfac` when the linear part of `a` is a
/// rotation (possibly with a flipped third axis) times positive scales.
fn qform_of(a: &Matrix4<f64>) -> Option<([f32; 6], f64)> {
    let l = a.fixed_view::<3, 3>(0, 0).into_owned();
    let mut r = l;
    for k in 0..3 {
        let n = l.column(k).norm();
        r.column_mut(k).scale_mut(1.0 / n);
    }
    let qfac = if r.determinant() < 0.0 { -1.0 } else { 1.0 };
    r.column_mut(2).scale_mut(qfac);
    if (r.transpose() * r - Matrix3::identity()).amax() > QFORM_TOL {
        return None;
    }
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
    Some((
        [q.i as f32, q.j as f32, q.k as f32, a[(0, 3)] as f32, a[(1, 3)] as f32, a[(2, 3)] as f32],
        qfac,
    ))
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

fn load(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if !is_gzip(&raw) {
        return Ok(raw);
    }
    let mut out = Vec::new();
    GzDecoder::new(raw.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("gzip stream: {e}"),
        })?;
    Ok(out)
}

/// Reads the header of a `.nii` or `.nii.gz` file.
pub fn read_header(path: &Path) -> Result<NiftiHeader> {
    NiftiHeader::parse(&load(path)?, path)
}

/// Reads a volume. Stored values are mapped through `slope · v + intercept`
/// when the slope is nonzero; dimensions past the third become channels.
pub fn read_nifti(path: &Path) -> Result<Volume> {
    let bytes = load(path)?;
    let h = NiftiHeader::parse(&bytes, path)?;
    let dims = h.spatial_dims();
    let channels = h.channels();
    let nvox: usize = dims.iter().product();
    let size = h.datatype.size();
    let start = h.vox_offset as usize;
    let need = start + nvox * channels * size;
    if bytes.len() < need {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("{} bytes, expected at least {need}", bytes.len()),
        });
    }
    let c = Cursor {
        bytes: &bytes,
        big: h.big_endian,
    };
    let value = |k: usize| -> f64 {
        let at = start + k * size;
        match h.datatype {
            NiftiDatatype::Uint8 => bytes[at] as f64,
            NiftiDatatype::Int16 => c.i16(at) as f64,
            NiftiDatatype::Float32 => c.f32(at) as f64,
            NiftiDatatype::Float64 => f64::from_le_bytes(c.arr(at)),
        }
    };
    let scale = h.scl_slope != 0.0 && (h.scl_slope != 1.0 || h.scl_inter != 0.0);
    let (slope, inter) = (h.scl_slope as f64, h.scl_inter as f64);
    let mut data = vec![0.0; nvox * channels];
    for ch in 0..channels {
        for i in 0..nvox {
            let v = value(ch * nvox + i);
            data[i * channels + ch] = if scale { slope * v + inter } else { v };
        }
    }
    let grid = GridSpec::new(dims, h.affine())?;
    Volume::new(grid, channels, data).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Encodes `vol` as an uncompressed little-endian single-file image.
pub fn encode_nifti(vol: &Volume, datatype: NiftiDatatype) -> Result<Vec<u8>> {
    let h = NiftiHeader::for_volume(vol, datatype)?;
    let channels = vol.channels();
    let nvox = vol.grid().num_voxels();
    let mut out = h.to_bytes();
    out.resize(VOX_OFFSET, 0);
    out.reserve(nvox * channels * datatype.size());
    let data = vol.data();
    for ch in 0..channels {
        for i in 0..nvox {
            let v = data[i * channels + ch];
            match datatype {
                NiftiDatatype::Float64 => out.extend_from_slice(&v.to_le_bytes()),
                NiftiDatatype::Float32 => {
                    let f = v as f32;
                    if !f.is_finite() {
                        return Err(Error::Data(format!("value {v} overflows float32")));
                    }
                    out.extend_from_slice(&f.to_le_bytes());
                }
                NiftiDatatype::Int16 => {
                    if v.fract() != 0.0 || v < i16::MIN as f64 || v > i16::MAX as f64 {
                        return Err(Error::Data(format!("value {v} is not representable as int16")));
                    }
                    out.extend_from_slice(&(v as i16).to_le_bytes());
                }
                NiftiDatatype::Uint8 => {
                    if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
                        return Err(Error::Data(format!("value {v} is not representable as uint8")));
                    }
                    out.push(v as u8);
                }
            }
        }
    }
    Ok(out)
}

/// Writes `vol`; a path ending in `.gz` is gzip-compressed.
pub fn write_nifti(vol: &Volume, path: &Path, datatype: NiftiDatatype) -> Result<()> {
    let bytes = encode_nifti(vol, datatype)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let payload = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, payload).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> GridSpec {
        GridSpec::isotropic([3, 2, 2], 1.5, [-2.0, 1.0, 0.5]).unwrap()
    }

    #[test]
    fn qform_of_a_rotated_grid_reproduces_the_affine() {
        let r = Rotation3::from_euler_angles(0.3, -0.2, 0.7).to_homogeneous();
        let mut a = r * Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(1.0, 2.0, 0.5));
        a[(0, 3)] = 4.0;
        let vol = Volume::zeros(GridSpec::new([2, 2, 2], a).unwrap(), 1);
        let mut h = NiftiHeader::for_volume(&vol, NiftiDatatype::Float32).unwrap();
        h.sform_code = 0;
        assert_eq!(h.qform_code, 1);
        assert!((h.affine() - a).amax() < 1e-6);
    }

    #[test]
    fn flipped_axis_uses_negative_qfac() {
        let a = Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(-1.0, 1.0, 1.0));
        let vol = Volume::zeros(GridSpec::new([2, 2, 2], a).unwrap(), 1);
        let mut h = NiftiHeader::for_volume(&vol, NiftiDatatype::Float32).unwrap();
        assert_eq!(h.pixdim[0], -1.0);
        h.sform_code = 0;
        assert!((h.affine() - a).amax() < 1e-6);
    }

    #[test]
    fn sheared_grid_has_no_qform() {
        let mut a = Matrix4::identity();
        a[(0, 1)] = 0.3;
        let vol = Volume::zeros(GridSpec::new([2, 2, 2], a).unwrap(), 1);
        let h = NiftiHeader::for_volume(&vol, NiftiDatatype::Float32).unwrap();
        assert_eq!(h.qform_code, 0);
    }

    #[test]
    fn pixdim_fallback() {
        let vol = Volume::zeros(grid(), 1);
        let mut h = NiftiHeader::for_volume(&vol, NiftiDatatype::Float32).unwrap();
        h.sform_code = 0;
        h.qform_code = 0;
        assert_eq!(h.affine(), Matrix4::new_nonuniform_scaling(&nalgebra::Vector3::new(1.5, 1.5, 1.5)));
    }

    #[test]
    fn lossy_integer_writes_are_refused() {
        let vol = Volume::new(grid(), 1, vec![0.5; 12]).unwrap();
        assert!(matches!(encode_nifti(&vol, NiftiDatatype::Int16), Err(Error::Data(_))));
        let vol = Volume::new(grid(), 1, vec![300.0; 12]).unwrap();
        assert!(matches!(encode_nifti(&vol, NiftiDatatype::Uint8), Err(Error::Data(_))));
    }
}
