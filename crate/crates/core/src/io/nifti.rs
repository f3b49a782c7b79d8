//! Single-file NIfTI-1 reader and writer for the subset this toolkit uses:
//! uncompressed little-endian `.nii`, float32 images and fields, int16 labels,
//! affine restricted to diagonal spacing plus origin.
//!
//! Vector fields and multi-channel feature volumes are stored 5-D with the
//! components along dimension 5. NIfTI orders voxels with the first axis
//! fastest; in memory the last axis is fastest, so payloads are transposed.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::volume::{GridGeometry, LabelVolume, ScalarVolume, Vec3, VectorField};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;
const INTENT_VECTOR: i16 = 1007;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported endianness (big-endian file)")]
    UnsupportedEndianness,
    #[error("unsupported compression (gzip stream)")]
    UnsupportedCompression,
    #[error("unsupported feature: {0}")]
    UnsupportedFeature(String),
    #[error("payload size mismatch: header implies {expected} bytes, file holds {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("wrong volume kind: {0}")]
    WrongKind(String),
}

impl NiftiError {
    /// Stable numeric code per error kind.
    pub fn code(&self) -> u8 {
        match self {
            NiftiError::MalformedHeader(_) => 10,
            NiftiError::UnsupportedDatatype(_) => 11,
            NiftiError::UnsupportedEndianness => 12,
            NiftiError::UnsupportedCompression => 13,
            NiftiError::UnsupportedFeature(_) => 14,
            NiftiError::SizeMismatch { .. } => 15,
            NiftiError::WrongKind(_) => 16,
        }
    }
}

/// A parsed file: geometry, the component count along dimension 5 and the
/// raw payload converted to f64, component-major then in-memory voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    pub geometry: GridGeometry,
    pub components: usize,
    pub datatype: i16,
    pub data: Vec<f64>,
}

/// Values a `.nii` file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeData {
    Scalar(ScalarVolume),
    Vector(VectorField),
    Labels(LabelVolume),
    Channels(Vec<ScalarVolume>),
}

fn put_i16(buf: &mut [u8], at: usize, v: i16) {
    buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(buf: &mut [u8], at: usize, v: i32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(buf: &mut [u8], at: usize, v: f32) {
    buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
}
fn get_i16(buf: &[u8], at: usize) -> i16 {
    i16::from_le_bytes([buf[at], buf[at + 1]])
}
fn get_i32(buf: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}
fn get_f32(buf: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(buf[at..at + 4].try_into().unwrap())
}

fn header(geometry: &GridGeometry, components: usize, datatype: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    put_i32(&mut h, 0, HEADER_SIZE as i32);
    h[38] = b'r'; // regular
    let dims: [i16; 8] = if components > 1 {
        [5, geometry.shape[0] as i16, geometry.shape[1] as i16, geometry.shape[2] as i16, 1, components as i16, 1, 1]
    } else {
        [3, geometry.shape[0] as i16, geometry.shape[1] as i16, geometry.shape[2] as i16, 1, 1, 1, 1]
    };
    for (n, d) in dims.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * n, *d);
    }
    if components == 3 {
        put_i16(&mut h, 68, INTENT_VECTOR);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, if datatype == DT_INT16 { 16 } else { 32 });
    let pixdim = [1.0, geometry.spacing[0], geometry.spacing[1], geometry.spacing[2], 1.0, 1.0, 1.0, 1.0];
    for (n, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * n, *p as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0); // scl_slope
    h[123] = 2; // mm
    put_i16(&mut h, 252, 0); // qform_code
    put_i16(&mut h, 254, 1); // sform_code
    for axis in 0..3 {
        let at = 280 + 16 * axis;
        for c in 0..3 {
            put_f32(&mut h, at + 4 * c, if c == axis { geometry.spacing[axis] as f32 } else { 0.0 });
        }
        put_f32(&mut h, at + 12, geometry.origin[axis] as f32);
    }
    h[344..348].copy_from_slice(MAGIC);
    h
}

/// Encode a volume: header, four-byte extension flag, payload.
pub fn encode(value: &VolumeData) -> std::result::Result<Vec<u8>, NiftiError> {
    let (geometry, comps, dtype): (GridGeometry, Vec<Vec<f64>>, i16) = match value {
        VolumeData::Scalar(v) => (v.geometry, vec![v.data.clone()], DT_FLOAT32),
        VolumeData::Vector(f) => {
            (f.geometry, (0..3).map(|c| f.data.iter().map(|d| d[c]).collect()).collect(), DT_FLOAT32)
        }
        VolumeData::Labels(l) => {
            if l.data.iter().any(|&x| x > i16::MAX as u16) {
                return Err(NiftiError::UnsupportedFeature("label value exceeds int16".into()));
            }
            (l.geometry, vec![l.data.iter().map(|&x| x as f64).collect()], DT_INT16)
        }
        VolumeData::Channels(ch) => {
            let first = ch.first().ok_or_else(|| NiftiError::WrongKind("no channels".into()))?;
            (first.geometry, ch.iter().map(|c| c.data.clone()).collect(), DT_FLOAT32)
        }
    };
    if geometry.shape.iter().any(|&n| n > i16::MAX as usize) {
        return Err(NiftiError::UnsupportedFeature("dimension exceeds int16".into()));
    }
    let mut out = header(&geometry, comps.len(), dtype);
    let [n0, n1, n2] = geometry.shape;
    let elem = if dtype == DT_INT16 { 2 } else { 4 };
    out.reserve(comps.len() * geometry.len() * elem);
    for comp in &comps {
        for k in 0..n2 {
            for j in 0..n1 {
                for i in 0..n0 {
                    let v = comp[geometry.index(i, j, k)];
                    if dtype == DT_INT16 {
                        out.extend_from_slice(&(v as i16).to_le_bytes());
                    } else {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Parse and validate a NIfTI-1 byte stream.
pub fn decode(bytes: &[u8]) -> std::result::Result<NiftiVolume, NiftiError> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        return Err(NiftiError::UnsupportedCompression);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::MalformedHeader(format!("file is only {} bytes", bytes.len())));
    }
    let sizeof_hdr = get_i32(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(NiftiError::UnsupportedEndianness);
        }
        return Err(NiftiError::MalformedHeader(format!("sizeof_hdr is {sizeof_hdr}")));
    }
    if &bytes[344..348] != MAGIC {
        return Err(NiftiError::MalformedHeader("magic is not n+1".into()));
    }
    let dim: Vec<i16> = (0..8).map(|n| get_i16(bytes, 40 + 2 * n)).collect();
    let ndim = dim[0];
    if !(3..=5).contains(&ndim) {
        return Err(NiftiError::UnsupportedFeature(format!("{ndim}-dimensional volume")));
    }
    if dim[1..=ndim as usize].iter().any(|&d| d < 1) {
        return Err(NiftiError::MalformedHeader(format!("invalid dims {dim:?}")));
    }
    let time = if ndim >= 4 { dim[4] } else { 1 };
    if time != 1 {
        return Err(NiftiError::UnsupportedFeature("time series".into()));
    }
    let components = if ndim == 5 { dim[5] as usize } else { 1 };
    let datatype = get_i16(bytes, 70);
    let bitpix = get_i16(bytes, 72);
    let elem = match datatype {
        DT_FLOAT32 => 4,
        DT_INT16 => 2,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    if bitpix as usize != elem * 8 {
        return Err(NiftiError::MalformedHeader(format!("bitpix {bitpix} does not match datatype")));
    }
    let slope = get_f32(bytes, 112);
    let inter = get_f32(bytes, 116);
    if !(slope == 0.0 || slope == 1.0) || inter != 0.0 {
        return Err(NiftiError::UnsupportedFeature("intensity scaling".into()));
    }
    let vox_offset = get_f32(bytes, 108);
    if !(vox_offset >= VOX_OFFSET as f32) || vox_offset.fract() != 0.0 {
        return Err(NiftiError::MalformedHeader(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let shape = [dim[1] as usize, dim[2] as usize, dim[3] as usize];
    let pix: Vec<f32> = (0..4).map(|n| get_f32(bytes, 76 + 4 * n)).collect();
    let sform = get_i16(bytes, 254);
    let mut spacing = [pix[1] as f64, pix[2] as f64, pix[3] as f64];
    let mut origin = [0.0; 3];
    if sform > 0 {
        for axis in 0..3 {
            let at = 280 + 16 * axis;
            for c in 0..3 {
                let v = get_f32(bytes, at + 4 * c) as f64;
                if c != axis && v != 0.0 {
                    return Err(NiftiError::UnsupportedFeature("non-diagonal affine".into()));
                }
                if c == axis {
                    spacing[axis] = v;
                }
            }
            origin[axis] = get_f32(bytes, at + 12) as f64;
        }
    } else {
        origin = [get_f32(bytes, 268) as f64, get_f32(bytes, 272) as f64, get_f32(bytes, 276) as f64];
    }
    let geometry = GridGeometry::new(shape, spacing, origin)
        .map_err(|e| NiftiError::MalformedHeader(format!("geometry: {e}")))?;
    let voxels = geometry.len();
    let expected = vox_offset + voxels * components * elem;
    if bytes.len() != expected {
        return Err(NiftiError::SizeMismatch { expected, actual: bytes.len() });
    }
    let payload = &bytes[vox_offset..];
    let mut data = vec![0.0; voxels * components];
    let [n0, n1, n2] = shape;
    let mut pos = 0;
    for c in 0..components {
        for k in 0..n2 {
            for j in 0..n1 {
                for i in 0..n0 {
                    let v = if datatype == DT_INT16 {
                        get_i16(payload, pos) as f64
                    } else {
                        let x = get_f32(payload, pos);
                        if !x.is_finite() {
                            return Err(NiftiError::MalformedHeader("non-finite voxel value".into()));
                        }
                        x as f64
                    };
                    data[c * voxels + geometry.index(i, j, k)] = v;
                    pos += elem;
                }
            }
        }
    }
    Ok(NiftiVolume { geometry, components, datatype, data })
}

impl NiftiVolume {
    pub fn into_volume_data(self) -> std::result::Result<VolumeData, NiftiError> {
        let n = self.geometry.len();
        match (self.datatype, self.components) {
            (DT_INT16, 1) => {
                if self.data.iter().any(|&v| v < 0.0) {
                    return Err(NiftiError::WrongKind("negative label".into()));
                }
                Ok(VolumeData::Labels(LabelVolume {
                    geometry: self.geometry,
                    data: self.data.iter().map(|&v| v as u16).collect(),
                }))
            }
            (DT_FLOAT32, 1) => Ok(VolumeData::Scalar(ScalarVolume { geometry: self.geometry, data: self.data })),
            (DT_FLOAT32, 3) => {
                let data: Vec<Vec3> =
                    (0..n).map(|i| [self.data[i], self.data[n + i], self.data[2 * n + i]]).collect();
                Ok(VolumeData::Vector(VectorField { geometry: self.geometry, data }))
            }
            (DT_FLOAT32, c) => Ok(VolumeData::Channels(
                (0..c)
                    .map(|ch| ScalarVolume { geometry: self.geometry, data: self.data[ch * n..(ch + 1) * n].to_vec() })
                    .collect(),
            )),
            (dt, _) => Err(NiftiError::UnsupportedDatatype(dt)),
        }
    }
}

pub fn read_volume(path: &Path) -> crate::Result<VolumeData> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes)?.into_volume_data()?)
}

pub fn write_volume(value: &VolumeData, path: &Path) -> crate::Result<()> {
    fs::write(path, encode(value)?)?;
    Ok(())
}

pub fn read_scalar(path: &Path) -> crate::Result<ScalarVolume> {
    match read_volume(path)? {
        VolumeData::Scalar(v) => Ok(v),
        VolumeData::Labels(l) => Ok(ScalarVolume { geometry: l.geometry, data: l.data.iter().map(|&x| x as f64).collect() }),
        _ => Err(NiftiError::WrongKind(format!("{} is not a scalar image", path.display())).into()),
    }
}

pub fn read_field(path: &Path) -> crate::Result<VectorField> {
    match read_volume(path)? {
        VolumeData::Vector(v) => Ok(v),
        _ => Err(NiftiError::WrongKind(format!("{} is not a vector field", path.display())).into()),
    }
}

pub fn read_labels(path: &Path) -> crate::Result<LabelVolume> {
    match read_volume(path)? {
        VolumeData::Labels(v) => Ok(v),
        _ => Err(NiftiError::WrongKind(format!("{} is not a label volume", path.display())).into()),
    }
}
