//! Single-file NIfTI-1 (`.nii`, optionally `.nii.gz`) reading and writing.
//!
//! Only little-endian, axis-aligned 3D images are handled. Readable
//! datatypes are uint8, int16, int32 and float32; `scl_slope` and
//! `scl_inter` are applied on read (a zero slope means no scaling). Images
//! and probability maps are written as float32, masks as uint8.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ilpforge_core::{Geometry, Grid, MaskVolume, ProbVolume, Volume3};
use thiserror::Error;

use crate::error::{ToolError, ToolResult};

pub const HEADER_SIZE: usize = 348;
/// Header plus the four-byte extension flag.
pub const VOX_OFFSET: usize = 352;

pub const DT_UINT8: i16 = 2;
pub const DT_INT16: i16 = 4;
pub const DT_INT32: i16 = 8;
pub const DT_FLOAT32: i16 = 16;

const AXIS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum NiftiError {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("data section holds {actual} bytes, header dimensions need {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("oblique orientation is not supported")]
    Oblique,
    #[error("gzip stream: {0}")]
    Gzip(String),
    #[error("{0}")]
    Content(String),
}

/// Decoded image: geometry plus scaled voxel values.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiData {
    pub geometry: Geometry,
    pub datatype: i16,
    pub values: Vec<f64>,
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

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Rotation matrix of the qform quaternion (b, c, d), `a` implied.
fn quaternion_matrix(b: f64, c: f64, d: f64) -> [[f64; 3]; 3] {
    let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ]
}

fn is_axis_aligned(m: &[[f64; 3]; 3]) -> bool {
    (0..3).all(|r| {
        let scale = (0..3).map(|c| m[r][c].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        (0..3).all(|c| r == c || m[r][c].abs() <= AXIS_TOLERANCE * scale)
    })
}

/// Decodes an uncompressed or gzip-compressed NIfTI-1 byte stream.
pub fn decode(bytes: &[u8]) -> Result<NiftiData, NiftiError> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw).map_err(|e| NiftiError::Gzip(e.to_string()))?;
        return decode(&raw);
    }
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::CorruptHeader(format!("{} bytes, a header needs {HEADER_SIZE}", bytes.len())));
    }
    let sizeof_hdr = i32_at(bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        let msg = if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            "big-endian files are not supported".to_string()
        } else {
            format!("sizeof_hdr is {sizeof_hdr}")
        };
        return Err(NiftiError::CorruptHeader(msg));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(NiftiError::CorruptHeader("magic is not 'n+1' (only single-file NIfTI-1 is supported)".into()));
    }

    let ndim = i16_at(bytes, 40);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::CorruptHeader(format!("dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for k in 1..=ndim as usize {
        let d = i16_at(bytes, 40 + 2 * k);
        if d < 1 {
            return Err(NiftiError::CorruptHeader(format!("dim[{k}] = {d}")));
        }
        if k <= 3 {
            dims[k - 1] = d as usize;
        } else if d != 1 {
            return Err(NiftiError::CorruptHeader("only 3D images are supported".into()));
        }
    }

    let datatype = i16_at(bytes, 70);
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };

    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let p = f32_at(bytes, 80 + 4 * a) as f64;
        *s = if p.is_finite() && p != 0.0 { p.abs() } else { 1.0 };
    }

    let qform = i16_at(bytes, 252);
    let sform = i16_at(bytes, 254);
    let mut origin = [0.0; 3];
    if sform > 0 {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(bytes, 280 + 16 * r + 4 * c) as f64;
            }
            origin[r] = f32_at(bytes, 280 + 16 * r + 12) as f64;
        }
        if !is_axis_aligned(&m) {
            return Err(NiftiError::Oblique);
        }
    } else if qform > 0 {
        let q = |off| f32_at(bytes, off) as f64;
        if !is_axis_aligned(&quaternion_matrix(q(256), q(260), q(264))) {
            return Err(NiftiError::Oblique);
        }
        origin = [q(268), q(272), q(276)];
    }

    let vox_offset = f32_at(bytes, 108);
    if !(vox_offset >= HEADER_SIZE as f32 && vox_offset.fract() == 0.0) {
        return Err(NiftiError::CorruptHeader(format!("vox_offset = {vox_offset}")));
    }
    let start = vox_offset as usize;
    let n = dims.iter().product::<usize>();
    let expected = n * width;
    let actual = bytes.len().saturating_sub(start);
    if actual < expected {
        return Err(NiftiError::DimensionMismatch { expected, actual });
    }

    let mut slope = f32_at(bytes, 112) as f64;
    let mut inter = f32_at(bytes, 116) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
        inter = 0.0;
    }
    if !inter.is_finite() {
        inter = 0.0;
    }

    let data = &bytes[start..start + expected];
    let raw: Vec<f64> = match datatype {
        DT_UINT8 => data.iter().map(|&v| v as f64).collect(),
        DT_INT16 => data.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect(),
        DT_INT32 => data.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
        _ => data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
    };
    let values = if slope == 1.0 && inter == 0.0 { raw } else { raw.into_iter().map(|v| v * slope + inter).collect() };

    let geometry = Geometry::new(dims, spacing, origin).map_err(|e| NiftiError::CorruptHeader(e.to_string()))?;
    Ok(NiftiData { geometry, datatype, values })
}

/// Encodes a header and data section with an identity (axis-aligned) qform
/// and sform.
fn encode(geom: &Geometry, datatype: i16, payload: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    put_i16(&mut h, 40, 3);
    for k in 0..7 {
        let d = if k < 3 { geom.dims[k] as i16 } else { 1 };
        put_i16(&mut h, 42 + 2 * k, d);
    }
    let bitpix = if datatype == DT_UINT8 { 8 } else { 32 };
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    put_f32(&mut h, 76, 1.0);
    for a in 0..3 {
        put_f32(&mut h, 80 + 4 * a, geom.spacing[a] as f32);
    }
    put_f32(&mut h, 108, VOX_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    h[123] = 2; // millimetres
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    for a in 0..3 {
        put_f32(&mut h, 268 + 4 * a, geom.origin[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 4 * a, geom.spacing[a] as f32);
        put_f32(&mut h, 280 + 16 * a + 12, geom.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(payload);
    h
}

pub fn encode_f32(geom: &Geometry, data: &[f32]) -> Vec<u8> {
    let payload: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    encode(geom, DT_FLOAT32, &payload)
}

pub fn encode_u8(geom: &Geometry, data: &[u8]) -> Vec<u8> {
    encode(geom, DT_UINT8, data)
}

fn read_file(path: &Path) -> ToolResult<NiftiData> {
    let bytes = fs::read(path).map_err(|e| ToolError::io(path, e))?;
    decode(&bytes).map_err(|source| ToolError::Nifti { path: path.to_path_buf(), source })
}

fn check_writable(geom: &Geometry, path: &Path) -> ToolResult<()> {
    if geom.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(ToolError::format(path, "NIfTI-1 dimensions are limited to 32767"));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: Vec<u8>) -> ToolResult<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&bytes).and_then(|_| enc.finish()).map_err(|e| ToolError::io(path, e))?
    } else {
        bytes
    };
    fs::write(path, out).map_err(|e| ToolError::io(path, e))
}

fn content_error(path: &Path, msg: String) -> ToolError {
    ToolError::Nifti { path: path.to_path_buf(), source: NiftiError::Content(msg) }
}

/// Reads an image in HU. Values must be finite.
pub fn read_volume(path: impl AsRef<Path>) -> ToolResult<Volume3> {
    let path = path.as_ref();
    let d = read_file(path)?;
    let data: Vec<f32> = d.values.iter().map(|&v| v as f32).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(content_error(path, "image contains non-finite values".into()));
    }
    Ok(Volume3::new(d.geometry, data)?)
}

/// Reads a label image; values must be integers in 0..=255.
pub fn read_mask(path: impl AsRef<Path>) -> ToolResult<MaskVolume> {
    let path = path.as_ref();
    let d = read_file(path)?;
    let mut data = Vec::with_capacity(d.values.len());
    for &v in &d.values {
        if !(v.fract() == 0.0 && (0.0..=255.0).contains(&v)) {
            return Err(content_error(path, format!("mask value {v} is not a label in 0..=255")));
        }
        data.push(v as u8);
    }
    Ok(Grid::new(d.geometry, data)?)
}

/// Reads a probability map; values must lie in [0, 1].
pub fn read_prob(path: impl AsRef<Path>) -> ToolResult<ProbVolume> {
    let path = path.as_ref();
    let d = read_file(path)?;
    let data: Vec<f32> = d.values.iter().map(|&v| v as f32).collect();
    ProbVolume::new(d.geometry, data).map_err(|e| content_error(path, e.to_string()))
}

pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>) -> ToolResult<()> {
    check_writable(vol.geometry(), path.as_ref())?;
    write_file(path.as_ref(), encode_f32(vol.geometry(), vol.data()))
}

pub fn write_prob(prob: &ProbVolume, path: impl AsRef<Path>) -> ToolResult<()> {
    let grid: &Grid<f32> = prob;
    check_writable(grid.geometry(), path.as_ref())?;
    write_file(path.as_ref(), encode_f32(grid.geometry(), grid.data()))
}

pub fn write_mask(mask: &MaskVolume, path: impl AsRef<Path>) -> ToolResult<()> {
    check_writable(mask.geometry(), path.as_ref())?;
    write_file(path.as_ref(), encode_u8(mask.geometry(), mask.data()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry {
        Geometry::new([3, 2, 2], [0.5, 1.0, 2.0], [-10.0, 4.0, 7.5]).unwrap()
    }

    #[test]
    fn float_round_trip_bytes() {
        let data: Vec<f32> = (0..12).map(|i| i as f32 * 1.5 - 3.0).collect();
        let d = decode(&encode_f32(&geom(), &data)).unwrap();
        assert_eq!(d.geometry, geom());
        assert_eq!(d.datatype, DT_FLOAT32);
        assert_eq!(d.values, data.iter().map(|&v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn header_errors() {
        let bytes = encode_u8(&geom(), &[1; 12]);
        assert!(matches!(decode(&bytes[..100]), Err(NiftiError::CorruptHeader(_))));
        assert_eq!(decode(&bytes[..VOX_OFFSET + 5]), Err(NiftiError::DimensionMismatch { expected: 12, actual: 5 }));

        let mut bad = bytes.clone();
        bad[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert_eq!(decode(&bad), Err(NiftiError::UnsupportedDatatype(64)));

        let mut swapped = bytes.clone();
        swapped[0..4].copy_from_slice(&348i32.to_be_bytes());
        assert!(matches!(decode(&swapped), Err(NiftiError::CorruptHeader(m)) if m.contains("big-endian")));

        let mut four_d = bytes.clone();
        four_d[40..42].copy_from_slice(&4i16.to_le_bytes());
        four_d[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode(&four_d), Err(NiftiError::CorruptHeader(_))));
    }

    #[test]
    fn oblique_rejected() {
        let mut bytes = encode_u8(&geom(), &[0; 12]);
        // 30 degree rotation in the sform
        let (s, c) = (0.5f32, 0.866_025_4f32);
        for (off, v) in [(280, c), (284, -s), (296, s), (300, c)] {
            bytes[off..off + 4].copy_from_slice(&v.to_le_bytes());
        }
        assert_eq!(decode(&bytes), Err(NiftiError::Oblique));

        let mut q = encode_u8(&geom(), &[0; 12]);
        q[254..256].copy_from_slice(&0i16.to_le_bytes());
        q[264..268].copy_from_slice(&0.3f32.to_le_bytes());
        assert_eq!(decode(&q), Err(NiftiError::Oblique));
        // 180 degree flip about z is still axis aligned
        q[264..268].copy_from_slice(&1.0f32.to_le_bytes());
        assert!(decode(&q).is_ok());
    }

    #[test]
    fn quaternion_identity() {
        let m = quaternion_matrix(0.0, 0.0, 0.0);
        assert_eq!(m, [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }
}
