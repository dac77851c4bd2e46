//! NIfTI-1 single-file (`.nii` / `.nii.gz`) reading and writing.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{DataType, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

fn dtype_from_code(code: i16) -> Result<DataType> {
    Ok(match code {
        DT_UINT8 => DataType::Uint8,
        DT_INT16 => DataType::Int16,
        DT_FLOAT32 => DataType::Float32,
        DT_FLOAT64 => DataType::Float64,
        other => return Err(Error::UnsupportedFormat(format!("datatype code {other}"))),
    })
}

fn dtype_code(dtype: DataType) -> (i16, i16) {
    match dtype {
        DataType::Uint8 => (DT_UINT8, 8),
        DataType::Int16 => (DT_INT16, 16),
        DataType::Float32 => (DT_FLOAT32, 32),
        DataType::Float64 => (DT_FLOAT64, 64),
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::MissingInput { path: path.to_path_buf(), source })?;
    read_nifti_bytes(&bytes)
}

/// Parses an in-memory `.nii` or `.nii.gz` image (gzip is auto-detected).
pub fn read_nifti_bytes(bytes: &[u8]) -> Result<Volume> {
    if is_gzip(bytes) {
        let mut raw = Vec::new();
        GzDecoder::new(bytes).read_to_end(&mut raw)?;
        return parse(&raw);
    }
    parse(bytes)
}

fn parse(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Truncated { expected: HEADER_SIZE, found: bytes.len() });
    }
    let le = LittleEndian::read_i16(&bytes[40..42]);
    let be = BigEndian::read_i16(&bytes[40..42]);
    if (1..=7).contains(&le) {
        parse_with::<LittleEndian>(bytes)
    } else if (1..=7).contains(&be) {
        parse_with::<BigEndian>(bytes)
    } else {
        Err(Error::UnsupportedFormat(format!("dim[0] out of range ({le} / {be})")))
    }
}

fn parse_with<B: ByteOrder>(bytes: &[u8]) -> Result<Volume> {
    let i16_at = |off: usize| B::read_i16(&bytes[off..off + 2]);
    let f32_at = |off: usize| B::read_f32(&bytes[off..off + 4]) as f64;

    let sizeof_hdr = B::read_i32(&bytes[0..4]);
    if sizeof_hdr != HEADER_SIZE as i32 {
        return Err(Error::UnsupportedFormat(format!("sizeof_hdr = {sizeof_hdr}")));
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?} (only single-file NIfTI-1 is supported)",
            String::from_utf8_lossy(&magic[..3])
        )));
    }

    let ndim = i16_at(40) as usize;
    let mut dims = Vec::with_capacity(ndim);
    for k in 1..=ndim {
        let d = i16_at(40 + 2 * k);
        if d < 1 {
            return Err(Error::UnsupportedFormat(format!("dim[{k}] = {d}")));
        }
        dims.push(d as usize);
    }
    while dims.len() > 4 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() > 4 {
        return Err(Error::UnsupportedFormat(format!("{}-dimensional image", dims.len())));
    }

    let dtype = dtype_from_code(i16_at(70))?;
    let pixdim: Vec<f64> = (0..8).map(|k| f32_at(76 + 4 * k)).collect();
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_SIZE as f64) {
        return Err(Error::UnsupportedFormat(format!("vox_offset {vox_offset}")));
    }
    let vox_offset = vox_offset as usize;
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);

    let qform_code = i16_at(252);
    let sform_code = i16_at(254);
    let affine = if sform_code > 0 {
        let mut a = [[0.0; 4]; 4];
        for (r, row) in a.iter_mut().take(3).enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f32_at(280 + 16 * r + 4 * c);
            }
        }
        a[3][3] = 1.0;
        a
    } else if qform_code > 0 {
        let quat = [f32_at(256), f32_at(260), f32_at(264)];
        let offset = [f32_at(268), f32_at(272), f32_at(276)];
        quatern_to_affine(quat, offset, [pixdim[1], pixdim[2], pixdim[3]], pixdim[0])
    } else {
        let mut a = [[0.0; 4]; 4];
        for k in 0..3 {
            a[k][k] = if pixdim[k + 1] > 0.0 { pixdim[k + 1] } else { 1.0 };
        }
        a[3][3] = 1.0;
        a
    };

    let n: usize = dims.iter().product();
    let width = dtype_code(dtype).1 as usize / 8;
    let expected = vox_offset + n * width;
    if bytes.len() < expected {
        return Err(Error::Truncated { expected, found: bytes.len() });
    }
    let raw = &bytes[vox_offset..expected];
    let mut data: Vec<f64> = match dtype {
        DataType::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        DataType::Int16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DataType::Float32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DataType::Float64 => raw.chunks_exact(8).map(B::read_f64).collect(),
    };
    if scl_slope != 0.0 && scl_slope.is_finite() && !(scl_slope == 1.0 && scl_inter == 0.0) {
        let inter = if scl_inter.is_finite() { scl_inter } else { 0.0 };
        for v in &mut data {
            *v = *v * scl_slope + inter;
        }
    }

    let spacing = (0..dims.len())
        .map(|k| {
            let p = pixdim[k + 1].abs();
            if p > 0.0 {
                p
            } else {
                1.0
            }
        })
        .collect();
    Ok(Volume { dims, spacing, affine, dtype, data })
}

/// Quaternion parameters to a voxel-to-world matrix (NIfTI-1 method 2).
fn quatern_to_affine(q: [f64; 3], offset: [f64; 3], pix: [f64; 3], qfac: f64) -> [[f64; 4]; 4] {
    let [mut b, mut c, mut d] = q;
    let rem = 1.0 - (b * b + c * c + d * d);
    // Header quaternions are float32, so a half-turn can leave a tiny
    // positive remainder. Treat it as a = 0 and renormalise (b, c, d).
    let a = if rem < 1e-7 {
        let n = (b * b + c * c + d * d).sqrt();
        b /= n;
        c /= n;
        d /= n;
        0.0
    } else {
        rem.sqrt()
    };
    let r = [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ];
    let qfac = if qfac < 0.0 { -1.0 } else { 1.0 };
    let scale = [
        if pix[0] > 0.0 { pix[0] } else { 1.0 },
        if pix[1] > 0.0 { pix[1] } else { 1.0 },
        if pix[2] > 0.0 { pix[2] } else { 1.0 } * qfac,
    ];
    let mut out = [[0.0; 4]; 4];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = r[i][j] * scale[j];
        }
        out[i][3] = offset[i];
    }
    out[3][3] = 1.0;
    out
}

/// Rotation part of an affine as NIfTI quaternion `(b, c, d)` plus `qfac`.
fn affine_to_quatern(m: &[[f64; 4]; 4]) -> ([f64; 3], f64) {
    let mut r = [[0.0; 3]; 3];
    for j in 0..3 {
        let len = (m[0][j] * m[0][j] + m[1][j] * m[1][j] + m[2][j] * m[2][j]).sqrt();
        let len = if len > 0.0 { len } else { 1.0 };
        for i in 0..3 {
            r[i][j] = m[i][j] / len;
        }
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    let qfac = if det < 0.0 {
        for row in r.iter_mut() {
            row[2] = -row[2];
        }
        -1.0
    } else {
        1.0
    };
    let trace = r[0][0] + r[1][1] + r[2][2];
    let (a, b, c, d);
    if trace > 0.5 {
        a = 0.5 * (1.0 + trace).sqrt();
        b = 0.25 * (r[2][1] - r[1][2]) / a;
        c = 0.25 * (r[0][2] - r[2][0]) / a;
        d = 0.25 * (r[1][0] - r[0][1]) / a;
    } else {
        let xd = 1.0 + r[0][0] - (r[1][1] + r[2][2]);
        let yd = 1.0 + r[1][1] - (r[0][0] + r[2][2]);
        let zd = 1.0 + r[2][2] - (r[0][0] + r[1][1]);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r[0][1] + r[1][0]) / b;
            d = 0.25 * (r[0][2] + r[2][0]) / b;
            a = 0.25 * (r[2][1] - r[1][2]) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r[0][1] + r[1][0]) / c;
            d = 0.25 * (r[1][2] + r[2][1]) / c;
            a = 0.25 * (r[0][2] - r[2][0]) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r[0][2] + r[2][0]) / d;
            c = 0.25 * (r[1][2] + r[2][1]) / d;
            a = 0.25 * (r[1][0] - r[0][1]) / d;
        }
    }
    let s = if a < 0.0 { -1.0 } else { 1.0 };
    ([s * b, s * c, s * d], qfac)
}

fn check_range(v: f64, lo: f64, hi: f64, dtype: DataType) -> Result<f64> {
    let r = v.round();
    if !v.is_finite() || r < lo || r > hi {
        return Err(Error::Overflow { value: v, dtype: dtype.name() });
    }
    Ok(r)
}

/// Serializes a volume as little-endian NIfTI-1 with the given sample type.
pub fn write_nifti_bytes(v: &Volume, dtype: DataType) -> Result<Vec<u8>> {
    let n: usize = v.dims.iter().product();
    if v.dims.is_empty() || v.dims.len() > 4 || n != v.data.len() {
        return Err(Error::DimensionMismatch(format!("{} samples for extents {:?}", v.data.len(), v.dims)));
    }
    let (code, bitpix) = dtype_code(dtype);
    let mut buf = vec![0u8; VOX_OFFSET + n * bitpix as usize / 8];
    let h = &mut buf[..VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    h[38] = b'r';
    LittleEndian::write_i16(&mut h[40..42], v.dims.len() as i16);
    for k in 0..7 {
        let d = v.dims.get(k).copied().unwrap_or(1);
        if d > i16::MAX as usize {
            return Err(Error::DimensionMismatch(format!("extent {d} too large for NIfTI-1")));
        }
        LittleEndian::write_i16(&mut h[42 + 2 * k..44 + 2 * k], d as i16);
    }
    LittleEndian::write_i16(&mut h[70..72], code);
    LittleEndian::write_i16(&mut h[72..74], bitpix);

    let (quat, qfac) = affine_to_quatern(&v.affine);
    let mut pixdim = [0.0f32; 8];
    pixdim[0] = qfac as f32;
    for k in 0..7 {
        pixdim[k + 1] = v.spacing.get(k).copied().unwrap_or(1.0) as f32;
    }
    for (k, p) in pixdim.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * k..80 + 4 * k], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    LittleEndian::write_f32(&mut h[116..120], 0.0);
    // mm + seconds
    h[123] = 2 | 8;
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for (k, q) in quat.iter().enumerate() {
        LittleEndian::write_f32(&mut h[256 + 4 * k..260 + 4 * k], *q as f32);
    }
    for k in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * k..272 + 4 * k], v.affine[k][3] as f32);
    }
    for r in 0..3 {
        for c in 0..4 {
            LittleEndian::write_f32(&mut h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c], v.affine[r][c] as f32);
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");

    let body = &mut buf[VOX_OFFSET..];
    match dtype {
        DataType::Uint8 => {
            for (dst, &x) in body.iter_mut().zip(&v.data) {
                *dst = check_range(x, 0.0, 255.0, dtype)? as u8;
            }
        }
        DataType::Int16 => {
            for (dst, &x) in body.chunks_exact_mut(2).zip(&v.data) {
                LittleEndian::write_i16(dst, check_range(x, i16::MIN as f64, i16::MAX as f64, dtype)? as i16);
            }
        }
        DataType::Float32 => {
            for (dst, &x) in body.chunks_exact_mut(4).zip(&v.data) {
                if x.is_finite() && x.abs() > f32::MAX as f64 {
                    return Err(Error::Overflow { value: x, dtype: dtype.name() });
                }
                LittleEndian::write_f32(dst, x as f32);
            }
        }
        DataType::Float64 => {
            for (dst, &x) in body.chunks_exact_mut(8).zip(&v.data) {
                LittleEndian::write_f64(dst, x);
            }
        }
    }
    Ok(buf)
}

/// Writes a volume; a `.gz` extension selects gzip compression.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>, dtype: DataType) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_nifti_bytes(v, dtype)?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let mut file = fs::File::create(path)?;
    if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(&bytes)?;
        enc.finish()?;
    } else {
        file.write_all(&bytes)?;
    }
    Ok(())
}
