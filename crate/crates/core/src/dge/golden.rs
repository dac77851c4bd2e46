//! Little-endian array records for golden files.
//!
//! Each record is `b"DGE1"`, a `u32` rank, `rank` × `u32` extents and then
//! the row-major values as `f32`. A file holds one or more records back to
//! back.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DGE1";

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_records(records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in records {
        if r.dims.iter().product::<usize>() != r.data.len() {
            return Err(Error::DimensionMismatch(format!("{} values for {:?}", r.data.len(), r.dims)));
        }
        out.extend_from_slice(MAGIC);
        let mut word = [0u8; 4];
        LittleEndian::write_u32(&mut word, r.dims.len() as u32);
        out.extend_from_slice(&word);
        for &d in &r.dims {
            LittleEndian::write_u32(&mut word, d as u32);
            out.extend_from_slice(&word);
        }
        for &v in &r.data {
            LittleEndian::write_f32(&mut word, v as f32);
            out.extend_from_slice(&word);
        }
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut pos = 0;
    let mut out = Vec::new();
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Truncated { expected: *pos + n, found: bytes.len() });
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    while pos < bytes.len() {
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Parse("bad DGE1 record magic".into()));
        }
        let rank = LittleEndian::read_u32(take(&mut pos, 4)?) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(LittleEndian::read_u32(take(&mut pos, 4)?) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(&mut pos, n * 4)?;
        let data = raw.chunks_exact(4).map(|c| LittleEndian::read_f32(c) as f64).collect();
        out.push(Record { dims, data });
    }
    Ok(out)
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::MissingInput { path: path.to_path_buf(), source })?;
    decode_records(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_documented_bytes() {
        let bytes = encode_records(&[Record { dims: vec![2], data: vec![1.0, -2.0] }]).unwrap();
        let mut want = b"DGE1".to_vec();
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1f32.to_le_bytes());
        want.extend_from_slice(&(-2f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn multi_record_round_trip() {
        let recs = vec![
            Record { dims: vec![2, 3], data: vec![0.5, 1.5, 2.5, 3.5, 4.5, 5.5] },
            Record { dims: vec![1], data: vec![7.0] },
        ];
        assert_eq!(decode_records(&encode_records(&recs).unwrap()).unwrap(), recs);
        let bytes = encode_records(&recs).unwrap();
        assert!(decode_records(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_records(b"XXXX").is_err());
    }
}
