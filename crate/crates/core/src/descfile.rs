//! `DSC1` descriptor interchange files.
//!
//! Layout (little endian): magic `DSC1`, kind `u8` (2 or 3), count `u64`,
//! dim `u32`, then `count` records. A 2D record is `u, v` as `f64`, scale and
//! orientation as `f32`, then `dim` `f32` values. A 3D record is `x, y, z` as
//! `f64` then `dim` `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::features2d::{Descriptor2D, Keypoint2D};
use crate::features3d::{Descriptor3D, Keypoint3D};
use crate::geometry::Vec3;

const MAGIC: &[u8; 4] = b"DSC1";
const HEADER_LEN: usize = 4 + 1 + 8 + 4;

/// Image keypoints with their descriptors, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescSet2D {
    pub dim: usize,
    pub keypoints: Vec<Keypoint2D>,
    pub values: Vec<f32>,
}

/// Cloud keypoint positions with their descriptors, row-major.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DescSet3D {
    pub dim: usize,
    pub positions: Vec<Vec3>,
    pub values: Vec<f32>,
}

impl DescSet2D {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps only valid descriptors.
    pub fn from_features(keypoints: &[Keypoint2D], descriptors: &[Descriptor2D], dim: usize) -> Result<Self> {
        let mut out = DescSet2D {
            dim,
            ..Default::default()
        };
        for (k, d) in keypoints.iter().zip(descriptors).filter(|(_, d)| d.valid) {
            if d.values.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: d.values.len() });
            }
            out.keypoints.push(*k);
            out.values.extend(d.values.iter().map(|&v| v as f32));
        }
        Ok(out)
    }
}

impl DescSet3D {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Keeps only usable descriptors (valid or low-energy).
    pub fn from_features(keypoints: &[Keypoint3D], descriptors: &[Descriptor3D], dim: usize) -> Result<Self> {
        let mut out = DescSet3D {
            dim,
            ..Default::default()
        };
        for (k, d) in keypoints.iter().zip(descriptors).filter(|(_, d)| d.is_usable()) {
            if d.values.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: d.values.len() });
            }
            out.positions.push(k.position);
            out.values.extend(d.values.iter().map(|&v| v as f32));
        }
        Ok(out)
    }
}

fn header(kind: u8, count: usize, dim: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(kind);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out
}

pub fn encode_desc2d(set: &DescSet2D) -> Vec<u8> {
    let mut out = header(2, set.len(), set.dim);
    for (i, k) in set.keypoints.iter().enumerate() {
        out.extend_from_slice(&k.u.to_le_bytes());
        out.extend_from_slice(&k.v.to_le_bytes());
        out.extend_from_slice(&(k.scale as f32).to_le_bytes());
        out.extend_from_slice(&(k.orientation as f32).to_le_bytes());
        for v in set.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn encode_desc3d(set: &DescSet3D) -> Vec<u8> {
    let mut out = header(3, set.len(), set.dim);
    for (i, p) in set.positions.iter().enumerate() {
        for c in p.iter() {
            out.extend_from_slice(&c.to_le_bytes());
        }
        for v in set.row(i) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let bytes = self
            .data
            .get(self.pos..end)
            .ok_or_else(|| Error::parse("DSC1", format!("byte {}", self.pos), "truncated record"))?;
        self.pos = end;
        Ok(bytes.try_into().expect("length checked"))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

fn decode_header(data: &[u8]) -> Result<(u8, usize, usize, Reader<'_>)> {
    if data.len() < HEADER_LEN || &data[..4] != MAGIC {
        return Err(Error::parse("DSC1", "byte 0", "missing DSC1 header"));
    }
    let kind = data[4];
    let count = u64::from_le_bytes(data[5..13].try_into().expect("length checked"));
    let dim = u32::from_le_bytes(data[13..17].try_into().expect("length checked")) as usize;
    if kind != 2 && kind != 3 {
        return Err(Error::parse("DSC1", "byte 4", format!("unknown kind {kind}")));
    }
    // Both record kinds carry 24 bytes of keypoint data.
    let record = 24 + 4 * dim;
    let expected = (count as u128) * record as u128 + HEADER_LEN as u128;
    if expected != data.len() as u128 {
        return Err(Error::parse(
            "DSC1",
            format!("byte {}", data.len()),
            format!("header declares {count} records of {record} bytes, file has {} payload bytes", data.len() - HEADER_LEN),
        ));
    }
    Ok((kind, count as usize, dim, Reader { data, pos: HEADER_LEN }))
}

pub fn decode_desc2d(data: &[u8]) -> Result<DescSet2D> {
    let (kind, count, dim, mut r) = decode_header(data)?;
    if kind != 2 {
        return Err(Error::parse("DSC1", "byte 4", format!("expected 2D descriptors, found kind {kind}")));
    }
    let mut set = DescSet2D {
        dim,
        keypoints: Vec::with_capacity(count),
        values: Vec::with_capacity(count * dim),
    };
    for _ in 0..count {
        let (u, v) = (r.f64()?, r.f64()?);
        let (scale, orientation) = (r.f32()? as f64, r.f32()? as f64);
        set.keypoints.push(Keypoint2D { u, v, scale, orientation });
        for _ in 0..dim {
            set.values.push(r.f32()?);
        }
    }
    Ok(set)
}

pub fn decode_desc3d(data: &[u8]) -> Result<DescSet3D> {
    let (kind, count, dim, mut r) = decode_header(data)?;
    if kind != 3 {
        return Err(Error::parse("DSC1", "byte 4", format!("expected 3D descriptors, found kind {kind}")));
    }
    let mut set = DescSet3D {
        dim,
        positions: Vec::with_capacity(count),
        values: Vec::with_capacity(count * dim),
    };
    for _ in 0..count {
        set.positions.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
        for _ in 0..dim {
            set.values.push(r.f32()?);
        }
    }
    Ok(set)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_desc2d(path: impl AsRef<Path>) -> Result<DescSet2D> {
    decode_desc2d(&read(path.as_ref())?)
}

pub fn read_desc3d(path: impl AsRef<Path>) -> Result<DescSet3D> {
    decode_desc3d(&read(path.as_ref())?)
}

pub fn write_desc2d(path: impl AsRef<Path>, set: &DescSet2D) -> Result<()> {
    write(path.as_ref(), &encode_desc2d(set))
}

pub fn write_desc3d(path: impl AsRef<Path>, set: &DescSet3D) -> Result<()> {
    write(path.as_ref(), &encode_desc3d(set))
}
