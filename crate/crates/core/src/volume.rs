//! 3-D intensity volumes and region label maps, with their binary file formats.
//!
//! `OBV1`: magic, 3×u32 dims, 3×f32 spacing (mm), then `x·y·z` f32 intensities.
//! `OBM1`: same header, then `x·y·z` u16 region labels. All little-endian,
//! row-major with z fastest.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &[u8; 4] = b"OBV1";
pub const MASK_MAGIC: &[u8; 4] = b"OBM1";

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f32; 3],
    intensities: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionMask {
    dims: [usize; 3],
    spacing: [f32; 3],
    labels: Vec<u16>,
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::Schema(format!("volume dims must be positive, got {:?}", dims)));
    }
    if dims[0] * dims[1] * dims[2] != len {
        return Err(Error::Schema(format!("dims {:?} need {} voxels, got {}", dims, dims.iter().product::<usize>(), len)));
    }
    Ok(())
}

impl Volume3D {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], intensities: Vec<f32>) -> Result<Self> {
        check_dims(dims, intensities.len())?;
        Ok(Self { dims, spacing, intensities })
    }

    pub fn from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for x in 0..dims[0] {
            for y in 0..dims[1] {
                for z in 0..dims[2] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, [1.0; 3], data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn intensities(&self) -> &[f32] {
        &self.intensities
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.intensities[self.index(x, y, z)]
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, VOLUME_MAGIC, self.dims, self.spacing)?;
        let mut buf = Vec::with_capacity(self.intensities.len() * 4);
        for v in &self.intensities {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (dims, spacing) = read_header(r, VOLUME_MAGIC)?;
        let n = dims.iter().product::<usize>();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated OBV1 payload: {e}")))?;
        let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Self::new(dims, spacing, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

impl RegionMask {
    pub fn new(dims: [usize; 3], spacing: [f32; 3], labels: Vec<u16>) -> Result<Self> {
        check_dims(dims, labels.len())?;
        Ok(Self { dims, spacing, labels })
    }

    /// Mask covering the whole volume with one label.
    pub fn filled(dims: [usize; 3], label: u16) -> Result<Self> {
        Self::new(dims, [1.0; 3], vec![label; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u16] {
        &mut self.labels
    }

    /// Sorted distinct non-background labels.
    pub fn regions(&self) -> Vec<u16> {
        let mut r: Vec<u16> = self.labels.iter().copied().filter(|&l| l != 0).collect();
        r.sort_unstable();
        r.dedup();
        r
    }

    pub fn ensure_matches(&self, volume: &Volume3D) -> Result<()> {
        if self.dims != volume.dims {
            return Err(Error::Schema(format!("mask dims {:?} differ from volume dims {:?}", self.dims, volume.dims)));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, MASK_MAGIC, self.dims, self.spacing)?;
        let mut buf = Vec::with_capacity(self.labels.len() * 2);
        for v in &self.labels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let (dims, spacing) = read_header(r, MASK_MAGIC)?;
        let n = dims.iter().product::<usize>();
        let mut buf = vec![0u8; n * 2];
        r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated OBM1 payload: {e}")))?;
        let labels = buf.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
        Self::new(dims, spacing, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], dims: [usize; 3], spacing: [f32; 3]) -> Result<()> {
    w.write_all(magic)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<([usize; 3], [f32; 3])> {
    let mut head = [0u8; 28];
    r.read_exact(&mut head).map_err(|e| Error::Format(format!("truncated header: {e}")))?;
    if &head[0..4] != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[0..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let u = |i: usize| u32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]) as usize;
    let f = |i: usize| f32::from_le_bytes([head[i], head[i + 1], head[i + 2], head[i + 3]]);
    Ok(([u(4), u(8), u(12)], [f(16), f(20), f(24)]))
}
