//! Reader and writer for single-file little-endian NIfTI-1 volumes.
//!
//! Supported datatypes are `uint8` (2), `int16` (4) and `float32` (16).
//! Orientation fields (qform/sform, quaternions, affine rows) are carried
//! through as opaque header bytes and never interpreted.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{SegmentationMap, Volume3D};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            16 => Ok(Datatype::F32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

/// Raw 348-byte header with typed accessors for the fields this crate uses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NiftiHeader {
    raw: [u8; HEADER_SIZE],
}

impl NiftiHeader {
    /// Fresh header for a 3D grid of the given datatype.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], datatype: Datatype) -> Result<Self> {
        let mut h = NiftiHeader { raw: [0; HEADER_SIZE] };
        h.put_i32(offsets::SIZEOF_HDR, HEADER_SIZE as i32);
        h.put_f32(offsets::PIXDIM, 1.0); // qfac
        h.raw[offsets::XYZT_UNITS] = 2; // millimetres
        h.set_geometry(dims, spacing, datatype)?;
        Ok(h)
    }

    fn set_geometry(&mut self, dims: [usize; 3], spacing: [f64; 3], datatype: Datatype) -> Result<()> {
        if let Some(d) = dims.iter().find(|&&d| d > i16::MAX as usize) {
            return Err(Error::Shape(format!("dimension {d} exceeds the 32767 header limit")));
        }
        self.put_i16(offsets::DIM, 3);
        // NIfTI stores x first; grids here are (z, y, x).
        for (i, &d) in [dims[2], dims[1], dims[0], 1, 1, 1, 1].iter().enumerate() {
            self.put_i16(offsets::DIM + 2 * (i + 1), d as i16);
        }
        for (i, &s) in [spacing[2], spacing[1], spacing[0]].iter().enumerate() {
            self.put_f32(offsets::PIXDIM + 4 * (i + 1), s as f32);
        }
        self.put_i16(offsets::DATATYPE, datatype.code());
        self.put_i16(offsets::BITPIX, (datatype.bytes() * 8) as i16);
        self.put_f32(offsets::VOX_OFFSET, VOX_OFFSET as f32);
        self.put_f32(offsets::SCL_SLOPE, 1.0);
        self.put_f32(offsets::SCL_INTER, 0.0);
        self.raw[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(&MAGIC);
        Ok(())
    }

    /// Parses and validates a header from the first 348 bytes of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::NotNifti);
        }
        let mut raw = [0u8; HEADER_SIZE];
        raw.copy_from_slice(&bytes[..HEADER_SIZE]);
        let h = NiftiHeader { raw };
        if h.i32_at(offsets::SIZEOF_HDR) != HEADER_SIZE as i32 || raw[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
            return Err(Error::NotNifti);
        }
        let ndim = h.i16_at(offsets::DIM);
        if !(3..=7).contains(&ndim) {
            return Err(Error::Shape(format!("dim[0] = {ndim}, expected a 3D volume")));
        }
        for i in 1..=3 {
            if h.i16_at(offsets::DIM + 2 * i) < 1 {
                return Err(Error::Shape(format!("dim[{i}] must be >= 1")));
            }
        }
        for i in 4..=ndim as usize {
            if h.i16_at(offsets::DIM + 2 * i) != 1 {
                return Err(Error::Shape(format!("dim[{i}] must be 1 for a 3D volume")));
            }
        }
        Datatype::from_code(h.i16_at(offsets::DATATYPE))?;
        if h.vox_offset() < HEADER_SIZE {
            return Err(Error::Shape(format!("vox_offset {} inside header", h.vox_offset())));
        }
        Ok(h)
    }

    /// Grid extents as `(D, H, W)`.
    pub fn dims(&self) -> [usize; 3] {
        let d = |i: usize| self.i16_at(offsets::DIM + 2 * i) as usize;
        [d(3), d(2), d(1)]
    }

    /// Voxel spacing as `(sz, sy, sx)` in millimetres.
    pub fn spacing(&self) -> [f64; 3] {
        let p = |i: usize| self.f32_at(offsets::PIXDIM + 4 * i) as f64;
        [p(3), p(2), p(1)]
    }

    pub fn datatype(&self) -> Datatype {
        Datatype::from_code(self.i16_at(offsets::DATATYPE)).expect("validated on parse")
    }

    pub fn vox_offset(&self) -> usize {
        self.f32_at(offsets::VOX_OFFSET) as usize
    }

    fn scaling(&self) -> Option<(f32, f32)> {
        let slope = self.f32_at(offsets::SCL_SLOPE);
        let inter = self.f32_at(offsets::SCL_INTER);
        (slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0)).then_some((slope, inter))
    }

    pub fn as_bytes(&self) -> &[u8; HEADER_SIZE] {
        &self.raw
    }

    fn i16_at(&self, o: usize) -> i16 {
        i16::from_le_bytes([self.raw[o], self.raw[o + 1]])
    }
    fn i32_at(&self, o: usize) -> i32 {
        i32::from_le_bytes(self.raw[o..o + 4].try_into().unwrap())
    }
    fn f32_at(&self, o: usize) -> f32 {
        f32::from_le_bytes(self.raw[o..o + 4].try_into().unwrap())
    }
    fn put_i16(&mut self, o: usize, v: i16) {
        self.raw[o..o + 2].copy_from_slice(&v.to_le_bytes());
    }
    fn put_i32(&mut self, o: usize, v: i32) {
        self.raw[o..o + 4].copy_from_slice(&v.to_le_bytes());
    }
    fn put_f32(&mut self, o: usize, v: f32) {
        self.raw[o..o + 4].copy_from_slice(&v.to_le_bytes());
    }
}

/// Decoded voxel payload in its on-disk type.
#[derive(Clone, Debug, PartialEq)]
pub enum NiftiData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub data: NiftiData,
}

impl NiftiImage {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = NiftiHeader::parse(bytes)?;
        let n: usize = header.dims().iter().product();
        let dt = header.datatype();
        let start = header.vox_offset();
        let expected = start + n * dt.bytes();
        if bytes.len() < expected {
            return Err(Error::Truncated { expected, actual: bytes.len() });
        }
        let payload = &bytes[start..expected];
        let data = match dt {
            Datatype::U8 => NiftiData::U8(payload.to_vec()),
            Datatype::I16 => NiftiData::I16(
                payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
            ),
            Datatype::F32 => NiftiData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(NiftiImage { header, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VOX_OFFSET + 4 * self.len());
        out.extend_from_slice(&self.header.raw);
        out.resize(VOX_OFFSET, 0);
        match &self.data {
            NiftiData::U8(v) => out.extend_from_slice(v),
            NiftiData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            NiftiData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    fn len(&self) -> usize {
        match &self.data {
            NiftiData::U8(v) => v.len(),
            NiftiData::I16(v) => v.len(),
            NiftiData::F32(v) => v.len(),
        }
    }

    fn raw_values(&self) -> Vec<f32> {
        match &self.data {
            NiftiData::U8(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::I16(v) => v.iter().map(|&x| x as f32).collect(),
            NiftiData::F32(v) => v.clone(),
        }
    }

    /// Intensity volume, applying `scl_slope`/`scl_inter` when set.
    pub fn to_volume(&self) -> Result<Volume3D> {
        let mut values = self.raw_values();
        if let Some((slope, inter)) = self.header.scaling() {
            values.iter_mut().for_each(|v| *v = *v * slope + inter);
        }
        Volume3D::new(self.header.dims(), self.header.spacing(), values)
    }

    /// Label map; values must be integral codebook entries.
    pub fn to_labels(&self) -> Result<SegmentationMap> {
        let labels = match &self.data {
            NiftiData::U8(v) => v.clone(),
            _ => self
                .raw_values()
                .into_iter()
                .map(|v| if v.fract() == 0.0 && (0.0..=255.0).contains(&v) { v as u8 } else { u8::MAX })
                .collect(),
        };
        SegmentationMap::new(self.header.dims(), self.header.spacing(), labels)
    }
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NiftiImage::decode(&bytes)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D> {
    read_nifti(path)?.to_volume()
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<SegmentationMap> {
    read_nifti(path)?.to_labels()
}

/// Float32 image for `vol`; orientation bytes come from `template` when given.
pub fn volume_image(vol: &Volume3D, template: Option<&NiftiHeader>) -> Result<NiftiImage> {
    let header = match template {
        Some(t) => {
            let mut h = t.clone();
            h.set_geometry(vol.dims(), vol.spacing(), Datatype::F32)?;
            h
        }
        None => NiftiHeader::new(vol.dims(), vol.spacing(), Datatype::F32)?,
    };
    Ok(NiftiImage { header, data: NiftiData::F32(vol.data().to_vec()) })
}

pub fn labels_image(seg: &SegmentationMap, template: Option<&NiftiHeader>) -> Result<NiftiImage> {
    let header = match template {
        Some(t) => {
            let mut h = t.clone();
            h.set_geometry(seg.dims(), seg.spacing(), Datatype::U8)?;
            h
        }
        None => NiftiHeader::new(seg.dims(), seg.spacing(), Datatype::U8)?,
    };
    Ok(NiftiImage { header, data: NiftiData::U8(seg.labels().to_vec()) })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &volume_image(vol, None)?.encode())
}

/// Writes `vol` reusing the opaque orientation bytes of `template`.
pub fn write_volume_like(vol: &Volume3D, template: &NiftiHeader, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &volume_image(vol, Some(template))?.encode())
}

pub fn write_labels(seg: &SegmentationMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &labels_image(seg, None)?.encode())
}
