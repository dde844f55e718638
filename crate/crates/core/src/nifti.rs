//! Reading and writing the subset of single-file NIfTI-1 used by the
//! pipeline: 3D images of `uint8`, `int16` or `float32`, optionally inside a
//! gzip container.
//!
//! Orientation (qform/sform) is ignored. Axis order is taken as stored and
//! voxel spacing comes from `pixdim[1..=3]` only.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::grid::{Grid3, GridError, Mask3, Volume3};

pub const HEADER_SIZE: usize = 348;
/// Header plus the 4-byte extension flag.
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC: &[u8; 4] = b"n+1\0";

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

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

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated data: need {needed} bytes after offset {offset}, have {available}")]
    TruncatedData { offset: usize, needed: usize, available: usize },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

impl NiftiError {
    fn malformed(msg: impl Into<String>) -> Self {
        NiftiError::MalformedHeader(msg.into())
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        NiftiError::IoFailure { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(i16)]
pub enum Datatype {
    Uint8 = 2,
    Int16 = 4,
    Float32 = 16,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        self as i16
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dims: [usize; 3],
    pub pixdim: [f64; 3],
    pub datatype: Datatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub vox_offset: usize,
    pub big_endian: bool,
}

impl NiftiHeader {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    /// Parses and validates the first 348 bytes of `bytes`.
    pub fn parse(bytes: &[u8]) -> Result<Self, NiftiError> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::malformed(format!("header is {} bytes, expected 348", bytes.len())));
        }
        let big_endian = match (LittleEndian::read_i32(bytes), BigEndian::read_i32(bytes)) {
            (348, _) => false,
            (_, 348) => true,
            (n, _) => return Err(NiftiError::malformed(format!("sizeof_hdr is {n}, expected 348"))),
        };
        if &bytes[offsets::MAGIC..offsets::MAGIC + 4] != MAGIC {
            return Err(NiftiError::malformed("magic is not \"n+1\\0\""));
        }
        let i16_at = |off: usize| {
            if big_endian {
                BigEndian::read_i16(&bytes[off..])
            } else {
                LittleEndian::read_i16(&bytes[off..])
            }
        };
        let f32_at = |off: usize| {
            if big_endian {
                BigEndian::read_f32(&bytes[off..])
            } else {
                LittleEndian::read_f32(&bytes[off..])
            }
        };
        debug_assert_eq!(offsets::SIZEOF_HDR, 0);

        let ndim = i16_at(offsets::DIM);
        if ndim != 3 {
            return Err(NiftiError::malformed(format!("dim[0] is {ndim}; only 3D images are supported")));
        }
        let mut dims = [0usize; 3];
        let mut pixdim = [0f64; 3];
        for a in 0..3 {
            let d = i16_at(offsets::DIM + 2 * (a + 1));
            if d < 1 {
                return Err(NiftiError::malformed(format!("dim[{}] is {d}", a + 1)));
            }
            dims[a] = d as usize;
            let p = f32_at(offsets::PIXDIM + 4 * (a + 1));
            if !(p.is_finite() && p > 0.0) {
                return Err(NiftiError::malformed(format!("pixdim[{}] is {p}", a + 1)));
            }
            pixdim[a] = p as f64;
        }
        let datatype = Datatype::from_code(i16_at(offsets::DATATYPE))?;
        let bitpix = i16_at(offsets::BITPIX);
        if bitpix as usize != datatype.size() * 8 {
            return Err(NiftiError::malformed(format!("bitpix {bitpix} does not match datatype {datatype:?}")));
        }
        let vox_offset = f32_at(offsets::VOX_OFFSET);
        if !(vox_offset.is_finite() && vox_offset >= DEFAULT_VOX_OFFSET as f32 && vox_offset < 1e9) {
            return Err(NiftiError::malformed(format!("vox_offset {vox_offset} is below 352")));
        }
        let mut scl_slope = f32_at(offsets::SCL_SLOPE);
        let mut scl_inter = f32_at(offsets::SCL_INTER);
        // A zero (or non-finite) slope means "no scaling".
        if scl_slope == 0.0 || !scl_slope.is_finite() {
            scl_slope = 1.0;
            scl_inter = 0.0;
        }
        if !scl_inter.is_finite() {
            scl_inter = 0.0;
        }
        Ok(Self { dims, pixdim, datatype, scl_slope, scl_inter, vox_offset: vox_offset as usize, big_endian })
    }

    /// Serializes to a 348-byte little-endian header.
    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        LittleEndian::write_i32(&mut b[offsets::SIZEOF_HDR..], HEADER_SIZE as i32);
        let dim: [i16; 8] = [3, self.dims[0] as i16, self.dims[1] as i16, self.dims[2] as i16, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut b[offsets::DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut b[offsets::DATATYPE..], self.datatype.code());
        LittleEndian::write_i16(&mut b[offsets::BITPIX..], (self.datatype.size() * 8) as i16);
        let pixdim = [1.0, self.pixdim[0], self.pixdim[1], self.pixdim[2], 1.0, 1.0, 1.0, 1.0];
        for (i, p) in pixdim.iter().enumerate() {
            LittleEndian::write_f32(&mut b[offsets::PIXDIM + 4 * i..], *p as f32);
        }
        LittleEndian::write_f32(&mut b[offsets::VOX_OFFSET..], self.vox_offset as f32);
        LittleEndian::write_f32(&mut b[offsets::SCL_SLOPE..], self.scl_slope);
        LittleEndian::write_f32(&mut b[offsets::SCL_INTER..], self.scl_inter);
        // NIFTI_UNITS_MM
        b[offsets::XYZT_UNITS] = 2;
        b[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(MAGIC);
        b
    }
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>, NiftiError> {
    if bytes.len() >= 2 && bytes[..2] == GZIP_MAGIC {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| NiftiError::malformed(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

/// Decodes a complete (already decompressed) `.nii` buffer. Stored values
/// are mapped through `v * scl_slope + scl_inter`.
pub fn decode_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume3), NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let n = header.voxel_count();
    let size = header.datatype.size();
    let needed = n.checked_mul(size).ok_or_else(|| NiftiError::malformed("voxel count overflows"))?;
    let available = bytes.len().saturating_sub(header.vox_offset);
    if needed > available {
        return Err(NiftiError::TruncatedData { offset: header.vox_offset, needed, available });
    }
    let payload = &bytes[header.vox_offset..header.vox_offset + needed];
    let raw: Vec<f32> = match (header.datatype, header.big_endian) {
        (Datatype::Uint8, _) => payload.iter().map(|&v| v as f32).collect(),
        (Datatype::Int16, false) => payload.chunks_exact(2).map(|c| LittleEndian::read_i16(c) as f32).collect(),
        (Datatype::Int16, true) => payload.chunks_exact(2).map(|c| BigEndian::read_i16(c) as f32).collect(),
        (Datatype::Float32, false) => payload.chunks_exact(4).map(LittleEndian::read_f32).collect(),
        (Datatype::Float32, true) => payload.chunks_exact(4).map(BigEndian::read_f32).collect(),
    };
    let (slope, inter) = (header.scl_slope, header.scl_inter);
    let data = if slope == 1.0 && inter == 0.0 { raw } else { raw.into_iter().map(|v| v * slope + inter).collect() };
    let vol = Grid3::from_vec(header.dims, header.pixdim, data)?;
    Ok((header, vol))
}

/// Reads a `.nii` or `.nii.gz` file (gzip is detected from the content).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume3), NiftiError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| NiftiError::io(path, e))?;
    decode_nifti(&maybe_gunzip(bytes)?)
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3, NiftiError> {
    read_nifti(path).map(|(_, v)| v)
}

/// Reads a label image; any nonzero value becomes foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<Mask3, NiftiError> {
    Ok(read_volume(path)?.map(|v| u8::from(v != 0.0)))
}

fn encode(header: &NiftiHeader, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(DEFAULT_VOX_OFFSET + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(&[0u8; DEFAULT_VOX_OFFSET - HEADER_SIZE]);
    out.extend_from_slice(payload);
    out
}

fn header_for<T: Copy>(grid: &Grid3<T>, datatype: Datatype) -> Result<NiftiHeader, NiftiError> {
    if grid.shape().iter().any(|&n| n > i16::MAX as usize) {
        return Err(NiftiError::malformed(format!("shape {:?} exceeds the NIfTI-1 dimension limit", grid.shape())));
    }
    Ok(NiftiHeader {
        dims: grid.shape(),
        pixdim: grid.spacing(),
        datatype,
        scl_slope: 1.0,
        scl_inter: 0.0,
        vox_offset: DEFAULT_VOX_OFFSET,
        big_endian: false,
    })
}

/// Encodes a volume as float32 NIfTI-1 bytes.
pub fn encode_volume(vol: &Volume3) -> Result<Vec<u8>, NiftiError> {
    let header = header_for(vol, Datatype::Float32)?;
    let mut payload = vec![0u8; vol.len() * 4];
    LittleEndian::write_f32_into(vol.data(), &mut payload);
    Ok(encode(&header, &payload))
}

/// Encodes a mask as uint8 {0, 1} NIfTI-1 bytes.
pub fn encode_mask(mask: &Mask3) -> Result<Vec<u8>, NiftiError> {
    let header = header_for(mask, Datatype::Uint8)?;
    let payload: Vec<u8> = mask.data().iter().map(|&v| u8::from(v != 0)).collect();
    Ok(encode(&header, &payload))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let result = if gz {
        fs::File::create(path).and_then(|f| {
            let mut enc = GzEncoder::new(f, Compression::default());
            enc.write_all(bytes)?;
            enc.finish().map(|_| ())
        })
    } else {
        fs::write(path, bytes)
    };
    result.map_err(|e| NiftiError::io(path, e))
}

/// Writes a float32 volume. Paths ending in `.gz` are gzip-compressed.
pub fn write_volume(vol: &Volume3, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_bytes(path.as_ref(), &encode_volume(vol)?)
}

/// Writes a uint8 mask. Paths ending in `.gz` are gzip-compressed.
pub fn write_mask(mask: &Mask3, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    write_bytes(path.as_ref(), &encode_mask(mask)?)
}
