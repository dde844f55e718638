//! The `UNW1` weight container.
//!
//! ```text
//! magic        4 bytes   "UNW1"
//! count        u32       number of tensors
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   ndim       u8
//!   dims       ndim x u32
//!   payload    prod(dims) x f32
//! crc32        u32       CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::net::UNetArch;
use super::UNetError;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"UNW1";

/// Upper bound on tensor rank accepted by the decoder.
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn element_count(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelWeights {
    tensors: Vec<NamedTensor>,
}

impl ModelWeights {
    pub fn new(tensors: Vec<NamedTensor>) -> Self {
        Self { tensors }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(NamedTensor::element_count).sum()
    }
}

pub fn encode_weights(weights: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + weights.parameter_count() * 4);
    out.extend_from_slice(WEIGHTS_MAGIC);
    let mut buf = [0u8; 4];
    LittleEndian::write_u32(&mut buf, weights.tensors.len() as u32);
    out.extend_from_slice(&buf);
    for t in &weights.tensors {
        let mut b2 = [0u8; 2];
        LittleEndian::write_u16(&mut b2, t.name.len() as u16);
        out.extend_from_slice(&b2);
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dims.len() as u8);
        for &d in &t.dims {
            LittleEndian::write_u32(&mut buf, d as u32);
            out.extend_from_slice(&buf);
        }
        let start = out.len();
        out.resize(start + t.data.len() * 4, 0);
        LittleEndian::write_f32_into(&t.data, &mut out[start..]);
    }
    LittleEndian::write_u32(&mut buf, crc32fast::hash(&out));
    out.extend_from_slice(&buf);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], UNetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| UNetError::Malformed(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<ModelWeights, UNetError> {
    if bytes.len() < 4 || &bytes[..4] != WEIGHTS_MAGIC {
        return Err(UNetError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(UNetError::Malformed("file too short".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = LittleEndian::read_u32(tail);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(UNetError::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor { bytes: body, pos: 4 };
    let count = LittleEndian::read_u32(cur.take(4, "tensor count")?) as usize;
    let mut tensors = Vec::new();
    for idx in 0..count {
        let name_len = LittleEndian::read_u16(cur.take(2, "name length")?) as usize;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|_| UNetError::Malformed(format!("tensor {idx} name is not UTF-8")))?
            .to_owned();
        let ndim = cur.take(1, "ndim")?[0] as usize;
        if ndim > MAX_NDIM {
            return Err(UNetError::Malformed(format!("tensor '{name}' has {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(LittleEndian::read_u32(cur.take(4, "dims")?) as usize);
        }
        let elements = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= cur.remaining()))
            .ok_or_else(|| UNetError::Malformed(format!("tensor '{name}' payload exceeds file")))?;
        let payload = cur.take(elements * 4, "payload")?;
        let mut data = vec![0f32; elements];
        LittleEndian::read_f32_into(payload, &mut data);
        tensors.push(NamedTensor { name, dims, data });
    }
    if cur.remaining() != 0 {
        return Err(UNetError::Malformed(format!("{} trailing bytes before checksum", cur.remaining())));
    }
    Ok(ModelWeights { tensors })
}

pub fn save_weights(weights: &ModelWeights, path: impl AsRef<Path>) -> Result<(), UNetError> {
    let path = path.as_ref();
    fs::write(path, encode_weights(weights))
        .map_err(|source| UNetError::Io { path: path.display().to_string(), source })
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ModelWeights, UNetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| UNetError::Io { path: path.display().to_string(), source })?;
    decode_weights(&bytes)
}

/// He-normal (Kaiming) initialization of a classic U-Net with two input
/// channels. Weights draw from N(0, 2 / fan_in); biases start at zero.
pub fn init_weights_random(levels: usize, base_width: usize, seed: u64) -> ModelWeights {
    init_weights(&UNetArch::classic(levels, base_width, 2), seed)
}

pub fn init_weights(arch: &UNetArch, seed: u64) -> ModelWeights {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .tensor_specs()
        .into_iter()
        .map(|(name, dims)| {
            let n: usize = dims.iter().product();
            let data = if dims.len() == 1 {
                vec![0.0; n]
            } else {
                let fan_in: usize = dims[1..].iter().product();
                let std = (2.0 / fan_in as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * std) as f32
                    })
                    .collect()
            };
            NamedTensor { name, dims, data }
        })
        .collect();
    ModelWeights { tensors }
}
