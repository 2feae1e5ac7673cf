//! Binary containers.
//!
//! **BQW1** — packed model file. Little-endian throughout:
//!
//! ```text
//! magic       "BQW1"
//! version     u16 (= 1)
//! meta_dtype  u8 (0 = f32, 1 = int8)
//! count       u32
//! record*     name (u16 len + utf8), kind u8 (0 = float, 1 = quantized)
//!   float:      ndim u8, dims u32*, data f32*
//!   quantized:  rows u32, cols u32,
//!               bits u8, mode u8 (0 absmean / 1 absmax),
//!               gran u8 (0 per-channel / 1 sub-channel), block u32,
//!               clip f32, eps f32, pad u32,
//!               codes (bit_width u8, logical_len u32, byte_len u32, bytes),
//!               scales (f32* | super f32 + u8*),
//!               zp flag u8, zero points (f32* | super f32 + i8*)
//! crc32       u32 over all preceding bytes
//! ```
//!
//! 1-bit codes are stored as sign bits (bit 1 = +1 / code 1, bit 0 = -1 /
//! code 0); 2-bit codes are stored raw. With int8 metadata the stored codes
//! and super-scales round-trip bit-exactly; reconstructing f32 scales from
//! them is the (intentionally) lossy accuracy path.
//!
//! **RTW0** — raw float tensor container used as quantizer input:
//!
//! ```text
//! magic "RTW0", count u32,
//! record*: name (u16 len + utf8), ndim u8, dims u32*, data f32*
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::{pack_codes, unpack_codes, PackedBits};
use crate::modelpack::{
    dequantize_scales, dequantize_signed, double_quantize_scales, double_quantize_signed,
    LayerSpec, MetaDtype, ModelManifest,
};
use crate::quant::{Granularity, QuantMode, QuantScheme, QuantizedTensor};

const MAGIC: &[u8; 4] = b"BQW1";
const VERSION: u16 = 1;
const RAW_MAGIC: &[u8; 4] = b"RTW0";

/// Scale or zero-point array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum ScaleMeta {
    F32(Vec<f32>),
    /// Unsigned 7-bit codes with a per-tensor super-scale.
    Int8 {
        codes: Vec<u8>,
        super_scale: f32,
    },
    /// Signed variant for zero points.
    Int8Signed {
        codes: Vec<i8>,
        super_scale: f32,
    },
}

impl ScaleMeta {
    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::Int8 { codes, .. } => codes.len(),
            Self::Int8Signed { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Materialize f32 values (lossy for the int8 variants).
    pub fn reconstruct(&self) -> Vec<f32> {
        match self {
            Self::F32(v) => v.clone(),
            Self::Int8 { codes, super_scale } => dequantize_scales(codes, *super_scale),
            Self::Int8Signed { codes, super_scale } => dequantize_signed(codes, *super_scale),
        }
    }
}

/// One quantized tensor in storage form: bit-packed codes plus metadata in
/// its stored width.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredQuant {
    pub shape: (usize, usize),
    pub scheme: QuantScheme,
    pub pad: usize,
    pub codes: PackedBits,
    pub scales: ScaleMeta,
    pub zero_points: Option<ScaleMeta>,
}

impl StoredQuant {
    pub fn from_quantized(q: &QuantizedTensor, meta: MetaDtype) -> Result<Self> {
        q.validate()?;
        let codes = match (q.scheme.mode, q.scheme.bits) {
            (QuantMode::AbsmeanSymmetric, _) => pack_codes(&q.codes, 1)?,
            (QuantMode::AbsmaxAsymmetric, 1) => {
                let signs: Vec<i8> = q
                    .codes
                    .iter()
                    .map(|&c| if c == 0 { -1 } else { 1 })
                    .collect();
                pack_codes(&signs, 1)?
            }
            (QuantMode::AbsmaxAsymmetric, _) => pack_codes(&q.codes, 2)?,
        };
        let scales = match meta {
            MetaDtype::F32 => ScaleMeta::F32(q.scales.clone()),
            MetaDtype::Int8 => {
                let (codes, super_scale) = double_quantize_scales(&q.scales);
                ScaleMeta::Int8 { codes, super_scale }
            }
        };
        let zero_points = q.zero_points.as_ref().map(|zp| match meta {
            MetaDtype::F32 => ScaleMeta::F32(zp.clone()),
            MetaDtype::Int8 => {
                let (codes, super_scale) = double_quantize_signed(zp);
                ScaleMeta::Int8Signed { codes, super_scale }
            }
        });
        Ok(Self {
            shape: q.original_shape,
            scheme: q.scheme,
            pad: q.pad,
            codes,
            scales,
            zero_points,
        })
    }

    /// Rebuild the in-memory tensor. Scales reconstructed from int8
    /// metadata carry the double-quantization rounding error.
    pub fn to_quantized(&self) -> Result<QuantizedTensor> {
        let raw = unpack_codes(&self.codes);
        let codes = match (self.scheme.mode, self.scheme.bits) {
            (QuantMode::AbsmaxAsymmetric, 1) => {
                raw.iter().map(|&c| if c == -1 { 0 } else { 1 }).collect()
            }
            _ => raw,
        };
        let q = QuantizedTensor {
            codes,
            scales: self.scales.reconstruct(),
            zero_points: self.zero_points.as_ref().map(|zp| zp.reconstruct()),
            original_shape: self.shape,
            pad: self.pad,
            scheme: self.scheme,
        };
        q.validate()?;
        Ok(q)
    }
}

/// One named tensor payload in a BQW1 file.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorPayload {
    Float32 { shape: Vec<usize>, data: Vec<f32> },
    Quantized(StoredQuant),
}

/// A packed model: ordered named tensors plus the metadata dtype shared by
/// all quantized records.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedModel {
    pub meta_dtype: MetaDtype,
    pub tensors: Vec<(String, TensorPayload)>,
}

impl PackedModel {
    /// Derive the layer manifest this file encodes.
    pub fn manifest(&self) -> ModelManifest {
        ModelManifest {
            layers: self
                .tensors
                .iter()
                .map(|(name, payload)| match payload {
                    TensorPayload::Float32 { shape, .. } => {
                        LayerSpec::float(name.clone(), shape.clone())
                    }
                    TensorPayload::Quantized(sq) => {
                        LayerSpec::quantized(name.clone(), vec![sq.shape.0, sq.shape.1], sq.scheme)
                    }
                })
                .collect(),
        }
    }
}

/// Serialize a packed model; byte output is a pure function of the input.
pub fn write_model(path: impl AsRef<Path>, model: &PackedModel) -> Result<()> {
    model.manifest().validate()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u16(&mut buf, VERSION);
    buf.push(match model.meta_dtype {
        MetaDtype::F32 => 0,
        MetaDtype::Int8 => 1,
    });
    put_u32(&mut buf, model.tensors.len() as u32);
    for (name, payload) in &model.tensors {
        put_string(&mut buf, name)?;
        match payload {
            TensorPayload::Float32 { shape, data } => {
                buf.push(0);
                buf.push(shape.len() as u8);
                for &d in shape {
                    put_u32(&mut buf, d as u32);
                }
                let expect: usize = shape.iter().product();
                if data.len() != expect {
                    return Err(Error::ShapeMismatch(format!(
                        "float tensor `{name}`: {} values for shape {shape:?}",
                        data.len()
                    )));
                }
                for &v in data {
                    put_f32(&mut buf, v);
                }
            }
            TensorPayload::Quantized(sq) => {
                buf.push(1);
                put_u32(&mut buf, sq.shape.0 as u32);
                put_u32(&mut buf, sq.shape.1 as u32);
                buf.push(sq.scheme.bits);
                buf.push(match sq.scheme.mode {
                    QuantMode::AbsmeanSymmetric => 0,
                    QuantMode::AbsmaxAsymmetric => 1,
                });
                match sq.scheme.granularity {
                    Granularity::PerChannel => {
                        buf.push(0);
                        put_u32(&mut buf, 0);
                    }
                    Granularity::SubChannel { block_size } => {
                        buf.push(1);
                        put_u32(&mut buf, block_size as u32);
                    }
                }
                put_f32(&mut buf, sq.scheme.clip);
                put_f32(&mut buf, sq.scheme.eps);
                put_u32(&mut buf, sq.pad as u32);
                buf.push(sq.codes.bit_width);
                put_u32(&mut buf, sq.codes.logical_len as u32);
                put_u32(&mut buf, sq.codes.bytes.len() as u32);
                buf.extend_from_slice(&sq.codes.bytes);
                put_meta(&mut buf, &sq.scales, model.meta_dtype, false)?;
                match &sq.zero_points {
                    None => buf.push(0),
                    Some(zp) => {
                        buf.push(1);
                        put_meta(&mut buf, zp, model.meta_dtype, true)?;
                    }
                }
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    std::fs::write(path, buf)?;
    Ok(())
}

/// Read and fully validate a packed model.
pub fn read_model(path: impl AsRef<Path>) -> Result<PackedModel> {
    let buf = std::fs::read(path)?;
    if buf.len() < MAGIC.len() + 2 + 1 + 4 + 4 {
        return Err(Error::Format("truncated file".into()));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored_crc = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored_crc {
        return Err(Error::Format("checksum failure".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("magic mismatch: not a BQW1 file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let meta_dtype = match r.u8()? {
        0 => MetaDtype::F32,
        1 => MetaDtype::Int8,
        other => return Err(Error::Format(format!("unknown metadata dtype tag {other}"))),
    };
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let payload = match r.u8()? {
            0 => {
                let ndim = r.u8()? as usize;
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(r.u32()? as usize);
                }
                let len: usize = shape.iter().product();
                let mut data = Vec::with_capacity(len);
                for _ in 0..len {
                    data.push(r.f32()?);
                }
                TensorPayload::Float32 { shape, data }
            }
            1 => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                let bits = r.u8()?;
                let mode = match r.u8()? {
                    0 => QuantMode::AbsmeanSymmetric,
                    1 => QuantMode::AbsmaxAsymmetric,
                    other => return Err(Error::Format(format!("unknown mode tag {other}"))),
                };
                let gran_tag = r.u8()?;
                let block = r.u32()? as usize;
                let granularity = match gran_tag {
                    0 => Granularity::PerChannel,
                    1 => Granularity::SubChannel { block_size: block },
                    other => return Err(Error::Format(format!("unknown granularity tag {other}"))),
                };
                let clip = r.f32()?;
                let eps = r.f32()?;
                let scheme = QuantScheme {
                    bits,
                    mode,
                    granularity,
                    clip,
                    eps,
                };
                scheme
                    .validate()
                    .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
                let pad = r.u32()? as usize;
                let bit_width = r.u8()?;
                if bit_width != 1 && bit_width != 2 {
                    return Err(Error::Format(format!("bad code width {bit_width}")));
                }
                let logical_len = r.u32()? as usize;
                let byte_len = r.u32()? as usize;
                if byte_len != PackedBits::byte_len(logical_len, bit_width) {
                    return Err(Error::Format(format!(
                        "code byte length {byte_len} inconsistent with {logical_len} codes"
                    )));
                }
                let bytes = r.take(byte_len)?.to_vec();
                let codes = PackedBits {
                    bytes,
                    bit_width,
                    logical_len,
                };
                let scales = read_meta(&mut r, meta_dtype, false)?;
                let zero_points = match r.u8()? {
                    0 => None,
                    1 => Some(read_meta(&mut r, meta_dtype, true)?),
                    other => return Err(Error::Format(format!("bad zero-point flag {other}"))),
                };
                let sq = StoredQuant {
                    shape: (rows, cols),
                    scheme,
                    pad,
                    codes,
                    scales,
                    zero_points,
                };
                // Full structural check, including code domain and counts.
                sq.to_quantized()
                    .map_err(|e| Error::Format(format!("tensor `{name}`: {e}")))?;
                TensorPayload::Quantized(sq)
            }
            other => return Err(Error::Format(format!("unknown record kind {other}"))),
        };
        tensors.push((name, payload));
    }
    if r.pos != body.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            body.len() - r.pos
        )));
    }
    let model = PackedModel {
        meta_dtype,
        tensors,
    };
    model.manifest().validate()?;
    Ok(model)
}

/// Outcome of a structural check, for the `verify` CLI.
#[derive(Debug, Clone)]
pub struct ModelSummary {
    pub tensor_count: usize,
    pub quantized_tensors: usize,
    pub meta_dtype: MetaDtype,
    pub file_bytes: u64,
}

/// Structural and checksum validation without keeping the model.
pub fn verify_model(path: impl AsRef<Path>) -> Result<ModelSummary> {
    let file_bytes = std::fs::metadata(path.as_ref())?.len();
    let model = read_model(path)?;
    let quantized = model
        .tensors
        .iter()
        .filter(|(_, p)| matches!(p, TensorPayload::Quantized(_)))
        .count();
    Ok(ModelSummary {
        tensor_count: model.tensors.len(),
        quantized_tensors: quantized,
        meta_dtype: model.meta_dtype,
        file_bytes,
    })
}

// ---------------------------------------------------------------------------
// RTW0 raw tensors
// ---------------------------------------------------------------------------

/// A named dense f32 tensor, the quantizer's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn write_raw_tensors(path: impl AsRef<Path>, tensors: &[RawTensor]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(RAW_MAGIC);
    put_u32(&mut buf, tensors.len() as u32);
    for t in tensors {
        put_string(&mut buf, &t.name)?;
        buf.push(t.shape.len() as u8);
        for &d in &t.shape {
            put_u32(&mut buf, d as u32);
        }
        let expect: usize = t.shape.iter().product();
        if t.data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "raw tensor `{}`: {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        for &v in &t.data {
            put_f32(&mut buf, v);
        }
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_raw_tensors(path: impl AsRef<Path>) -> Result<Vec<RawTensor>> {
    let buf = std::fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(4)? != RAW_MAGIC {
        return Err(Error::Format("magic mismatch: not an RTW0 file".into()));
    }
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()?);
        }
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last record",
            buf.len() - r.pos
        )));
    }
    Ok(tensors)
}

// ---------------------------------------------------------------------------
// byte helpers
// ---------------------------------------------------------------------------

fn put_u16(buf: &mut Vec<u8>, v: u16) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f32(buf: &mut Vec<u8>, v: f32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_string(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    if s.len() > u16::MAX as usize {
        return Err(Error::Format(format!("name too long: {} bytes", s.len())));
    }
    put_u16(buf, s.len() as u16);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

fn put_meta(buf: &mut Vec<u8>, meta: &ScaleMeta, expect: MetaDtype, signed: bool) -> Result<()> {
    put_u32(buf, meta.len() as u32);
    match (meta, expect, signed) {
        (ScaleMeta::F32(values), MetaDtype::F32, _) => {
            for &v in values {
                put_f32(buf, v);
            }
        }
        (ScaleMeta::Int8 { codes, super_scale }, MetaDtype::Int8, false) => {
            put_f32(buf, *super_scale);
            buf.extend_from_slice(codes);
        }
        (ScaleMeta::Int8Signed { codes, super_scale }, MetaDtype::Int8, true) => {
            put_f32(buf, *super_scale);
            buf.extend_from_slice(&codes.iter().map(|&c| c as u8).collect::<Vec<_>>());
        }
        _ => {
            return Err(Error::Format(
                "metadata variant does not match the file's metadata dtype".into(),
            ))
        }
    }
    Ok(())
}

fn read_meta(r: &mut Reader<'_>, meta: MetaDtype, signed: bool) -> Result<ScaleMeta> {
    let len = r.u32()? as usize;
    match (meta, signed) {
        (MetaDtype::F32, _) => {
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(r.f32()?);
            }
            Ok(ScaleMeta::F32(values))
        }
        (MetaDtype::Int8, false) => {
            let super_scale = r.f32()?;
            let codes = r.take(len)?.to_vec();
            Ok(ScaleMeta::Int8 { codes, super_scale })
        }
        (MetaDtype::Int8, true) => {
            let super_scale = r.f32()?;
            let codes = r.take(len)?.iter().map(|&b| b as i8).collect();
            Ok(ScaleMeta::Int8Signed { codes, super_scale })
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("truncated file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u16()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| Error::Format("invalid utf-8 name".into()))
    }
}
