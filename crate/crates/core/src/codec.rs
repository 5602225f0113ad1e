//! Bit-exact compression of pseudo-gradients.
//!
//! A compressed delta carries, per chunk, the Top-k within-chunk indices
//! (12 bits each) and the selected values either 2-bit quantized against two
//! half-precision scales or, in the lossless configuration, as raw 64-bit
//! floats. The serialized form is the swarm's wire contract:
//!
//! ```text
//! header (65 bytes):
//!   magic "SLC1" | version u8 | base_round u64 | peer_id [u8;16]
//!   | layout_digest [u8;32] | chunk_count u32
//! per chunk (version 1, 2-bit):
//!   scale_lo f16 | scale_hi f16 | indices 12-bit packed | codes 2-bit packed
//! per chunk (version 2, raw):
//!   indices 12-bit packed | values f64 x k
//! trailer:
//!   crc32 u32 over all preceding bytes
//! ```
//!
//! All multi-byte integers are big-endian and bit packing is MSB-first, so
//! payloads are identical across platforms. Per-chunk element counts are not
//! transmitted: they equal `effective_k(chunk_len)` under the layout every
//! replica already agreed on. The CRC trailer makes any byte-level corruption
//! a parse error instead of a silently different delta.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::chunk::{effective_k, ChunkDescriptor, ChunkGeometry};
use crate::error::{Error, Result};
use crate::params::{Layout, PeerId};

pub const WIRE_MAGIC: [u8; 4] = *b"SLC1";
pub const WIRE_VERSION_2BIT: u8 = 1;
pub const WIRE_VERSION_RAW: u8 = 2;
/// magic(4) + version(1) + base_round(8) + peer_id(16) + layout_digest(32)
/// + chunk_count(4).
pub const HEADER_LEN: usize = 65;
pub const TRAILER_LEN: usize = 4;

/// How selected values travel on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ValueCoding {
    /// Sign bit + magnitude-bucket bit against per-chunk scales.
    #[serde(rename = "2bit")]
    TwoBit,
    /// Full-precision values; used by lossless configurations.
    #[serde(rename = "raw")]
    Raw,
}

impl ValueCoding {
    fn wire_version(self) -> u8 {
        match self {
            ValueCoding::TwoBit => WIRE_VERSION_2BIT,
            ValueCoding::Raw => WIRE_VERSION_RAW,
        }
    }

    /// Value payload bits per selected element (excludes the 12 index bits).
    pub fn bits_per_value(self) -> u32 {
        match self {
            ValueCoding::TwoBit => 2,
            ValueCoding::Raw => 64,
        }
    }
}

/// Selected values of one chunk.
#[derive(Debug, Clone, PartialEq)]
pub enum ChunkValues {
    TwoBit {
        /// One symbol per selected index: bit1 = sign (1 = negative),
        /// bit0 = bucket (1 = high).
        codes: Vec<u8>,
        scale_lo: f64,
        scale_hi: f64,
    },
    Raw {
        values: Vec<f64>,
    },
}

/// One compressed chunk: sorted within-chunk indices plus values.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedChunk {
    pub indices: Vec<u16>,
    pub values: ChunkValues,
}

impl CompressedChunk {
    /// Decoded value for each selected index, in index order.
    pub fn decode_values(&self) -> Vec<f64> {
        match &self.values {
            ChunkValues::TwoBit {
                codes,
                scale_lo,
                scale_hi,
            } => codes
                .iter()
                .map(|&c| {
                    let magnitude = if c & 0b01 != 0 { *scale_hi } else { *scale_lo };
                    if c & 0b10 != 0 {
                        -magnitude
                    } else {
                        magnitude
                    }
                })
                .collect(),
            ChunkValues::Raw { values } => values.clone(),
        }
    }
}

/// A full submission: every chunk of the layout, in tiling order.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedDelta {
    pub base_round: u64,
    pub peer: PeerId,
    pub layout_digest: [u8; 32],
    pub chunks: Vec<CompressedChunk>,
    pub coding: ValueCoding,
}

/// Chunk tiling derived once from (layout, geometry) and shared by the
/// compression, decode, and parse paths.
#[derive(Debug, Clone)]
pub struct ChunkPlan {
    pub geometry: ChunkGeometry,
    pub descriptors: Vec<ChunkDescriptor>,
    pub layout_digest: [u8; 32],
    pub element_count: usize,
}

impl ChunkPlan {
    pub fn new(layout: &Layout, geometry: ChunkGeometry) -> Result<Self> {
        Ok(ChunkPlan {
            geometry,
            descriptors: crate::chunk::chunk_layout(layout, &geometry)?,
            layout_digest: layout.digest(),
            element_count: layout.element_count(),
        })
    }
}

/// Positions of the `k_eff` largest-magnitude entries of `buffer`.
///
/// Every selected magnitude is >= every unselected magnitude; ties break
/// toward the lower index. Returns `(sorted ascending indices, values at
/// those indices)`.
pub fn topk_select(buffer: &[f64], k_eff: usize) -> Result<(Vec<u16>, Vec<f64>)> {
    debug_assert!(k_eff <= buffer.len());
    if buffer.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidData(
            "non-finite value in chunk buffer".into(),
        ));
    }
    let mut order: Vec<u16> = (0..buffer.len() as u16).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (buffer[a as usize].abs(), buffer[b as usize].abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    let mut indices: Vec<u16> = order[..k_eff].to_vec();
    indices.sort_unstable();
    let values = indices.iter().map(|&i| buffer[i as usize]).collect();
    Ok((indices, values))
}

fn round_scale(raw: f64) -> f64 {
    // Half precision on the wire; clamp so the stored scale stays finite.
    f64::from(f16::from_f64(raw.min(f64::from(f16::MAX))))
}

/// 2-bit quantization of one chunk's selected values.
///
/// Threshold tau = mean |v|. Values with |v| <= tau land in the low bucket,
/// the rest in the high bucket; each bucket's scale is its mean magnitude
/// (low: 0 if empty, high: tau if empty). Scales are rounded to half
/// precision up front so a decode/encode cycle is idempotent.
pub fn quantize_chunk(values: &[f64]) -> ChunkValues {
    debug_assert!(!values.is_empty());
    let tau = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
    let (mut lo_sum, mut lo_n, mut hi_sum, mut hi_n) = (0.0, 0usize, 0.0, 0usize);
    for v in values {
        let m = v.abs();
        if m <= tau {
            lo_sum += m;
            lo_n += 1;
        } else {
            hi_sum += m;
            hi_n += 1;
        }
    }
    let scale_lo = round_scale(if lo_n > 0 { lo_sum / lo_n as f64 } else { 0.0 });
    let scale_hi = round_scale(if hi_n > 0 { hi_sum / hi_n as f64 } else { tau });
    let codes = values
        .iter()
        .map(|&v| {
            let bucket = u8::from(v.abs() > tau);
            let sign = u8::from(v < 0.0) << 1;
            sign | bucket
        })
        .collect();
    ChunkValues::TwoBit {
        codes,
        scale_lo,
        scale_hi,
    }
}

/// Packs 12-bit indices MSB-first, zero-padded to a byte boundary.
pub fn pack_indices(indices: &[u16]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity((indices.len() * 12).div_ceil(8));
    let mut acc: u32 = 0;
    let mut bits = 0u32;
    for &idx in indices {
        if idx >= 4096 {
            return Err(Error::InvalidArgument(format!(
                "index {idx} does not fit in 12 bits"
            )));
        }
        acc = (acc << 12) | u32::from(idx);
        bits += 12;
        while bits >= 8 {
            bits -= 8;
            out.push((acc >> bits) as u8);
        }
    }
    if bits > 0 {
        out.push((acc << (8 - bits)) as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_indices`]; `bytes` must be exactly the packed width and
/// padding bits must be zero.
pub fn unpack_indices(bytes: &[u8], count: usize) -> Result<Vec<u16>> {
    let expected = (count * 12).div_ceil(8);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "index block is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut bits = 0u32;
    let mut iter = bytes.iter();
    while out.len() < count {
        while bits < 12 {
            acc = (acc << 8) | u32::from(*iter.next().expect("length checked"));
            bits += 8;
        }
        bits -= 12;
        out.push(((acc >> bits) & 0xFFF) as u16);
    }
    if acc & ((1 << bits) - 1) != 0 {
        return Err(Error::Format("nonzero padding in index block".into()));
    }
    Ok(out)
}

/// Packs 2-bit codes MSB-first, zero-padded to a byte boundary.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &c) in codes.iter().enumerate() {
        debug_assert!(c < 4);
        out[i / 4] |= (c & 0b11) << (6 - 2 * (i % 4));
    }
    out
}

pub fn unpack_codes(bytes: &[u8], count: usize) -> Result<Vec<u8>> {
    let expected = count.div_ceil(4);
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "code block is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        out.push((bytes[i / 4] >> (6 - 2 * (i % 4))) & 0b11);
    }
    // Padding codes must be zero for a canonical encoding.
    for i in count..expected * 4 {
        if (bytes[i / 4] >> (6 - 2 * (i % 4))) & 0b11 != 0 {
            return Err(Error::Format("nonzero padding in code block".into()));
        }
    }
    Ok(out)
}

pub fn serialize(delta: &CompressedDelta) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN + TRAILER_LEN + delta.chunks.len() * 120);
    out.extend_from_slice(&WIRE_MAGIC);
    out.push(delta.coding.wire_version());
    out.extend_from_slice(&delta.base_round.to_be_bytes());
    out.extend_from_slice(&delta.peer.0);
    out.extend_from_slice(&delta.layout_digest);
    out.extend_from_slice(&(delta.chunks.len() as u32).to_be_bytes());
    for chunk in &delta.chunks {
        match (&chunk.values, delta.coding) {
            (
                ChunkValues::TwoBit {
                    codes,
                    scale_lo,
                    scale_hi,
                },
                ValueCoding::TwoBit,
            ) => {
                out.extend_from_slice(&f16::from_f64(*scale_lo).to_bits().to_be_bytes());
                out.extend_from_slice(&f16::from_f64(*scale_hi).to_bits().to_be_bytes());
                out.extend_from_slice(&pack_indices(&chunk.indices)?);
                out.extend_from_slice(&pack_codes(codes));
            }
            (ChunkValues::Raw { values }, ValueCoding::Raw) => {
                out.extend_from_slice(&pack_indices(&chunk.indices)?);
                for v in values {
                    out.extend_from_slice(&v.to_bits().to_be_bytes());
                }
            }
            _ => {
                return Err(Error::InvalidData(
                    "chunk value coding does not match delta coding".into(),
                ))
            }
        }
    }
    let crc = crc32(&out);
    out.extend_from_slice(&crc.to_be_bytes());
    Ok(out)
}

/// Parses and validates a payload against the agreed chunk plan.
///
/// Any single corrupted byte fails the CRC (or an earlier structural check);
/// a payload that parses is bitwise the one that was serialized.
pub fn deserialize(bytes: &[u8], plan: &ChunkPlan) -> Result<CompressedDelta> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(Error::Format(format!(
            "payload truncated: {} bytes",
            bytes.len()
        )));
    }
    if bytes[..4] != WIRE_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let coding = match bytes[4] {
        WIRE_VERSION_2BIT => ValueCoding::TwoBit,
        WIRE_VERSION_RAW => ValueCoding::Raw,
        v => return Err(Error::Format(format!("unsupported version {v}"))),
    };
    let body_len = bytes.len() - TRAILER_LEN;
    let stored_crc = u32::from_be_bytes(bytes[body_len..].try_into().unwrap());
    if crc32(&bytes[..body_len]) != stored_crc {
        return Err(Error::Format("checksum mismatch".into()));
    }

    let base_round = u64::from_be_bytes(bytes[5..13].try_into().unwrap());
    let peer = PeerId(bytes[13..29].try_into().unwrap());
    let layout_digest: [u8; 32] = bytes[29..61].try_into().unwrap();
    let chunk_count = u32::from_be_bytes(bytes[61..65].try_into().unwrap()) as usize;

    if layout_digest != plan.layout_digest {
        return Err(Error::InvalidData("layout digest mismatch".into()));
    }
    if chunk_count != plan.descriptors.len() {
        return Err(Error::InvalidData(format!(
            "chunk count {chunk_count} does not match layout tiling ({})",
            plan.descriptors.len()
        )));
    }

    let mut cursor = HEADER_LEN;
    fn take<'a>(bytes: &'a [u8], cursor: &mut usize, end: usize, n: usize) -> Result<&'a [u8]> {
        if *cursor + n > end {
            return Err(Error::Format("payload truncated inside chunk data".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    }

    let mut chunks = Vec::with_capacity(chunk_count);
    for desc in &plan.descriptors {
        let k = effective_k(desc.len, &plan.geometry);
        match coding {
            ValueCoding::TwoBit => {
                let scale_lo = f64::from(f16::from_bits(u16::from_be_bytes(
                    take(bytes, &mut cursor, body_len, 2)?.try_into().unwrap(),
                )));
                let scale_hi = f64::from(f16::from_bits(u16::from_be_bytes(
                    take(bytes, &mut cursor, body_len, 2)?.try_into().unwrap(),
                )));
                let indices =
                    unpack_indices(take(bytes, &mut cursor, body_len, (k * 12).div_ceil(8))?, k)?;
                let codes = unpack_codes(take(bytes, &mut cursor, body_len, k.div_ceil(4))?, k)?;
                if !scale_lo.is_finite() || !scale_hi.is_finite() || scale_lo < 0.0 {
                    return Err(Error::InvalidData("scales must be finite and >= 0".into()));
                }
                if scale_lo > scale_hi {
                    return Err(Error::InvalidData("scale_lo exceeds scale_hi".into()));
                }
                chunks.push(CompressedChunk {
                    indices,
                    values: ChunkValues::TwoBit {
                        codes,
                        scale_lo,
                        scale_hi,
                    },
                });
            }
            ValueCoding::Raw => {
                let indices =
                    unpack_indices(take(bytes, &mut cursor, body_len, (k * 12).div_ceil(8))?, k)?;
                let raw = take(bytes, &mut cursor, body_len, k * 8)?;
                let values: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_bits(u64::from_be_bytes(b.try_into().unwrap())))
                    .collect();
                chunks.push(CompressedChunk {
                    indices,
                    values: ChunkValues::Raw { values },
                });
            }
        }
    }
    if cursor != body_len {
        return Err(Error::Format(format!(
            "{} trailing bytes after last chunk",
            body_len - cursor
        )));
    }

    let delta = CompressedDelta {
        base_round,
        peer,
        layout_digest,
        chunks,
        coding,
    };
    validate_indices(&delta, plan)?;
    Ok(delta)
}

fn validate_indices(delta: &CompressedDelta, plan: &ChunkPlan) -> Result<()> {
    for (chunk, desc) in delta.chunks.iter().zip(&plan.descriptors) {
        let k = effective_k(desc.len, &plan.geometry);
        if chunk.indices.len() != k {
            return Err(Error::InvalidData(format!(
                "chunk carries {} indices, expected {k}",
                chunk.indices.len()
            )));
        }
        let mut prev: Option<u16> = None;
        for &idx in &chunk.indices {
            if usize::from(idx) >= desc.len {
                return Err(Error::InvalidData(format!(
                    "index {idx} out of chunk of length {}",
                    desc.len
                )));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::InvalidData(
                        "indices must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(idx);
        }
    }
    Ok(())
}

/// Dense decode of a delta over its layout tiling.
pub fn decode_delta(delta: &CompressedDelta, plan: &ChunkPlan) -> Result<Vec<f64>> {
    if delta.chunks.len() != plan.descriptors.len() {
        return Err(Error::InvalidData(
            "chunk count does not match layout tiling".into(),
        ));
    }
    validate_indices(delta, plan)?;
    let mut dense = vec![0.0f64; plan.element_count];
    for (chunk, desc) in delta.chunks.iter().zip(&plan.descriptors) {
        let decoded = chunk.decode_values();
        for (&rel, value) in chunk.indices.iter().zip(decoded) {
            dense[desc.position(usize::from(rel))] = value;
        }
    }
    Ok(dense)
}

/// Information-theoretic lower bound on index bits per transmitted value:
/// `log2(C choose k) / k`, computed through log-space products so large C
/// cannot overflow.
pub fn index_entropy_bound(c: u64, k: u64) -> f64 {
    debug_assert!(k >= 1 && k <= c);
    let mut log2_binom = 0.0;
    for i in 1..=k {
        log2_binom += libm::log2((c - k + i) as f64) - libm::log2(i as f64);
    }
    log2_binom / k as f64
}

/// Idealized ratio: dense bits over wire bits for a full chunk, ignoring
/// per-chunk scale and header overhead.
pub fn ideal_compression_ratio(
    geometry: &ChunkGeometry,
    dense_bits: u32,
    wire_bits_per_selected: u32,
) -> f64 {
    (dense_bits as f64 * geometry.chunk_1d() as f64)
        / (geometry.k() as f64 * wire_bits_per_selected as f64)
}

/// Exact ratio measured from a real serialized payload.
pub fn measured_compression_ratio(element_count: usize, dense_bits: u32, wire_bytes: usize) -> f64 {
    (element_count as f64 * dense_bits as f64) / (wire_bytes as f64 * 8.0)
}

/// CRC-32 (IEEE 802.3, reflected), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    static TABLE: std::sync::OnceLock<[u32; 256]> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = [0u32; 256];
        for (i, entry) in t.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 {
                    0xEDB8_8320 ^ (c >> 1)
                } else {
                    c >> 1
                };
            }
            *entry = c;
        }
        t
    });
    let mut crc = !0u32;
    for &b in bytes {
        crc = table[((crc ^ u32::from(b)) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}
