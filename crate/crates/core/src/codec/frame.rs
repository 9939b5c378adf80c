//! Normative little-endian frame layout:
//!
//! | field      | type                     |
//! |------------|--------------------------|
//! | magic      | `"ICM1"`                 |
//! | version    | u16 = 1                  |
//! | agent_id   | u32                      |
//! | frame_id   | u32                      |
//! | D, C, H, W | u32 each                 |
//! | b          | u8                       |
//! | k          | u32                      |
//! | E          | D × f32                  |
//! | indices    | k × u32, strictly increasing |
//! | codes      | ⌈k·b/8⌉ bytes, LSB-first bit packing in index order |
//! | crc        | u32 CRC-32 (IEEE) of all preceding bytes |

use thiserror::Error;

use crate::error::{invalid, Error, Result};
use crate::smg::{BitWidth, QuantizedSparseMask};

pub const FRAME_MAGIC: &[u8; 4] = b"ICM1";
pub const FRAME_VERSION: u16 = 1;
/// Bytes before the latent payload.
pub const FRAME_HEADER_LEN: usize = 4 + 2 + 4 * 6 + 1 + 4;
const CRC_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("unexpected end of frame")]
    UnexpectedEnd,
    #[error("unrecognized frame")]
    UnrecognizedFrame,
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("crc mismatch: frame carries {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("index monotonicity violated")]
    IndexMonotonicity,
    #[error("invalid field: {0}")]
    InvalidField(String),
}

/// The transmitted pair `{E, M^q}` plus addressing metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageUnit {
    pub agent_id: u32,
    pub frame_id: u32,
    /// Channel count of the feature the sender encoded.
    pub channels: u32,
    /// `E` at wire precision.
    pub latent: Vec<f32>,
    pub mask: QuantizedSparseMask,
}

impl MessageUnit {
    pub fn latent_dim(&self) -> usize {
        self.latent.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent.is_empty() {
            return invalid("latent must be non-empty");
        }
        if self.channels == 0 {
            return invalid("channel count must be positive");
        }
        self.mask.validate()
    }

    /// Exact length of the encoded frame.
    pub fn wire_len(&self) -> usize {
        frame_len(self.latent.len(), self.mask.k(), self.mask.bits.get())
    }
}

/// Encoded size of a frame carrying a `d`-dim latent and `k` codes of `bits` bits.
pub fn frame_len(d: usize, k: usize, bits: u8) -> usize {
    FRAME_HEADER_LEN + 4 * d + 4 * k + (k * bits as usize).div_ceil(8) + CRC_LEN
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

fn pack_codes(codes: &[u8], bits: u8, out: &mut Vec<u8>) {
    let start = out.len();
    out.resize(start + (codes.len() * bits as usize).div_ceil(8), 0);
    let packed = &mut out[start..];
    let mut bit = 0usize;
    for &c in codes {
        for j in 0..bits {
            if (c >> j) & 1 == 1 {
                packed[bit / 8] |= 1 << (bit % 8);
            }
            bit += 1;
        }
    }
}

fn unpack_codes(packed: &[u8], k: usize, bits: u8) -> Vec<u8> {
    let mut bit = 0usize;
    (0..k)
        .map(|_| {
            let mut c = 0u8;
            for j in 0..bits {
                if (packed[bit / 8] >> (bit % 8)) & 1 == 1 {
                    c |= 1 << j;
                }
                bit += 1;
            }
            c
        })
        .collect()
}

pub fn encode_message(u: &MessageUnit) -> Result<Vec<u8>> {
    u.validate()?;
    let m = &u.mask;
    let mut out = Vec::with_capacity(u.wire_len());
    out.extend_from_slice(FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    for v in [
        u.agent_id,
        u.frame_id,
        to_u32(u.latent.len(), "D")?,
        u.channels,
        to_u32(m.height, "H")?,
        to_u32(m.width, "W")?,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(m.bits.get());
    out.extend_from_slice(&to_u32(m.k(), "k")?.to_le_bytes());
    for v in &u.latent {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for i in &m.indices {
        out.extend_from_slice(&i.to_le_bytes());
    }
    pack_codes(&m.codes, m.bits.get(), &mut out);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    debug_assert_eq!(out.len(), u.wire_len());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> &[u8] {
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.bytes(4).try_into().unwrap())
    }
}

/// Parses and validates a frame. Checks run in order: minimum length, magic,
/// declared length against the buffer, CRC, version, then field semantics.
pub fn decode_message(buf: &[u8]) -> std::result::Result<MessageUnit, FrameError> {
    if buf.len() < FRAME_HEADER_LEN + CRC_LEN {
        if buf.len() >= 4 && &buf[..4] != FRAME_MAGIC {
            return Err(FrameError::UnrecognizedFrame);
        }
        return Err(FrameError::UnexpectedEnd);
    }
    if &buf[..4] != FRAME_MAGIC {
        return Err(FrameError::UnrecognizedFrame);
    }
    let mut r = Reader { buf, pos: 4 };
    let version = u16::from_le_bytes(r.bytes(2).try_into().unwrap());
    let agent_id = r.u32();
    let frame_id = r.u32();
    let d = r.u32() as usize;
    let channels = r.u32();
    let h = r.u32() as usize;
    let w = r.u32() as usize;
    let bits = r.bytes(1)[0];
    let k = r.u32() as usize;

    let declared = frame_len(d, k, bits);
    if buf.len() < declared {
        return Err(FrameError::UnexpectedEnd);
    }
    if buf.len() > declared {
        return Err(FrameError::TrailingBytes(buf.len() - declared));
    }
    let body = declared - CRC_LEN;
    let stored = u32::from_le_bytes(buf[body..].try_into().unwrap());
    let computed = crc32fast::hash(&buf[..body]);
    if stored != computed {
        return Err(FrameError::CrcMismatch { stored, computed });
    }
    if version != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let bits = BitWidth::new(bits).map_err(|_| FrameError::InvalidField(format!("bit width {bits}")))?;
    if d == 0 || channels == 0 || h == 0 || w == 0 {
        return Err(FrameError::InvalidField("zero dimension".into()));
    }
    if k == 0 || k > h.saturating_mul(w) {
        return Err(FrameError::InvalidField(format!("k = {k} outside 1..={}", h * w)));
    }

    let latent = (0..d).map(|_| f32::from_le_bytes(r.bytes(4).try_into().unwrap())).collect();
    let indices: Vec<u32> = (0..k).map(|_| r.u32()).collect();
    if indices.windows(2).any(|p| p[0] >= p[1]) {
        return Err(FrameError::IndexMonotonicity);
    }
    if indices[k - 1] as usize >= h * w {
        return Err(FrameError::InvalidField(format!("index {} outside {h}x{w}", indices[k - 1])));
    }
    let codes = unpack_codes(r.bytes((k * bits.get() as usize).div_ceil(8)), k, bits.get());
    Ok(MessageUnit {
        agent_id,
        frame_id,
        channels,
        latent,
        mask: QuantizedSparseMask {
            height: h,
            width: w,
            indices,
            codes,
            bits,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(k: usize, bits: u8) -> MessageUnit {
        let b = BitWidth::new(bits).unwrap();
        MessageUnit {
            agent_id: 7,
            frame_id: 42,
            channels: 16,
            latent: vec![1.5, -0.25],
            mask: QuantizedSparseMask {
                height: 4,
                width: 4,
                indices: (0..k as u32).map(|i| i * 2).collect(),
                codes: (0..k).map(|i| (i as u8 * 5) & b.max_code()).collect(),
                bits: b,
            },
        }
    }

    #[test]
    fn round_trip_and_length() {
        let u = unit(3, 4);
        let bytes = encode_message(&u).unwrap();
        assert_eq!(bytes.len(), FRAME_HEADER_LEN + 8 + 12 + 2 + 4);
        assert_eq!(&bytes[..4], b"ICM1");
        assert_eq!(decode_message(&bytes).unwrap(), u);
    }

    #[test]
    fn single_code_is_one_byte() {
        let u = unit(1, 4);
        assert_eq!(encode_message(&u).unwrap().len(), FRAME_HEADER_LEN + 8 + 4 + 1 + 4);
    }

    #[test]
    fn codes_pack_lsb_first() {
        let mut out = Vec::new();
        pack_codes(&[0b101, 0b011, 0b110], 3, &mut out);
        // stream bits 1,0,1, 1,1,0, 0,1,1 fill byte 0 from bit 0 upward
        assert_eq!(out, vec![0b1001_1101, 0b0000_0001]);
        assert_eq!(unpack_codes(&out, 3, 3), vec![0b101, 0b011, 0b110]);
    }

    #[test]
    fn zero_k_is_rejected_at_encode() {
        let mut u = unit(1, 4);
        u.mask.indices.clear();
        u.mask.codes.clear();
        assert!(encode_message(&u).is_err());
    }

    #[test]
    fn named_decode_errors() {
        let u = unit(3, 4);
        let bytes = encode_message(&u).unwrap();

        let err = decode_message(&bytes[..bytes.len() - 1]).unwrap_err();
        assert_eq!(err, FrameError::UnexpectedEnd);
        assert_eq!(err.to_string(), "unexpected end of frame");
        assert_eq!(decode_message(&bytes[..10]).unwrap_err(), FrameError::UnexpectedEnd);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        let err = decode_message(&bad).unwrap_err();
        assert_eq!(err.to_string(), "unrecognized frame");

        let mut extra = bytes.clone();
        extra.push(0);
        assert_eq!(decode_message(&extra).unwrap_err(), FrameError::TrailingBytes(1));

        // Swap two indices and re-seal the CRC so only monotonicity is wrong.
        let mut u2 = u.clone();
        u2.mask.indices = vec![0, 4, 2];
        let mut raw = encode_unchecked(&u2);
        let body = raw.len() - 4;
        let crc = crc32fast::hash(&raw[..body]);
        raw[body..].copy_from_slice(&crc.to_le_bytes());
        let err = decode_message(&raw).unwrap_err();
        assert_eq!(err, FrameError::IndexMonotonicity);
        assert_eq!(err.to_string(), "index monotonicity violated");

        let mut v2 = bytes.clone();
        v2[4] = 2;
        let body = v2.len() - 4;
        let crc = crc32fast::hash(&v2[..body]);
        v2[body..].copy_from_slice(&crc.to_le_bytes());
        assert_eq!(decode_message(&v2).unwrap_err(), FrameError::UnsupportedVersion(2));
    }

    /// Encoder without the invariant checks, for forging bad frames.
    fn encode_unchecked(u: &MessageUnit) -> Vec<u8> {
        let mut good = u.clone();
        let mut sorted = good.mask.indices.clone();
        sorted.sort_unstable();
        good.mask.indices = sorted;
        let mut bytes = encode_message(&good).unwrap();
        let off = FRAME_HEADER_LEN + 4 * u.latent.len();
        for (j, i) in u.mask.indices.iter().enumerate() {
            bytes[off + 4 * j..off + 4 * j + 4].copy_from_slice(&i.to_le_bytes());
        }
        bytes
    }

    #[test]
    fn payload_bit_flips_fail_crc() {
        let bytes = encode_message(&unit(2, 3)).unwrap();
        for byte in FRAME_HEADER_LEN..bytes.len() {
            for bit in 0..8 {
                let mut c = bytes.clone();
                c[byte] ^= 1 << bit;
                assert!(
                    matches!(decode_message(&c), Err(FrameError::CrcMismatch { .. })),
                    "byte {byte} bit {bit}"
                );
            }
        }
    }
}
