//! Wire form of a [`SelectionMask`].
//!
//! Container layout:
//!
//! ```text
//! [u32 LE bit_length][raw deflate stream of the packed bits]
//! ```
//!
//! Bits are packed most-significant-bit first and zero-padded to a byte
//! boundary. The deflate level is fixed so the same mask always produces the
//! same bytes.

use flate2::{Compress, Compression, Decompress, FlushCompress, FlushDecompress, Status};
use thiserror::Error;

use crate::refiner::SelectionMask;

/// Deflate level used for every payload.
pub const LEVEL: u32 = 9;

const GROW_BYTES: usize = 1 << 16;
const HEADER_LEN: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("corrupt mask stream: {0}")]
    Corrupt(String),
    #[error("mask declares {declared} bits but the stream holds {decoded}")]
    Length { declared: u64, decoded: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CompressedMask {
    bytes: Vec<u8>,
    bit_length: u32,
}

impl CompressedMask {
    /// Full container bytes, header included.
    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn bit_length(&self) -> u32 {
        self.bit_length
    }

    /// Parse the header only; the body is checked by [`unpack`].
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Corrupt(format!(
                "container is {} bytes, shorter than its header",
                bytes.len()
            )));
        }
        let bit_length = u32::from_le_bytes(bytes[..HEADER_LEN].try_into().unwrap());
        Ok(Self { bytes, bit_length })
    }
}

pub fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 0x80 >> (i % 8);
        }
    }
    out
}

pub fn pack(mask: &SelectionMask) -> CompressedMask {
    let bit_length = u32::try_from(mask.len()).expect("mask longer than u32::MAX bits");
    let raw = pack_bits(mask.bits());

    let mut bytes = Vec::with_capacity(HEADER_LEN + raw.len() / 4 + 64);
    bytes.extend_from_slice(&bit_length.to_le_bytes());
    let mut z = Compress::new(Compression::new(LEVEL), false);
    loop {
        bytes.reserve(256);
        let consumed = z.total_in() as usize;
        let status = z
            .compress_vec(&raw[consumed..], &mut bytes, FlushCompress::Finish)
            .expect("deflate into a growable buffer");
        if status == Status::StreamEnd {
            break;
        }
    }
    CompressedMask { bytes, bit_length }
}

pub fn unpack(c: &CompressedMask) -> Result<SelectionMask, CodecError> {
    let declared = c.bit_length as usize;
    let want = declared.div_ceil(8);
    let body = &c.bytes[HEADER_LEN..];

    // One spare byte lets an over-long stream be detected without inflating
    // it in full. The header is untrusted, so the buffer grows with the output
    // instead of being sized from it.
    let mut raw = Vec::with_capacity((want + 1).min(GROW_BYTES));
    let mut z = Decompress::new(false);
    loop {
        if raw.len() == raw.capacity() {
            raw.reserve((want + 1 - raw.len()).min(raw.capacity().max(GROW_BYTES)));
        }
        let before_in = z.total_in();
        let before_out = z.total_out();
        let status = z
            .decompress_vec(&body[before_in as usize..], &mut raw, FlushDecompress::Finish)
            .map_err(|e| CodecError::Corrupt(e.to_string()))?;
        match status {
            Status::StreamEnd => break,
            _ if raw.len() > want => {
                return Err(CodecError::Corrupt("stream inflates past declared length".into()))
            }
            _ if z.total_in() == before_in && z.total_out() == before_out => {
                return Err(CodecError::Corrupt("truncated deflate stream".into()));
            }
            _ => {}
        }
    }
    if (z.total_in() as usize) != body.len() {
        return Err(CodecError::Corrupt("trailing bytes after deflate stream".into()));
    }
    if raw.len() < want {
        return Err(CodecError::Length {
            declared: declared as u64,
            decoded: raw.len() as u64 * 8,
        });
    }
    if raw.len() > want {
        return Err(CodecError::Corrupt("stream inflates past declared length".into()));
    }
    if declared % 8 != 0 {
        let pad = raw[want - 1] & (0xFFu8 >> (declared % 8));
        if pad != 0 {
            return Err(CodecError::Corrupt("nonzero padding bits".into()));
        }
    }
    let bits = (0..declared)
        .map(|i| raw[i / 8] & (0x80 >> (i % 8)) != 0)
        .collect();
    Ok(SelectionMask::from_bits(bits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8]) -> SelectionMask {
        SelectionMask::from_bits(bits.iter().map(|&b| b == 1).collect())
    }

    #[test]
    fn msb_first_packing() {
        assert_eq!(pack_bits(&[true, false, true]), vec![0b1010_0000]);
        assert_eq!(
            pack_bits(&[false, false, false, false, false, false, false, true, true]),
            vec![0x01, 0x80]
        );
        assert!(pack_bits(&[]).is_empty());
    }

    #[test]
    fn all_ones_8192_is_tiny() {
        let c = pack(&SelectionMask::all_ones(8192));
        assert!(c.as_bytes().len() <= 64, "{} bytes", c.as_bytes().len());
        assert_eq!(unpack(&c).unwrap(), SelectionMask::all_ones(8192));
    }

    #[test]
    fn empty_mask_round_trips() {
        let c = pack(&SelectionMask::default());
        assert_eq!(c.bit_length(), 0);
        assert_eq!(unpack(&c).unwrap(), SelectionMask::default());
    }

    #[test]
    fn small_masks_round_trip() {
        for m in [mask(&[1]), mask(&[0]), mask(&[1, 0, 1]), mask(&[0; 17]), mask(&[1, 1, 0, 0, 1, 1, 0, 0, 1])] {
            assert_eq!(unpack(&pack(&m)).unwrap(), m);
        }
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = SelectionMask::from_bits((0..4000).map(|i| (i / 37) % 3 == 0).collect());
        let bytes = pack(&m).into_bytes();
        for cut in [bytes.len() - 1, bytes.len() / 2, HEADER_LEN + 1, HEADER_LEN] {
            let c = CompressedMask::from_bytes(bytes[..cut].to_vec()).unwrap();
            assert!(unpack(&c).is_err(), "cut at {cut}");
        }
        assert!(CompressedMask::from_bytes(bytes[..3].to_vec()).is_err());
    }

    #[test]
    fn declared_length_mismatch() {
        let bytes = pack(&mask(&[1, 0, 1, 1, 0, 0, 1, 0, 1])).into_bytes();
        let mut longer = bytes.clone();
        longer[..4].copy_from_slice(&64u32.to_le_bytes());
        assert!(matches!(
            unpack(&CompressedMask::from_bytes(longer).unwrap()),
            Err(CodecError::Length { declared: 64, decoded: 16 })
        ));
        let mut shorter = bytes;
        shorter[..4].copy_from_slice(&3u32.to_le_bytes());
        assert!(unpack(&CompressedMask::from_bytes(shorter).unwrap()).is_err());
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let mut bytes = pack(&mask(&[1, 0, 1])).into_bytes();
        bytes.push(0);
        assert!(unpack(&CompressedMask::from_bytes(bytes).unwrap()).is_err());
    }

    #[test]
    fn deterministic_bytes() {
        let m = SelectionMask::from_bits((0..8192).map(|i| (i * 7919) % 13 < 5).collect());
        assert_eq!(pack(&m), pack(&m));
    }

    #[test]
    fn huge_declared_length_is_cheap_to_reject() {
        let mut bytes = pack(&mask(&[1, 0, 1])).into_bytes();
        bytes[..4].copy_from_slice(&u32::MAX.to_le_bytes());
        let c = CompressedMask::from_bytes(bytes).unwrap();
        assert!(matches!(unpack(&c), Err(CodecError::Length { .. })));
    }
}
