//! The `MNIC` bitstream container.
//!
//! Layout (all multi-byte fields big-endian):
//! magic `MNIC`, version u8, flags u8 (bit0 = hard mask, bit1 = lambda
//! modulation applied), width u16, height u16, latent channels u8, lambda
//! f32, model hash u32 (FNV-1a over the checkpoint file bytes), payload
//! length u32, then the range-coder payload. Width and height are the
//! source dimensions before padding; the lambda field is metadata only.

use anyhow::{bail, Result};

pub const MAGIC: [u8; 4] = *b"MNIC";
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 23;
pub const FLAG_HARD_MASK: u8 = 0b01;
pub const FLAG_MODULATED: u8 = 0b10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub flags: u8,
    pub width: u16,
    pub height: u16,
    pub channels: u8,
    pub lambda: f32,
    pub model_hash: u32,
    pub payload_len: u32,
}

impl Header {
    pub fn hard_mask(&self) -> bool {
        self.flags & FLAG_HARD_MASK != 0
    }

    pub fn modulated(&self) -> bool {
        self.flags & FLAG_MODULATED != 0
    }
}

/// 32-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u32 {
    let mut hash: u32 = 0x811c9dc5;
    for &b in bytes {
        hash ^= b as u32;
        hash = hash.wrapping_mul(0x0100_0193);
    }
    hash
}

pub fn write(header: &Header, payload: &[u8]) -> Vec<u8> {
    assert_eq!(header.payload_len as usize, payload.len(), "length field mismatch");
    let mut out = Vec::with_capacity(HEADER_BYTES + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(header.flags);
    out.extend_from_slice(&header.width.to_be_bytes());
    out.extend_from_slice(&header.height.to_be_bytes());
    out.push(header.channels);
    out.extend_from_slice(&header.lambda.to_be_bytes());
    out.extend_from_slice(&header.model_hash.to_be_bytes());
    out.extend_from_slice(&header.payload_len.to_be_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn read(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < HEADER_BYTES {
        bail!("file too short for a bitstream header ({} bytes)", bytes.len());
    }
    if bytes[0..4] != MAGIC {
        bail!("bad magic {:02x?}", &bytes[0..4]);
    }
    if bytes[4] != VERSION {
        bail!("unsupported version {}", bytes[4]);
    }
    let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
    let be32 = |i: usize| u32::from_be_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
    let header = Header {
        flags: bytes[5],
        width: be16(6),
        height: be16(8),
        channels: bytes[10],
        lambda: f32::from_be_bytes([bytes[11], bytes[12], bytes[13], bytes[14]]),
        model_hash: be32(15),
        payload_len: be32(19),
    };
    let payload = &bytes[HEADER_BYTES..];
    if payload.len() != header.payload_len as usize {
        bail!("payload length {} does not match header field {}", payload.len(), header.payload_len);
    }
    Ok((header, payload))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_header(payload_len: u32) -> Header {
        Header {
            flags: FLAG_MODULATED,
            width: 33,
            height: 17,
            channels: 32,
            lambda: 16.0,
            model_hash: 0xdeadbeef,
            payload_len,
        }
    }

    #[test]
    fn round_trip() {
        let payload = [1u8, 2, 3, 4, 5];
        let bytes = write(&sample_header(5), &payload);
        assert_eq!(bytes.len(), HEADER_BYTES + 5);
        let (header, body) = read(&bytes).unwrap();
        assert_eq!(header, sample_header(5));
        assert_eq!(body, payload);
        assert!(header.modulated());
        assert!(!header.hard_mask());
    }

    #[test]
    fn rejects_corruption() {
        let bytes = write(&sample_header(0), &[]);
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(read(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(read(&bad_version).is_err());
        let mut truncated = write(&sample_header(4), &[1, 2, 3, 4]);
        truncated.pop();
        assert!(read(&truncated).is_err());
        assert!(read(&bytes[..10]).is_err());
    }

    #[test]
    fn fnv1a_reference_values() {
        // Standard FNV-1a test vectors.
        assert_eq!(fnv1a(b""), 0x811c9dc5);
        assert_eq!(fnv1a(b"a"), 0xe40c292c);
        assert_eq!(fnv1a(b"foobar"), 0xbf9cf968);
    }
}
