//! LZ4 block compression with a CRC-32 integrity check.
//!
//! Frame: `crc32(uncompressed) u32 ‖ uncompressed length u32 ‖ LZ4 block`.

use thiserror::Error;

pub const FRAME_OVERHEAD: usize = 8;
const MAX_LEN: usize = 1 << 31;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CompressError {
    #[error("compressed frame shorter than its header")]
    Truncated,
    #[error("declared length {0} exceeds the frame limit")]
    TooLarge(usize),
    #[error("LZ4 block is corrupt")]
    Corrupt,
    #[error("checksum mismatch")]
    Checksum,
}

pub fn compress(data: &[u8]) -> Vec<u8> {
    let block = lz4_flex::block::compress(data);
    let mut out = Vec::with_capacity(FRAME_OVERHEAD + block.len());
    out.extend_from_slice(&crc32fast::hash(data).to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    out
}

pub fn decompress(frame: &[u8]) -> Result<Vec<u8>, CompressError> {
    if frame.len() < FRAME_OVERHEAD {
        return Err(CompressError::Truncated);
    }
    let crc = u32::from_le_bytes(frame[0..4].try_into().unwrap());
    let len = u32::from_le_bytes(frame[4..8].try_into().unwrap()) as usize;
    if len > MAX_LEN {
        return Err(CompressError::TooLarge(len));
    }
    let data = lz4_flex::block::decompress(&frame[FRAME_OVERHEAD..], len).map_err(|_| CompressError::Corrupt)?;
    if data.len() != len {
        return Err(CompressError::Corrupt);
    }
    if crc32fast::hash(&data) != crc {
        return Err(CompressError::Checksum);
    }
    Ok(data)
}
