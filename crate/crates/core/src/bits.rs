//! Packed boolean vectors, least significant bit first, base64 encoded.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;

use crate::error::{format_error, Result};

pub fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
        out[i / 8] |= 1 << (i % 8);
    }
    out
}

pub fn unpack(bytes: &[u8], len: usize) -> Result<Vec<bool>> {
    if bytes.len() != len.div_ceil(8) {
        return Err(format_error!(
            "bitset of {} entries needs {} bytes, found {}",
            len,
            len.div_ceil(8),
            bytes.len()
        ));
    }
    Ok((0..len).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}

pub fn encode(bits: &[bool]) -> String {
    STANDARD.encode(pack(bits))
}

pub fn decode(text: &str, len: usize) -> Result<Vec<bool>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| format_error!("bad base64 bitset: {}", e))?;
    unpack(&bytes, len)
}
