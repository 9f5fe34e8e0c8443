// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared container layout for activation files and checkpoints:
//! 8-byte ASCII magic, `u32` little-endian header length, UTF-8 JSON header,
//! little-endian `f32` payload.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Result, SteerError};

pub(crate) const MAGIC_LEN: usize = 8;
const PREFIX_LEN: usize = MAGIC_LEN + 4;

/// Serializes the container to bytes.
pub(crate) fn encode<H: Serialize>(magic: &[u8; MAGIC_LEN], header: &H, payload: &[&[f32]]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let header_len = u32::try_from(header.len()).map_err(|_| SteerError::Input("header exceeds 4 GiB".into()))?;
    let n: usize = payload.iter().map(|s| s.len()).sum();
    let mut bytes = Vec::with_capacity(PREFIX_LEN + header.len() + 4 * n);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&header_len.to_le_bytes());
    bytes.extend_from_slice(&header);
    for chunk in payload {
        for v in chunk.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(bytes)
}

pub(crate) fn write<H: Serialize>(path: &Path, magic: &[u8; MAGIC_LEN], header: &H, payload: &[&[f32]]) -> Result<()> {
    let bytes = encode(magic, header, payload)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| SteerError::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| SteerError::io(path, e))
}

/// A decoded container whose payload has not been interpreted yet.
pub(crate) struct Container<H> {
    pub header: H,
    pub payload: Vec<f32>,
    pub payload_offset: u64,
}

pub(crate) fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; MAGIC_LEN]) -> Result<Container<H>> {
    let bytes = fs::read(path).map_err(|e| SteerError::io(path, e))?;
    decode(path, &bytes, magic)
}

pub(crate) fn decode<H: DeserializeOwned>(path: &Path, bytes: &[u8], magic: &[u8; MAGIC_LEN]) -> Result<Container<H>> {
    let expected = String::from_utf8_lossy(magic);
    if bytes.len() < MAGIC_LEN || &bytes[..MAGIC_LEN] != magic {
        return Err(SteerError::format(path, 0, format!("bad magic, expected {expected:?}")));
    }
    if bytes.len() < PREFIX_LEN {
        return Err(SteerError::format(path, MAGIC_LEN as u64, "truncated header length"));
    }
    let header_len = u32::from_le_bytes(bytes[MAGIC_LEN..PREFIX_LEN].try_into().expect("four bytes")) as usize;
    let payload_start = PREFIX_LEN + header_len;
    if bytes.len() < payload_start {
        return Err(SteerError::format(
            path,
            bytes.len() as u64,
            format!("truncated header: expected {header_len} bytes"),
        ));
    }
    let header: H = serde_json::from_slice(&bytes[PREFIX_LEN..payload_start]).map_err(|e| {
        SteerError::format(
            path,
            (PREFIX_LEN + e.column().saturating_sub(1)) as u64,
            format!("invalid header: {e}"),
        )
    })?;
    let body = &bytes[payload_start..];
    if body.len() % 4 != 0 {
        return Err(SteerError::format(
            path,
            bytes.len() as u64,
            format!("payload of {} bytes is not a whole number of f32 values", body.len()),
        ));
    }
    let payload = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
        .collect();
    Ok(Container {
        header,
        payload,
        payload_offset: payload_start as u64,
    })
}

/// Rejects payloads whose length differs from the header's declaration.
pub(crate) fn check_payload_len(path: &Path, c_offset: u64, actual: usize, expected: usize) -> Result<()> {
    if actual != expected {
        return Err(SteerError::format(
            path,
            c_offset + 4 * actual.min(expected) as u64,
            format!("truncated or oversized payload: header declares {expected} values, file holds {actual}"),
        ));
    }
    Ok(())
}

/// Rejects the first non-finite payload value, reporting its byte offset.
pub(crate) fn check_finite(path: &Path, c_offset: u64, payload: &[f32]) -> Result<()> {
    if let Some(i) = payload.iter().position(|v| !v.is_finite()) {
        return Err(SteerError::format(
            path,
            c_offset + 4 * i as u64,
            format!("non-finite value {} in payload", payload[i]),
        ));
    }
    Ok(())
}
