// SPDX-License-Identifier: MIT OR Apache-2.0

//! Versioned binary container shared by every file format in the crate.
//!
//! Layout (little-endian):
//!
//! | offset | size         | field                          |
//! |--------|--------------|--------------------------------|
//! | 0      | 8            | magic                          |
//! | 8      | 4            | format version (`u32`)         |
//! | 12     | 4            | header length `H` (`u32`)      |
//! | 16     | `H`          | UTF-8 JSON metadata            |
//! | 16+`H` | rest of file | raw numeric payload            |

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub(crate) const PREFIX_LEN: usize = 16;

/// A parsed container whose payload has not yet been decoded.
pub(crate) struct Container<'a> {
    pub header: &'a [u8],
    pub payload: PayloadReader<'a>,
}

/// Serialize a container into `out`.
pub(crate) fn encode(magic: &[u8; 8], version: u32, header: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    out.extend_from_slice(payload);
    out
}

/// Parse the fixed prefix and metadata block.
pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 8], max_version: u32) -> Result<Container<'a>> {
    if bytes.len() < PREFIX_LEN {
        return Err(Error::format(
            bytes.len() as u64,
            format!(
                "file is {} bytes, shorter than the {PREFIX_LEN}-byte prefix",
                bytes.len()
            ),
        ));
    }
    if &bytes[..8] != magic {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..8]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version == 0 || version > max_version {
        return Err(Error::format(8, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = PREFIX_LEN + header_len;
    if bytes.len() < header_end {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated metadata block: need {header_len} bytes from offset {PREFIX_LEN}"),
        ));
    }
    Ok(Container {
        header: &bytes[PREFIX_LEN..header_end],
        payload: PayloadReader {
            bytes: &bytes[header_end..],
            base: header_end as u64,
            pos: 0,
        },
    })
}

/// Sequential little-endian reader over the payload that reports absolute
/// file offsets on failure.
pub(crate) struct PayloadReader<'a> {
    bytes: &'a [u8],
    base: u64,
    pos: usize,
}

impl<'a> PayloadReader<'a> {
    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn offset(&self) -> u64 {
        self.base + self.pos as u64
    }

    /// Fail unless exactly `expected` bytes remain.
    pub fn expect_len(&self, expected: usize) -> Result<()> {
        let have = self.remaining();
        if have < expected {
            Err(Error::format(
                self.base + self.bytes.len() as u64,
                format!("truncated payload: header declares {expected} bytes, found {have}"),
            ))
        } else if have > expected {
            Err(Error::format(
                self.offset() + expected as u64,
                format!("payload size mismatch: header declares {expected} bytes, found {have}"),
            ))
        } else {
            Ok(())
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                self.base + self.bytes.len() as u64,
                format!("truncated payload: needed {n} bytes at offset {}", self.offset()),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn f32s(&mut self, count: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(count * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<()> {
        self.expect_len(0)
    }
}

pub(crate) fn push_f32s(out: &mut Vec<u8>, values: &[f32]) {
    out.reserve(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Write via a sibling temp file and rename so readers never see a partial file.
pub(crate) fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp{}",
        path.extension().and_then(|e| e.to_str()).unwrap_or(""),
        std::process::id()
    ));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MAGIC: &[u8; 8] = b"TESTMAGC";

    #[test]
    fn roundtrip_prefix_and_payload() {
        let mut payload = Vec::new();
        push_f32s(&mut payload, &[1.0, -2.5]);
        let bytes = encode(MAGIC, 1, b"{}", &payload);
        assert_eq!(bytes.len(), PREFIX_LEN + 2 + 8);
        let mut c = decode(&bytes, MAGIC, 1).unwrap();
        assert_eq!(c.header, b"{}");
        c.payload.expect_len(8).unwrap();
        assert_eq!(c.payload.f32s(2).unwrap(), vec![1.0, -2.5]);
        c.payload.finish().unwrap();
    }

    #[test]
    fn bad_magic_reports_offset_zero() {
        let bytes = encode(b"OTHERMAG", 1, b"{}", &[]);
        match decode(&bytes, MAGIC, 1) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("accepted bad magic"),
        }
    }

    #[test]
    fn truncation_and_excess_are_reported() {
        let bytes = encode(MAGIC, 1, b"{}", &[0u8; 8]);
        let c = decode(&bytes, MAGIC, 1).unwrap();
        assert!(matches!(c.payload.expect_len(12), Err(Error::Format { offset, .. }) if offset == 26));
        assert!(matches!(c.payload.expect_len(4), Err(Error::Format { offset, .. }) if offset == 22));
        assert!(decode(&bytes[..17], MAGIC, 1).is_err());
        assert!(decode(&bytes, MAGIC, 0).is_err());
    }
}
