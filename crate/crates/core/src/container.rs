//! Shared binary container: 4-byte magic, `u32` version, `u64`-length-prefixed
//! canonical JSON header, then raw little-endian `f32` payload.
//!
//! All integers are little-endian. Canonical JSON means sorted object keys and
//! no insignificant whitespace, so identical headers hash identically.

use std::io::{Read, Write};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Serialize a header to canonical JSON bytes (keys sorted recursively).
pub fn canonical_json<T: Serialize>(header: &T) -> Result<Vec<u8>> {
    // serde_json's `Value` map is ordered by key.
    let value = serde_json::to_value(header)?;
    Ok(serde_json::to_vec(&value)?)
}

pub fn write_container<W: Write, H: Serialize>(
    w: &mut W,
    magic: &[u8; 4],
    version: u32,
    header: &H,
    tensors: &[&[f32]],
) -> Result<()> {
    let json = canonical_json(header)?;
    w.write_all(magic)?;
    w.write_all(&version.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in tensors {
        write_f32s(w, t)?;
    }
    Ok(())
}

pub fn write_f32s<W: Write>(w: &mut W, values: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(values.len() * 4);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// A parsed container whose payload has not yet been split into tensors.
pub struct RawContainer<H> {
    pub version: u32,
    pub header: H,
    pub payload: Vec<u8>,
}

pub fn read_container<R: Read, H: DeserializeOwned>(
    r: &mut R,
    magic: &[u8; 4],
    supported_versions: &[u32],
) -> Result<RawContainer<H>> {
    let mut found = [0u8; 4];
    read_exact_or_size(r, &mut found, 4)?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    let mut word = [0u8; 4];
    read_exact_or_size(r, &mut word, 4)?;
    let version = u32::from_le_bytes(word);
    if !supported_versions.contains(&version) {
        return Err(Error::UnsupportedVersion(version));
    }
    let mut len = [0u8; 8];
    read_exact_or_size(r, &mut len, 8)?;
    let len = u64::from_le_bytes(len);
    let mut json = Vec::new();
    let got = r.take(len).read_to_end(&mut json)? as u64;
    if got != len {
        return Err(Error::SizeMismatch {
            expected: len,
            actual: got,
        });
    }
    let header = serde_json::from_slice(&json)?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    Ok(RawContainer {
        version,
        header,
        payload,
    })
}

fn read_exact_or_size<R: Read>(r: &mut R, buf: &mut [u8], expected: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(Error::SizeMismatch {
                expected,
                actual: filled as u64,
            });
        }
        filled += n;
    }
    Ok(())
}

/// Sequential reader over an `f32` payload that checks the total size up front.
pub struct PayloadReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> PayloadReader<'a> {
    /// Fails unless the payload holds exactly `expected_floats` values.
    pub fn new(bytes: &'a [u8], expected_floats: u64) -> Result<Self> {
        let expected = expected_floats * 4;
        if bytes.len() as u64 != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: bytes.len() as u64,
            });
        }
        Ok(Self { bytes, offset: 0 })
    }

    pub fn take(&mut self, n: usize) -> Vec<f32> {
        let end = self.offset + n * 4;
        let out = self.bytes[self.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        self.offset = end;
        out
    }
}
