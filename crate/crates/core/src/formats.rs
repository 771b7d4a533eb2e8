//! Shared framing for the binary artifact files.
//!
//! Every file is `magic (4 bytes) | u32 LE header length | JSON header |
//! payload of little-endian f64`. The fourth magic byte is the format
//! version digit, so `SMD2` read by a `SMD1` reader is a version error
//! while any other prefix is a magic error.

use std::fs;
use std::path::Path;

use crate::error::{FormatError, Result};

pub(crate) fn encode(magic: &[u8; 4], header: &[u8], payload: impl IntoIterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + header.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Splits a file into its JSON header bytes and payload bytes.
pub(crate) fn decode<'a>(bytes: &'a [u8], magic: &[u8; 4], format: &'static str) -> Result<(&'a [u8], &'a [u8])> {
    if bytes.len() < 4 {
        return Err(FormatError::Truncated {
            what: "magic",
            needed: 4 - bytes.len(),
        }
        .into());
    }
    let found = &bytes[..4];
    if found != magic {
        if found[..3] == magic[..3] && found[3].is_ascii_digit() {
            return Err(FormatError::UnsupportedVersion {
                format,
                found: (found[3] - b'0') as u32,
                supported: (magic[3] - b'0') as u32,
            }
            .into());
        }
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
            found: found.to_vec(),
        }
        .into());
    }
    if bytes.len() < 8 {
        return Err(FormatError::Truncated {
            what: "header length",
            needed: 8 - bytes.len(),
        }
        .into());
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let rest = &bytes[8..];
    if rest.len() < hlen {
        return Err(FormatError::Truncated {
            what: "header",
            needed: hlen - rest.len(),
        }
        .into());
    }
    Ok((&rest[..hlen], &rest[hlen..]))
}

pub(crate) fn parse_header<T: serde::de::DeserializeOwned>(header: &[u8]) -> Result<T> {
    serde_json::from_slice(header).map_err(|e| FormatError::Header(e.to_string()).into())
}

/// Decodes exactly `count` f64 values.
pub(crate) fn read_f64s(payload: &[u8], count: usize, what: &'static str) -> Result<Vec<f64>> {
    let need = count * 8;
    if payload.len() < need {
        return Err(FormatError::Truncated {
            what,
            needed: need - payload.len(),
        }
        .into());
    }
    if payload.len() > need {
        return Err(FormatError::TrailingBytes(payload.len() - need).into());
    }
    Ok(payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub(crate) fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.as_ref().parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}
