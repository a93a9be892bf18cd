//! Shared binary framing for datasets and model files:
//! `magic[4] | version u32 LE | header_len u32 LE | JSON header | f32 LE payload | CRC32(payload) LE`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{Error, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"CPDF";
pub const AUTOENCODER_MAGIC: [u8; 4] = *b"CPAE";
pub const DENOISER_MAGIC: [u8; 4] = *b"CPDM";
pub const FORMAT_VERSION: u32 = 1;

const PREFIX: usize = 12;
const TRAILER: usize = 4;

pub fn encode<H: Serialize>(magic: [u8; 4], header: &H, payload: &[f32]) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREFIX + header.len() + 4 * payload.len() + TRAILER);
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    let start = out.len();
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses a container, checking magic, version, length and checksum in that order.
pub fn decode<H: DeserializeOwned>(magic: [u8; 4], bytes: &[u8]) -> Result<(H, Vec<f32>)> {
    if bytes.len() < 4 {
        return Err(Error::Truncated(format!("{} bytes, no magic", bytes.len())));
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if found != magic {
        return Err(Error::BadMagic {
            expected: magic,
            found,
        });
    }
    if bytes.len() < PREFIX {
        return Err(Error::Truncated(format!(
            "{} bytes, prefix needs {PREFIX}",
            bytes.len()
        )));
    }
    let version = u32_at(bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let header_len = u32_at(bytes, 8) as usize;
    let body = bytes.len() - PREFIX;
    if body < header_len + TRAILER {
        return Err(Error::Truncated(format!(
            "header claims {header_len} bytes but only {body} remain"
        )));
    }
    let payload = &bytes[PREFIX + header_len..bytes.len() - TRAILER];
    if !payload.len().is_multiple_of(4) {
        return Err(Error::Truncated(format!(
            "payload of {} bytes is not whole floats",
            payload.len()
        )));
    }
    let stored = u32_at(bytes, bytes.len() - TRAILER);
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header = serde_json::from_slice(&bytes[PREFIX..PREFIX + header_len])
        .map_err(|e| Error::Header(e.to_string()))?;
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
        .collect();
    Ok((header, values))
}

/// Writes through a sibling temp file and renames, so readers never see partial output.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write<H: Serialize>(path: &Path, magic: [u8; 4], header: &H, payload: &[f32]) -> Result<()> {
    write_atomic(path, &encode(magic, header, payload)?)
}

pub fn read<H: DeserializeOwned>(path: &Path, magic: [u8; 4]) -> Result<(H, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}
