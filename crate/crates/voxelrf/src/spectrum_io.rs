//! Binary spectrum files.
//!
//! Layout, little-endian: magic `VXRF`, version `u32`, azimuths `M: u32`,
//! elevations `N: u32`, then `M * N` `f32` values with cell `(m, n)` at index
//! `m * N + n`.

use std::fs;
use std::path::Path;

use voxelrf_core::SpatialSpectrum;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"VXRF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;

/// File size of an `M x N` spectrum.
pub fn file_len(azimuths: usize, elevations: usize) -> usize {
    HEADER_LEN + 4 * azimuths * elevations
}

/// Serializes `spectrum`. Values are stored as `f32`; they must be finite
/// and non-negative after the conversion.
pub fn encode_spectrum(spectrum: &SpatialSpectrum) -> std::result::Result<Vec<u8>, String> {
    let (m, n) = spectrum.resolution();
    let dim = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| format!("{what} count {v} does not fit in u32"))
    };
    let mut out = Vec::with_capacity(file_len(m, n));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(m, "azimuth")?.to_le_bytes());
    out.extend_from_slice(&dim(n, "elevation")?.to_le_bytes());
    for (i, &v) in spectrum.values().iter().enumerate() {
        let f = v as f32;
        if !f.is_finite() || f < 0.0 {
            return Err(format!("cell {i} holds {v}, which is not a finite non-negative f32"));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

/// Parses a spectrum file image. Errors carry the byte offset of the
/// offending field.
pub fn decode_spectrum(bytes: &[u8]) -> std::result::Result<SpatialSpectrum, (u64, String)> {
    let word = |at: usize| -> std::result::Result<u32, (u64, String)> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or((bytes.len() as u64, format!("file ends inside the header ({} bytes)", bytes.len())))
    };
    match bytes.get(0..4) {
        Some(m) if m == MAGIC => {}
        Some(m) => return Err((0, format!("bad magic {:?}, expected \"VXRF\"", String::from_utf8_lossy(m)))),
        None => return Err((bytes.len() as u64, "file ends inside the magic".into())),
    }
    let version = word(4)?;
    if version != VERSION {
        return Err((4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let m = word(8)? as usize;
    let n = word(12)? as usize;
    if m == 0 || n == 0 {
        return Err((8, format!("empty resolution {m}x{n}")));
    }
    let payload = m
        .checked_mul(n)
        .and_then(|c| c.checked_mul(4))
        .ok_or((8, format!("resolution {m}x{n} overflows")))?;
    let expected = HEADER_LEN + payload;
    if bytes.len() < expected {
        return Err((
            bytes.len() as u64,
            format!("truncated: {m}x{n} needs {expected} bytes, file has {}", bytes.len()),
        ));
    }
    if bytes.len() > expected {
        return Err((expected as u64, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut values = Vec::with_capacity(m * n);
    for (i, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() || v < 0.0 {
            return Err(((HEADER_LEN + 4 * i) as u64, format!("cell {i} holds {v}")));
        }
        values.push(v as f64);
    }
    Ok(SpatialSpectrum::from_values(m, n, values).expect("length checked above"))
}

pub fn write_spectrum(path: impl AsRef<Path>, spectrum: &SpatialSpectrum) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_spectrum(spectrum).map_err(|msg| Error::format(path, 0, msg))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_spectrum(path: impl AsRef<Path>) -> Result<SpatialSpectrum> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_spectrum(&bytes).map_err(|(offset, msg)| Error::format(path, offset, msg))
}
