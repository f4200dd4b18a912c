//! Little-endian binary IO shared by the token, voxel, primitive, and
//! checkpoint formats.

use std::io::{Read, Write};

/// What can go wrong while reading one of the fixed binary formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("file truncated while reading {context}")]
    Truncated { context: &'static str },
    #[error("unknown dtype tag {0} (1 = f32, 2 = f64)")]
    UnknownDtype(u32),
    #[error("unreasonable dimensions: {0}")]
    DimensionOverflow(String),
    #[error("inconsistent contents: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reading into this many bytes or more is treated as a corrupt header
/// rather than attempted.
pub const MAX_PAYLOAD_BYTES: u64 = 1 << 32;

pub fn check_magic(r: &mut impl Read, expected: &[u8; 8]) -> Result<(), FormatError> {
    let mut found = [0u8; 8];
    read_exact(r, &mut found, "magic")?;
    if &found != expected {
        return Err(FormatError::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&found).into_owned(),
        });
    }
    Ok(())
}

pub fn read_exact(r: &mut impl Read, buf: &mut [u8], context: &'static str) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            FormatError::Truncated { context }
        } else {
            FormatError::Io(e)
        }
    })
}

pub fn read_u32(r: &mut impl Read, context: &'static str) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read, context: &'static str) -> Result<u64, FormatError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f32(r: &mut impl Read, context: &'static str) -> Result<f32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, context)?;
    Ok(f32::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read, context: &'static str) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, context)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_f64_vec(r: &mut impl Read, n: usize, context: &'static str) -> Result<Vec<f64>, FormatError> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(r, &mut bytes, context)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn read_f32_vec(r: &mut impl Read, n: usize, context: &'static str) -> Result<Vec<f32>, FormatError> {
    let mut bytes = vec![0u8; n * 4];
    read_exact(r, &mut bytes, context)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f32(w: &mut impl Write, v: f32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub fn write_f64_slice(w: &mut impl Write, vs: &[f64]) -> std::io::Result<()> {
    for v in vs {
        write_f64(w, *v)?;
    }
    Ok(())
}

pub fn write_f32_slice(w: &mut impl Write, vs: &[f32]) -> std::io::Result<()> {
    for v in vs {
        write_f32(w, *v)?;
    }
    Ok(())
}

/// Checked product for header dimension fields.
pub fn checked_payload(dims: &[u64], elem_bytes: u64) -> Result<usize, FormatError> {
    let mut total: u64 = elem_bytes;
    for &d in dims {
        total = total
            .checked_mul(d)
            .filter(|&t| t < MAX_PAYLOAD_BYTES)
            .ok_or_else(|| {
                FormatError::DimensionOverflow(format!("dims {:?} exceed payload cap", dims))
            })?;
    }
    Ok((total / elem_bytes) as usize)
}
