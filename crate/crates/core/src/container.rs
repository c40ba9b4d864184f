//! Versioned little-endian binary container shared by model checkpoints and
//! PCA projections.
//!
//! ```text
//! magic    4 bytes   b"DPNN" (model) or b"DPCA" (projection)
//! version  u32 LE
//! count    u32 LE    number of dimension entries that follow
//! dims     count × u32 LE
//! payload  f64 LE, layout defined by the owner of the magic
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("container truncated while reading {0}")]
    Truncated(&'static str),
    #[error("malformed container: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ContainerError>;

pub fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], dims: &[u32]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ContainerError::Truncated(what),
        _ => ContainerError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads and checks the header, returning the dimension list.
pub fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<Vec<u32>> {
    let mut found = [0u8; 4];
    read_exact_or(r, &mut found, "magic")?;
    if &found != magic {
        return Err(ContainerError::BadMagic { expected: *magic, found });
    }
    let version = read_u32(r, "version")?;
    if version != FORMAT_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = read_u32(r, "dimension count")?;
    if count > 1 << 16 {
        return Err(ContainerError::Malformed(format!("implausible dimension count {count}")));
    }
    (0..count).map(|_| read_u32(r, "dimensions")).collect()
}

pub fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    read_exact_or(r, &mut buf, "payload")?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_round_trip_and_errors() {
        let mut buf = Vec::new();
        write_header(&mut buf, b"DPNN", &[3, 4]).unwrap();
        write_f64s(&mut buf, &[1.5, -2.0]).unwrap();
        let mut r = &buf[..];
        assert_eq!(read_header(&mut r, b"DPNN").unwrap(), vec![3, 4]);
        assert_eq!(read_f64s(&mut r, 2).unwrap(), vec![1.5, -2.0]);

        assert!(matches!(read_header(&mut &buf[..], b"DPCA"), Err(ContainerError::BadMagic { .. })));
        assert!(matches!(read_header(&mut &buf[..6], b"DPNN"), Err(ContainerError::Truncated(_))));
        let mut r = &buf[..buf.len() - 1];
        read_header(&mut r, b"DPNN").unwrap();
        assert!(matches!(read_f64s(&mut r, 2), Err(ContainerError::Truncated("payload"))));

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_header(&mut &bad[..], b"DPNN"), Err(ContainerError::UnsupportedVersion(9))));
    }
}
