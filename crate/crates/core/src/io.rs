//! Small binary and CSV helpers shared by the persistence formats.
//!
//! Field files hold a stack of same-shaped f64 volumes:
//!
//! ```text
//! magic  "TOPO3DFL"        8 bytes
//! version u32              4
//! nx, ny, nz u32           12
//! count u64                8
//! count * nx*ny*nz f64     little-endian, x-fastest
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::Grid3;

pub const FIELD_MAGIC: &[u8; 8] = b"TOPO3DFL";
pub const FIELD_VERSION: u32 = 1;

pub(crate) fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    })
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn check_magic(r: &mut impl Read, expected: &[u8; 8]) -> Result<()> {
    let mut magic = [0u8; 8];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != expected {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(expected).into_owned(),
            found: String::from_utf8_lossy(&magic).into_owned(),
        });
    }
    Ok(())
}

/// Writes volumes of shape `grid` as f64.
pub fn write_fields(path: &Path, grid: Grid3, fields: &[&[f64]]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FIELD_MAGIC)?;
    w.write_all(&FIELD_VERSION.to_le_bytes())?;
    for d in grid.dims() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(fields.len() as u64).to_le_bytes())?;
    for f in fields {
        if f.len() != grid.len() {
            return Err(Error::Shape {
                expected: grid.len().to_string(),
                got: f.len().to_string(),
            });
        }
        for v in *f {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_fields(path: &Path) -> Result<(Grid3, Vec<Vec<f64>>)> {
    let mut r = BufReader::new(File::open(path)?);
    check_magic(&mut r, FIELD_MAGIC)?;
    let version = read_u32(&mut r, "version")?;
    if version != FIELD_VERSION {
        return Err(Error::Version {
            expected: FIELD_VERSION,
            found: version,
        });
    }
    let nx = read_u32(&mut r, "dims")? as usize;
    let ny = read_u32(&mut r, "dims")? as usize;
    let nz = read_u32(&mut r, "dims")? as usize;
    let grid = Grid3::new(nx, ny, nz);
    let count = read_u64(&mut r, "count")? as usize;
    let mut buf = vec![0u8; grid.len() * 8];
    let mut fields = Vec::with_capacity(count);
    for i in 0..count {
        read_exact_or(&mut r, &mut buf, &format!("field {i} of {count}"))?;
        fields.push(
            buf.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        );
    }
    Ok((grid, fields))
}

/// Legacy VTK structured-points export of one scalar volume.
pub fn write_vtk(path: &Path, grid: Grid3, spacing: f64, name: &str, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0")?;
    writeln!(w, "{name}")?;
    writeln!(w, "ASCII")?;
    writeln!(w, "DATASET STRUCTURED_POINTS")?;
    writeln!(w, "DIMENSIONS {} {} {}", grid.nx + 1, grid.ny + 1, grid.nz + 1)?;
    writeln!(w, "ORIGIN 0 0 0")?;
    writeln!(w, "SPACING {spacing} {spacing} {spacing}")?;
    writeln!(w, "CELL_DATA {}", grid.len())?;
    writeln!(w, "SCALARS {name} double 1")?;
    writeln!(w, "LOOKUP_TABLE default")?;
    for v in values {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a numeric CSV table. Values use shortest round-trip formatting.
pub fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV table written by [`write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Truncated(format!("{} has no header", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::Invalid(format!("bad number {v:?} in {}: {e}", path.display())))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok((header, rows))
}
