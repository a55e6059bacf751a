//! Binary matrix container and CSV matrix files.
//!
//! Container layout: 4-byte magic, `u32` rows, `u32` columns (little-endian),
//! then `rows * cols` little-endian `f64` values in row-major order.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;

use crate::dictionary::Dictionary;
use crate::error::{Error, Result};

pub const DICTIONARY_MAGIC: [u8; 4] = *b"GBPD";
pub const CLASSIFIER_MAGIC: [u8; 4] = *b"GBPC";
pub const SAMPLES_MAGIC: [u8; 4] = *b"GBPX";

pub fn write_matrix<W: Write>(mut w: W, magic: [u8; 4], m: &DMatrix<f64>) -> std::io::Result<()> {
    w.write_all(&magic)?;
    w.write_u32::<LittleEndian>(m.nrows() as u32)?;
    w.write_u32::<LittleEndian>(m.ncols() as u32)?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            w.write_f64::<LittleEndian>(m[(r, c)])?;
        }
    }
    w.flush()
}

pub fn read_matrix<R: Read>(mut r: R, magic: [u8; 4]) -> Result<DMatrix<f64>> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(|_| truncated(0))?;
    if found != magic {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&found)
            ),
        });
    }
    let rows = r.read_u32::<LittleEndian>().map_err(|_| truncated(4))? as usize;
    let cols = r.read_u32::<LittleEndian>().map_err(|_| truncated(8))? as usize;
    let mut data = vec![0.0; rows * cols];
    r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| truncated(12))?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::Format { offset: 0, message: e.to_string() })? != 0 {
        return Err(Error::Format {
            offset: 12 + 8 * (rows * cols) as u64,
            message: "trailing bytes after matrix payload".into(),
        });
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn truncated(offset: u64) -> Error {
    Error::Format { offset, message: "file ends before the declared payload".into() }
}

pub fn save_matrix(path: &Path, magic: [u8; 4], m: &DMatrix<f64>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix(BufWriter::new(f), magic, m).map_err(|e| Error::io(path, e))
}

pub fn load_matrix(path: &Path, magic: [u8; 4]) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix(BufReader::new(f), magic)
}

pub fn save_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    save_matrix(path, DICTIONARY_MAGIC, dict.matrix())
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    Dictionary::new(load_matrix(path, DICTIONARY_MAGIC)?)
}

/// One row per line, comma separated, shortest round-trip float formatting.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &DMatrix<f64>) -> std::io::Result<()> {
    for r in 0..m.nrows() {
        let line: Vec<String> = (0..m.ncols()).map(|c| format!("{:?}", m[(r, c)])).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    for line in BufReader::new(r).lines() {
        let line = line.map_err(|e| Error::Format { offset, message: e.to_string() })?;
        let len = line.len() as u64 + 1;
        if line.trim().is_empty() {
            offset += len;
            continue;
        }
        let row = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format { offset, message: format!("line {}: {e}", rows.len() + 1) })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Format {
                    offset,
                    message: format!("row {} has {} columns, expected {}", rows.len() + 1, row.len(), first.len()),
                });
            }
        }
        rows.push(row);
        offset += len;
    }
    let ncols = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

pub fn save_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix_csv(BufWriter::new(f), m).map_err(|e| Error::io(path, e))
}

pub fn load_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_csv(f)
}
