//! Dataset readers and writers: delimited text and the `TCAD` binary dump.
//!
//! The binary layout is little-endian: the magic bytes `TCAD`, `u32` sample
//! count `N`, `u32` dimension `m`, then `N * m` `f64` values in column-major
//! order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::data::Dataset;
use crate::error::{Result, TcaError};

pub const BINARY_MAGIC: &[u8; 4] = b"TCAD";

/// Parses delimited text, one observation per line. A first line that does
/// not parse as numbers is treated as a header; blank lines and lines
/// starting with `#` are skipped.
pub fn read_csv<R: Read>(reader: R, delimiter: char) -> Result<Dataset> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    let mut seen_content = false;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| TcaError::io(format!("reading line {line_no}"), e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = trimmed
            .split(delimiter)
            .map(|f| f.trim().parse::<f64>())
            .collect();
        let first = !seen_content;
        seen_content = true;
        let values = match parsed {
            Ok(v) => v,
            Err(_) if first => continue,
            Err(e) => {
                return Err(TcaError::Parse {
                    line: line_no,
                    message: format!("invalid number ({e})"),
                })
            }
        };
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(TcaError::Parse {
                line: line_no,
                message: format!("non-finite value in field {}", pos + 1),
            });
        }
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(TcaError::Parse {
                    line: line_no,
                    message: format!("expected {w} fields, found {}", values.len()),
                })
            }
            _ => {}
        }
        rows.push(values);
    }
    Dataset::from_rows(&rows)
}

pub fn read_csv_file(path: &Path, delimiter: char) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| TcaError::io(path.display().to_string(), e))?;
    read_csv(file, delimiter)
}

pub fn write_csv<W: Write>(mut writer: W, data: &Dataset, delimiter: char) -> Result<()> {
    let mut line = String::new();
    for row in data.samples().row_iter() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(delimiter);
            }
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        writer
            .write_all(line.as_bytes())
            .map_err(|e| TcaError::io("writing csv", e))?;
    }
    Ok(())
}

pub fn write_csv_file(path: &Path, data: &Dataset, delimiter: char) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TcaError::io(path.display().to_string(), e))?;
    write_csv(std::io::BufWriter::new(file), data, delimiter)
}

pub fn write_binary<W: Write>(mut writer: W, data: &Dataset) -> Result<()> {
    let (n, m) = (data.n(), data.m());
    let to_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| TcaError::InvalidData(format!("{v} exceeds u32 range")))
    };
    let mut buf = Vec::with_capacity(12 + 8 * n * m);
    buf.extend_from_slice(BINARY_MAGIC);
    buf.extend_from_slice(&to_u32(n)?.to_le_bytes());
    buf.extend_from_slice(&to_u32(m)?.to_le_bytes());
    for v in data.samples().as_slice() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    writer
        .write_all(&buf)
        .map_err(|e| TcaError::io("writing binary dataset", e))
}

pub fn read_binary<R: Read>(mut reader: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    reader
        .read_to_end(&mut bytes)
        .map_err(|e| TcaError::io("reading binary dataset", e))?;
    let bad = |msg: &str| TcaError::InvalidData(format!("binary dataset: {msg}"));
    if bytes.len() < 12 || &bytes[..4] != BINARY_MAGIC {
        return Err(bad("missing TCAD header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let m = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let payload = &bytes[12..];
    if payload.len() != 8 * n * m {
        return Err(bad(&format!(
            "payload has {} bytes, expected {}",
            payload.len(),
            8 * n * m
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Dataset::new(DMatrix::from_vec(n, m, values))
}

pub fn read_binary_file(path: &Path) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| TcaError::io(path.display().to_string(), e))?;
    read_binary(BufReader::new(file))
}

pub fn write_binary_file(path: &Path, data: &Dataset) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| TcaError::io(path.display().to_string(), e))?;
    write_binary(std::io::BufWriter::new(file), data)
}

/// Reads either format, choosing by the `TCAD` magic bytes.
pub fn read_dataset_file(path: &Path, delimiter: char) -> Result<Dataset> {
    let mut head = [0u8; 4];
    let mut file = fs::File::open(path).map_err(|e| TcaError::io(path.display().to_string(), e))?;
    let got = file
        .read(&mut head)
        .map_err(|e| TcaError::io(path.display().to_string(), e))?;
    if got == 4 && &head == BINARY_MAGIC {
        read_binary_file(path)
    } else {
        read_csv_file(path, delimiter)
    }
}
