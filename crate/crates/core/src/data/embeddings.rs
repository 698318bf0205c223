use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const EMB1_MAGIC: &str = "DMEMB1";

/// Serializes a matrix as EMB1: magic line, `<rows> <cols>` line, then little-endian `f32`
/// values in row-major order.
pub fn write_emb1(path: &Path, matrix: &Matrix) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "{EMB1_MAGIC}\n{} {}\n", matrix.rows(), matrix.cols())?;
    for &v in matrix.as_slice() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn take_line<'a>(bytes: &'a [u8], what: &'static str) -> Result<(&'a [u8], &'a [u8])> {
    let end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or(Error::Truncated(what))?;
    Ok((&bytes[..end], &bytes[end + 1..]))
}

pub fn read_emb1(bytes: &[u8]) -> Result<Matrix> {
    let (magic, rest) = take_line(bytes, "EMB1 header").map_err(|_| Error::BadMagic {
        what: "embedding file",
        expected: EMB1_MAGIC,
    })?;
    if magic != EMB1_MAGIC.as_bytes() {
        return Err(Error::BadMagic {
            what: "embedding file",
            expected: EMB1_MAGIC,
        });
    }
    let (header, body) = take_line(rest, "EMB1 header")?;
    let header = std::str::from_utf8(header).map_err(|_| malformed("header is not ASCII"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| malformed(format!("bad header `{header}`")))?;
    let [rows, cols] = dims[..] else {
        return Err(malformed(format!("header `{header}` must be `<rows> <cols>`")));
    };
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| malformed("header dimensions overflow"))?;
    if body.len() < expected {
        return Err(Error::Truncated("EMB1 body"));
    }
    if body.len() > expected {
        return Err(malformed(format!("{} trailing bytes", body.len() - expected)));
    }
    let values: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let m = Matrix::from_vec(rows, cols, values)?;
    check_finite(&m)?;
    Ok(m)
}

fn malformed(message: impl Into<String>) -> Error {
    Error::Malformed {
        what: "embedding file",
        message: message.into(),
    }
}

fn check_finite(m: &Matrix) -> Result<()> {
    match (0..m.rows()).find(|&r| m.row(r).iter().any(|v| !v.is_finite())) {
        Some(row) => Err(Error::NonFinite { row }),
        None => Ok(()),
    }
}

/// One row per line, comma-separated decimals.
pub fn read_csv_embeddings(text: &str) -> Result<Matrix> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| malformed(format!("line {}: {e}", idx + 1)))?;
        rows.push(row);
    }
    let m = Matrix::from_rows(&rows).map_err(|e| malformed(e.to_string()))?;
    check_finite(&m)?;
    Ok(m)
}

/// Loads an EMB1 file, or CSV when the extension is `.csv`, optionally checking the row count.
pub fn load_embeddings(path: &Path, expected_rows: Option<usize>) -> Result<Matrix> {
    let bytes = std::fs::read(path)?;
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let m = if is_csv {
        read_csv_embeddings(std::str::from_utf8(&bytes).map_err(|_| malformed("CSV is not UTF-8"))?)?
    } else {
        read_emb1(&bytes)?
    };
    if let Some(rows) = expected_rows {
        if m.rows() != rows {
            return Err(Error::DimensionMismatch(format!(
                "{} has {} rows, expected {rows}",
                path.display(),
                m.rows()
            )));
        }
    }
    Ok(m)
}
