//! Matrix file formats: the `CGIRMAT1` binary layout and headerless CSV.
//!
//! Binary layout: 8 magic bytes `CGIRMAT1`, then `u32` little-endian row and
//! column counts, then the row-major `f32` little-endian payload.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"CGIRMAT1";

pub fn write_binary(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(matrix.nrows() as u32).to_le_bytes())?;
    w.write_all(&(matrix.ncols() as u32).to_le_bytes())?;
    for &v in matrix.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Array2<f64>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: "bad magic bytes, expected CGIRMAT1".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let rows = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let cols = u32::from_le_bytes(u32buf) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut f32buf = [0u8; 4];
    for _ in 0..rows * cols {
        r.read_exact(&mut f32buf)?;
        data.push(f32::from_le_bytes(f32buf) as f64);
    }
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Consistency(format!("binary matrix shape: {e}")))
}

/// Headerless CSV of decimal floats, one matrix row per line.
pub fn read_csv(path: &Path) -> Result<Array2<f64>> {
    let file = BufReader::new(File::open(path)?);
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    let mut cols: Option<usize> = None;
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match cols {
            Some(c) if c != fields.len() => {
                return Err(Error::Consistency(format!(
                    "{}:{}: expected {} columns, found {}",
                    path.display(),
                    lineno + 1,
                    c,
                    fields.len()
                )));
            }
            None => cols = Some(fields.len()),
            _ => {}
        }
        for f in fields {
            let v: f64 = f.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("invalid number {f:?}"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|e| Error::Consistency(format!("csv matrix shape: {e}")))
}

pub fn write_csv(path: &Path, matrix: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in matrix.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature matrix, dispatching on the magic bytes: `CGIRMAT1` files
/// take the binary path, everything else parses as CSV.
pub fn read_matrix_auto(path: &Path) -> Result<Array2<f64>> {
    let mut probe = [0u8; 8];
    let n = File::open(path)?.read(&mut probe)?;
    if n == 8 && &probe == MAGIC {
        read_binary(path)
    } else {
        read_csv(path)
    }
}
