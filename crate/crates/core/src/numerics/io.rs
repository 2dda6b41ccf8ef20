use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Matrix, NumericsError};

/// Magic bytes opening every binary matrix file.
pub const MATRIX_MAGIC: &[u8; 4] = b"FLGM";

/// Writes `FLGM`, u32 rows, u32 cols (little endian), then the row-major
/// payload as little-endian f64.
pub fn write_matrix<W: Write>(mut w: W, m: &Matrix) -> Result<(), NumericsError> {
    let rows = u32::try_from(m.rows()).map_err(|_| NumericsError::TooLarge)?;
    let cols = u32::try_from(m.cols()).map_err(|_| NumericsError::TooLarge)?;
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix<R: Read>(mut r: R) -> Result<Matrix, NumericsError> {
    let mut header = [0u8; 12];
    r.read_exact(&mut header)?;
    if &header[..4] != MATRIX_MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let rows = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = vec![0u8; rows * cols * 8];
    r.read_exact(&mut payload)?;
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(NumericsError::Format("trailing bytes".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn save_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_matrix(&mut w, m)?;
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: impl AsRef<Path>) -> Result<Matrix, NumericsError> {
    read_matrix(BufReader::new(File::open(path)?))
}

/// Plain CSV, one matrix row per line, no header.
pub fn matrix_to_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
