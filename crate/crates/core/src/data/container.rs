//! Binary matrix container: 8 magic bytes, `rows` and `cols` as little-endian
//! `u64`, then `rows * cols` little-endian `f64` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Result};
use crate::graph::Matrix;

pub const MATRIX_MAGIC: [u8; 8] = *b"STRMMAT1";

pub fn write_matrix_to<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_all(&MATRIX_MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_matrix_from<R: Read>(r: &mut R) -> Result<Matrix> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| DataError::Container("truncated header".into()))?;
    if magic != MATRIX_MAGIC {
        return Err(DataError::Container("bad magic".into()));
    }
    let mut word = [0u8; 8];
    let mut dim = |r: &mut R| -> Result<usize> {
        r.read_exact(&mut word)
            .map_err(|_| DataError::Container("truncated header".into()))?;
        usize::try_from(u64::from_le_bytes(word)).map_err(|_| DataError::Container("dimension overflow".into()))
    };
    let rows = dim(r)?;
    let cols = dim(r)?;
    let len = rows
        .checked_mul(cols)
        .ok_or_else(|| DataError::Container("dimension overflow".into()))?;
    let mut data = Vec::with_capacity(len.min(1 << 24));
    for _ in 0..len {
        r.read_exact(&mut word)
            .map_err(|_| DataError::Container(format!("expected {len} values")))?;
        data.push(f64::from_le_bytes(word));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::Container("trailing bytes".into()));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_matrix_to(&mut f, m)?;
    f.flush()?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_matrix_from(&mut f)
}
