//! EMX v1: `b"EMX1"`, rows and cols as u64 LE, then rows*cols f64 LE in row-major order.

use super::Matrix;
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"EMX1";

pub fn write_emx<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(m.rows() as u64).to_le_bytes())?;
    w.write_all(&(m.cols() as u64).to_le_bytes())?;
    for v in m.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_bytes(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(20 + 8 * m.data().len());
    write_emx(m, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn read_emx<R: Read>(mut r: R) -> Result<Matrix> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::Format("file too short for EMX header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic bytes {magic:?}, expected EMX1")));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(|_| Error::Format("truncated EMX header".into()))?;
    let rows = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(|_| Error::Format("truncated EMX header".into()))?;
    let cols = u64::from_le_bytes(word) as usize;
    let count = rows.checked_mul(cols).filter(|c| *c <= (1 << 31)).ok_or_else(|| Error::Format(format!("implausible EMX shape {rows}x{cols}")))?;
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut word).map_err(|_| Error::Format(format!("EMX body shorter than {rows}x{cols}")))?;
        data.push(f64::from_le_bytes(word));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after EMX body".into()));
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn save(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    std::fs::write(path, to_bytes(m))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Matrix> {
    let bytes = std::fs::read(path.as_ref())?;
    read_emx(bytes.as_slice())
}
