//! Little-endian binary helpers shared by the checkpoint formats.

use std::io::{Read, Write};

use ndarray::{Array1, Array2};

use crate::error::{Result, SparcError};

pub fn write_magic(w: &mut impl Write, magic: &[u8; 8]) -> Result<()> {
    w.write_all(magic)?;
    Ok(())
}

pub fn read_magic(r: &mut impl Read, expected: &[u8; 8]) -> Result<()> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    if &buf != expected {
        return Err(SparcError::MalformedInput(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&buf),
            String::from_utf8_lossy(expected)
        )));
    }
    Ok(())
}

pub fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn write_f64s<'a>(w: &mut impl Write, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_f64s(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Row-major dense block.
pub fn write_matrix(w: &mut impl Write, m: &Array2<f64>) -> Result<()> {
    write_f64s(w, m.iter())
}

pub fn read_matrix(r: &mut impl Read, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let data = read_f64s(r, rows * cols)?;
    Ok(Array2::from_shape_vec((rows, cols), data).expect("sized read"))
}

pub fn read_vector(r: &mut impl Read, len: usize) -> Result<Array1<f64>> {
    Ok(Array1::from(read_f64s(r, len)?))
}

pub fn dim_u32(x: usize) -> Result<u32> {
    u32::try_from(x).map_err(|_| SparcError::Capacity(format!("dimension {x} exceeds u32")))
}
