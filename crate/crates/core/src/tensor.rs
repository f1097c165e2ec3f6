//! VGPT tensor file format.
//!
//! Layout, all little-endian: magic `VGPT`, version `u32` (= 1), ndim `u32`,
//! dims `u32 * ndim`, then row-major `f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"VGPT";
const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(mut w: W, shape: &[usize], data: &[f32]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(Error::Tensor(format!(
            "shape {:?} implies {} elements, got {}",
            shape,
            expected,
            data.len()
        )));
    }
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<(Vec<usize>, Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Tensor("bad magic, not a VGPT file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Tensor(format!("unsupported version {version}")));
    }
    let ndim = read_u32(&mut r)? as usize;
    if ndim > 8 {
        return Err(Error::Tensor(format!("implausible ndim {ndim}")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(&mut r)? as usize);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        data.push(f32::from_le_bytes(buf));
    }
    Ok((shape, data))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_tensor_file(path: &Path, shape: &[usize], data: &[f32]) -> Result<()> {
    let f = File::create(path)?;
    write_tensor(BufWriter::new(f), shape, data)
}

pub fn read_tensor_file(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let f = File::open(path)?;
    read_tensor(BufReader::new(f))
}

/// Write an f64 matrix, rounding each entry to f32.
pub fn write_matrix_file(path: &Path, m: &Array2<f64>) -> Result<()> {
    let data: Vec<f32> = m.iter().map(|&v| v as f32).collect();
    write_tensor_file(path, &[m.nrows(), m.ncols()], &data)
}

pub fn read_matrix_file(path: &Path) -> Result<Array2<f64>> {
    let (shape, data) = read_tensor_file(path)?;
    if shape.len() != 2 {
        return Err(Error::Tensor(format!(
            "{}: expected 2-d tensor, got shape {:?}",
            path.display(),
            shape
        )));
    }
    let data: Vec<f64> = data.into_iter().map(f64::from).collect();
    Array2::from_shape_vec((shape[0], shape[1]), data)
        .map_err(|e| Error::Tensor(e.to_string()))
}

pub fn write_vector_file(path: &Path, v: &Array1<f64>) -> Result<()> {
    let data: Vec<f32> = v.iter().map(|&x| x as f32).collect();
    write_tensor_file(path, &[v.len()], &data)
}

pub fn read_vector_file(path: &Path) -> Result<Array1<f64>> {
    let (shape, data) = read_tensor_file(path)?;
    if shape.len() != 1 {
        return Err(Error::Tensor(format!(
            "{}: expected 1-d tensor, got shape {:?}",
            path.display(),
            shape
        )));
    }
    Ok(Array1::from_vec(data.into_iter().map(f64::from).collect()))
}

/// Round an f64 through f32 precision. Pipeline artifacts are stored as f32,
/// so values that feed later stages must pass through this to make on-disk
/// round trips exact.
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

pub fn round_matrix_f32(m: &mut Array2<f64>) {
    m.mapv_inplace(round_f32);
}

pub fn round_vector_f32(v: &mut Array1<f64>) {
    v.mapv_inplace(round_f32);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_magic() {
        let bytes = b"NOPE\x01\x00\x00\x00";
        assert!(read_tensor(&bytes[..]).is_err());
    }

    #[test]
    fn rejects_shape_data_mismatch() {
        let mut buf = Vec::new();
        assert!(write_tensor(&mut buf, &[2, 2], &[1.0f32; 3]).is_err());
    }

    proptest! {
        #[test]
        fn round_trips(rows in 0usize..6, cols in 0usize..6, seedling in 0u32..1000) {
            let n = rows * cols;
            let data: Vec<f32> = (0..n).map(|i| (i as f32 + seedling as f32) * 0.37 - 3.0).collect();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &[rows, cols], &data).unwrap();
            let (shape, got) = read_tensor(&buf[..]).unwrap();
            prop_assert_eq!(shape, vec![rows, cols]);
            prop_assert_eq!(got, data);
        }
    }
}
