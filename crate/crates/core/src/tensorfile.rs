//! Shape-prefixed little-endian `f64` tensor archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"TTACTNSR"          8-byte magic
//! u32                  format version (1)
//! [u8; 8]              archive kind, e.g. b"CHECKPNT"
//! u32                  tensor count
//! per tensor:
//!   u32 + utf-8        name
//!   u32                rank
//!   u64 × rank         dimensions
//!   f64 × Π dims       values, row-major
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TTACTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn from_matrix(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            data.extend(m.row(r).iter());
        }
        Self {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data,
        }
    }

    pub fn from_vector(name: impl Into<String>, v: &DVector<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v.as_slice().to_vec(),
        }
    }

    pub fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self {
            name: name.into(),
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        match self.shape.as_slice() {
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            other => Err(Error::Format(format!(
                "tensor {} has shape {other:?}, expected a matrix",
                self.name
            ))),
        }
    }

    pub fn to_vector(&self) -> Result<DVector<f64>> {
        match self.shape.as_slice() {
            [_] => Ok(DVector::from_column_slice(&self.data)),
            other => Err(Error::Format(format!(
                "tensor {} has shape {other:?}, expected a vector",
                self.name
            ))),
        }
    }

    pub fn to_scalar(&self) -> Result<f64> {
        if self.shape.is_empty() {
            Ok(self.data[0])
        } else {
            Err(Error::Format(format!("tensor {} is not a scalar", self.name)))
        }
    }
}

pub fn write_archive<W: Write>(w: &mut W, kind: &[u8; 8], tensors: &[Tensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(kind)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Format(format!(
                "tensor {} has {} values for shape {:?}",
                t.name,
                t.data.len(),
                t.shape
            )));
        }
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_archive<R: Read>(r: &mut R, kind: &[u8; 8]) -> Result<Vec<Tensor>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a tensor archive (bad magic)".into()));
    }
    let version = read_u32(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported archive version {version}")));
    }
    let mut found = [0u8; 8];
    r.read_exact(&mut found)?;
    if &found != kind {
        return Err(Error::Format(format!(
            "archive kind {:?}, expected {:?}",
            String::from_utf8_lossy(&found),
            String::from_utf8_lossy(kind)
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        out.push(Tensor { name, shape, data });
    }
    Ok(out)
}

pub fn save(path: &Path, kind: &[u8; 8], tensors: &[Tensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_archive(&mut w, kind, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path, kind: &[u8; 8]) -> Result<Vec<Tensor>> {
    let mut r = BufReader::new(File::open(path)?);
    read_archive(&mut r, kind)
}

/// Looks a tensor up by name.
pub fn find<'a>(tensors: &'a [Tensor], name: &str) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
}
