//! FFT1 tensor files.
//!
//! ```text
//! offset  size        field
//! 0       8           magic "FFNTENSR"
//! 8       1           tag: 0 = dense f32, 1 = packed ternary
//! 9       4           rank r (u32 little-endian)
//! 13      4 * r       dims (u32 little-endian each)
//! 13+4r   ...         payload
//! ```
//!
//! Dense payload is `prod(dims)` little-endian `f32`s in row-major order.
//! Ternary payload treats the tensor as `prod(dims[..r-1]) x dims[r-1]` and
//! stores the packed rows of [`TernaryMatrix`] verbatim.

use std::fs;
use std::path::Path;

use crate::error::{FfnError, Result};
use crate::tensor::{DenseMatrix, DiagonalScale, TernaryMatrix};

pub const MAGIC: &[u8; 8] = b"FFNTENSR";
const TAG_DENSE: u8 = 0;
const TAG_TERNARY: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Tensor {
    Dense { dims: Vec<usize>, data: Vec<f32> },
    Ternary { dims: Vec<usize>, matrix: TernaryMatrix },
}

impl Tensor {
    pub fn dims(&self) -> &[usize] {
        match self {
            Tensor::Dense { dims, .. } | Tensor::Ternary { dims, .. } => dims,
        }
    }

    pub fn into_dense_matrix(self) -> Result<DenseMatrix> {
        match self {
            Tensor::Dense { dims, data } => {
                let (r, c) = as_matrix_dims(&dims);
                DenseMatrix::new(r, c, data)
            }
            Tensor::Ternary { .. } => Err(FfnError::data("expected a dense tensor, found ternary")),
        }
    }

    pub fn into_ternary(self) -> Result<TernaryMatrix> {
        match self {
            Tensor::Ternary { matrix, .. } => Ok(matrix),
            Tensor::Dense { .. } => Err(FfnError::data("expected a ternary tensor, found dense")),
        }
    }

    pub fn into_vector(self) -> Result<Vec<f32>> {
        match self {
            Tensor::Dense { data, .. } => Ok(data),
            Tensor::Ternary { .. } => Err(FfnError::data("expected a dense vector, found ternary")),
        }
    }
}

fn as_matrix_dims(dims: &[usize]) -> (usize, usize) {
    match dims.split_last() {
        None => (1, 1),
        Some((&cols, lead)) => (lead.iter().product(), cols),
    }
}

fn header(out: &mut Vec<u8>, tag: u8, dims: &[usize]) -> Result<()> {
    out.extend_from_slice(MAGIC);
    out.push(tag);
    out.extend_from_slice(&to_u32(dims.len())?.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    Ok(())
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| FfnError::size(format!("dimension {v} does not fit in u32")))
}

pub fn encode_dense(dims: &[usize], data: &[f32]) -> Result<Vec<u8>> {
    let len: usize = dims.iter().product();
    if len != data.len() {
        return Err(FfnError::size(format!(
            "dims {dims:?} need {len} values, got {}",
            data.len()
        )));
    }
    let mut out = Vec::with_capacity(13 + 4 * dims.len() + 4 * len);
    header(&mut out, TAG_DENSE, dims)?;
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn encode_ternary(matrix: &TernaryMatrix) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(21 + matrix.packed().len());
    header(&mut out, TAG_TERNARY, &[matrix.rows(), matrix.cols()])?;
    out.extend_from_slice(matrix.packed());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| FfnError::data("truncated tensor file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(FfnError::data("bad magic, not an FFT1 tensor"));
    }
    let tag = r.take(1)?[0];
    let rank = r.u32()?;
    if rank > 8 {
        return Err(FfnError::data(format!("unsupported rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let tensor = match tag {
        TAG_DENSE => {
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| FfnError::data("dense payload size overflows"))?;
            let payload = r.take(len)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::Dense { dims, data }
        }
        TAG_TERNARY => {
            let (rows, cols) = as_matrix_dims(&dims);
            let len = rows
                .checked_mul(cols.div_ceil(4))
                .ok_or_else(|| FfnError::data("ternary payload size overflows"))?;
            let payload = r.take(len)?.to_vec();
            Tensor::Ternary {
                dims,
                matrix: TernaryMatrix::from_packed(rows, cols, payload)?,
            }
        }
        other => return Err(FfnError::data(format!("unknown tensor tag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(FfnError::data("trailing bytes after tensor payload"));
    }
    Ok(tensor)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)
        .map_err(|e| FfnError::data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        FfnError::Data(msg) => FfnError::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_dense_matrix(path: &Path, m: &DenseMatrix) -> Result<()> {
    fs::write(path, encode_dense(&[m.rows(), m.cols()], m.data())?)?;
    Ok(())
}

pub fn write_vector(path: &Path, v: &[f32]) -> Result<()> {
    fs::write(path, encode_dense(&[v.len()], v)?)?;
    Ok(())
}

pub fn write_ternary(path: &Path, m: &TernaryMatrix) -> Result<()> {
    fs::write(path, encode_ternary(m)?)?;
    Ok(())
}

pub fn read_dense_matrix(path: &Path) -> Result<DenseMatrix> {
    read_tensor(path)?.into_dense_matrix()
}

pub fn read_ternary(path: &Path) -> Result<TernaryMatrix> {
    read_tensor(path)?.into_ternary()
}

pub fn read_vector(path: &Path) -> Result<Vec<f32>> {
    read_tensor(path)?.into_vector()
}

pub fn read_scale(path: &Path) -> Result<DiagonalScale> {
    DiagonalScale::new(read_vector(path)?)
}
