//! Binary checkpoint of model parameters.
//!
//! Layout, all integers little-endian:
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 4    | magic `KGCK`                                 |
//! | 4      | 4    | format version, `u32` = 1                    |
//! | 8      | 4    | aggregation, `u32`: 0 = sum, 1 = last        |
//! | 12     | 4    | tensor count `n`, `u32` = layers + 1         |
//! | 16     | ...  | `n` tensors                                  |
//!
//! Each tensor is `rows: u64`, `cols: u64`, then `rows * cols` `f32` values in
//! row-major order. Tensor 0 is `E0`; tensor `l + 1` is the layer-`l` weight.

use std::path::Path;

use crate::error::{Error, Result};
use crate::kgnn::{Aggregation, ModelParams};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"KGCK";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams<f32>, aggregation: Aggregation) -> Vec<u8> {
    let payload: usize = params.tensors().map(|t| 16 + 4 * t.len()).sum();
    let mut out = Vec::with_capacity(16 + payload);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let agg: u32 = match aggregation {
        Aggregation::Sum => 0,
        Aggregation::Last => 1,
    };
    out.extend_from_slice(&agg.to_le_bytes());
    out.extend_from_slice(&((params.thetas.len() + 1) as u32).to_le_bytes());
    for t in params.tensors() {
        out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams<f32>, Aggregation)> {
    let mut r = Reader { buf: bytes };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let aggregation = match r.u32()? {
        0 => Aggregation::Sum,
        1 => Aggregation::Last,
        x => return Err(Error::Checkpoint(format!("unknown aggregation code {x}"))),
    };
    let count = r.u32()? as usize;
    if count < 2 {
        return Err(Error::Checkpoint(format!(
            "need at least 2 tensors, found {count}"
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let rows =
            usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("rows overflow".into()))?;
        let cols =
            usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("cols overflow".into()))?;
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
        let data = r
            .take(len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(DenseMatrix::new(rows, cols, data)?);
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.buf.len())));
    }
    let mut it = tensors.into_iter();
    let e0 = it.next().expect("count >= 2");
    let thetas: Vec<DenseMatrix<f32>> = it.collect();
    let d = e0.cols();
    if thetas.iter().any(|t| t.shape() != (d, d)) {
        return Err(Error::Checkpoint("layer weights must be d x d".into()));
    }
    Ok((ModelParams { e0, thetas }, aggregation))
}

pub fn save(path: &Path, params: &ModelParams<f32>, aggregation: Aggregation) -> Result<()> {
    std::fs::write(path, to_bytes(params, aggregation))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams<f32>, Aggregation)> {
    from_bytes(&std::fs::read(path)?)
}
