//! Runtime values flowing along graph edges.

use crate::error::{Error, Result};
use crate::quant::QuantParams;

/// Row-major fp32 matrix (`rows` = batch dimension).
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Unsigned 8-bit quantized matrix together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<u8>,
    pub params: QuantParams,
}

/// Variable-length id lists for one sparse slot, one list per sample.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseIds {
    pub lengths: Vec<u32>,
    pub ids: Vec<u32>,
}

impl SparseIds {
    pub fn from_lists<'a>(lists: impl IntoIterator<Item = &'a [u32]>) -> SparseIds {
        let mut s = SparseIds::default();
        for l in lists {
            s.lengths.push(l.len() as u32);
            s.ids.extend_from_slice(l);
        }
        s
    }

    pub fn samples(&self) -> usize {
        self.lengths.len()
    }

    /// Iterate `(sample index, ids)` pairs.
    pub fn iter(&self) -> impl Iterator<Item = &[u32]> {
        let mut start = 0usize;
        self.lengths.iter().map(move |&l| {
            let s = &self.ids[start..start + l as usize];
            start += l as usize;
            s
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    F32(Matrix),
    Q8(QMatrix),
    Ids(SparseIds),
}

impl Value {
    pub fn kind(&self) -> &'static str {
        match self {
            Value::F32(_) => "fp32",
            Value::Q8(_) => "uint8",
            Value::Ids(_) => "ids",
        }
    }

    pub fn as_f32(&self) -> Result<&Matrix> {
        match self {
            Value::F32(m) => Ok(m),
            other => Err(Error::Shape(format!("expected fp32 tensor, got {}", other.kind()))),
        }
    }

    pub fn as_q8(&self) -> Result<&QMatrix> {
        match self {
            Value::Q8(m) => Ok(m),
            other => Err(Error::Shape(format!("expected uint8 tensor, got {}", other.kind()))),
        }
    }

    pub fn as_ids(&self) -> Result<&SparseIds> {
        match self {
            Value::Ids(s) => Ok(s),
            other => Err(Error::Shape(format!("expected id lists, got {}", other.kind()))),
        }
    }

    /// Real-valued view: fp32 as is, uint8 dequantized.
    pub fn to_real(&self) -> Result<Matrix> {
        match self {
            Value::F32(m) => Ok(m.clone()),
            Value::Q8(q) => Ok(Matrix {
                rows: q.rows,
                cols: q.cols,
                data: q
                    .data
                    .iter()
                    .map(|&v| q.params.dequantize_scalar(v as i32))
                    .collect(),
            }),
            Value::Ids(_) => Err(Error::Shape("id lists have no real-valued view".into())),
        }
    }

    /// Bitwise equality (fp32 compared by bit pattern).
    pub fn bitwise_eq(&self, other: &Value) -> bool {
        match (self, other) {
            (Value::F32(a), Value::F32(b)) => {
                a.rows == b.rows
                    && a.cols == b.cols
                    && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Value::Q8(a), Value::Q8(b)) => a.data == b.data && a.params.same_as(&b.params),
            (Value::Ids(a), Value::Ids(b)) => a == b,
            _ => false,
        }
    }
}
