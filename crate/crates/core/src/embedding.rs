//! Embedding tables in fp32 or rowwise-quantized storage.
//!
//! Quantized rows are stored fused: codes followed by the row's scale and
//! bias (fp32 pair for 8-bit rows, fp16 pair for 4-bit rows), little-endian.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Half;
use crate::quant::{self, IntRange, RowQuantParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TableFormat {
    Fp32,
    Rowwise8,
    Rowwise4,
}

impl TableFormat {
    pub fn range(self) -> Option<IntRange> {
        match self {
            TableFormat::Fp32 => None,
            TableFormat::Rowwise8 => Some(IntRange::UINT8),
            TableFormat::Rowwise4 => Some(IntRange::UINT4),
        }
    }

    /// Stored bytes per row for embedding dimension `dim`.
    pub fn row_bytes(self, dim: usize) -> usize {
        match self {
            TableFormat::Fp32 => 4 * dim,
            TableFormat::Rowwise8 => dim + 8,
            TableFormat::Rowwise4 => dim.div_ceil(2) + 4,
        }
    }

    fn code_bytes(self, dim: usize) -> usize {
        match self {
            TableFormat::Fp32 => 4 * dim,
            TableFormat::Rowwise8 => dim,
            TableFormat::Rowwise4 => dim.div_ceil(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: usize,
    pub dim: usize,
    pub format: TableFormat,
    /// Raw storage: little-endian f32 values or fused quantized rows.
    pub bytes: Vec<u8>,
}

impl EmbeddingTable {
    pub fn from_f32(rows: usize, dim: usize, values: &[f32]) -> Result<EmbeddingTable> {
        if values.len() != rows * dim {
            return Err(Error::Shape(format!(
                "table data has {} values, expected {rows}x{dim}",
                values.len()
            )));
        }
        Ok(EmbeddingTable {
            rows,
            dim,
            format: TableFormat::Fp32,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        })
    }

    pub fn storage_bytes(&self) -> usize {
        self.bytes.len()
    }

    pub fn check_layout(&self) -> Result<()> {
        if self.bytes.len() != self.rows * self.format.row_bytes(self.dim) {
            return Err(Error::Shape(format!(
                "table storage is {} bytes, expected {}",
                self.bytes.len(),
                self.rows * self.format.row_bytes(self.dim)
            )));
        }
        Ok(())
    }

    fn row_slice(&self, r: usize) -> &[u8] {
        let rb = self.format.row_bytes(self.dim);
        &self.bytes[r * rb..(r + 1) * rb]
    }

    pub fn row_params(&self, r: usize) -> Option<RowQuantParams> {
        let row = self.row_slice(r);
        let cb = self.format.code_bytes(self.dim);
        match self.format {
            TableFormat::Fp32 => None,
            TableFormat::Rowwise8 => Some(RowQuantParams {
                scale: f32::from_le_bytes(row[cb..cb + 4].try_into().unwrap()),
                bias: f32::from_le_bytes(row[cb + 4..cb + 8].try_into().unwrap()),
            }),
            TableFormat::Rowwise4 => Some(RowQuantParams {
                scale: Half::from_bits(u16::from_le_bytes([row[cb], row[cb + 1]])).to_f32(),
                bias: Half::from_bits(u16::from_le_bytes([row[cb + 2], row[cb + 3]])).to_f32(),
            }),
        }
    }

    pub fn row_codes(&self, r: usize) -> &[u8] {
        &self.row_slice(r)[..self.format.code_bytes(self.dim)]
    }

    /// Call `f(column, value)` for every element of row `r`, dequantizing on
    /// the fly.
    #[inline]
    pub fn for_each_in_row(&self, r: usize, mut f: impl FnMut(usize, f32)) {
        let codes = self.row_codes(r);
        match self.format {
            TableFormat::Fp32 => {
                for (d, c) in codes.chunks_exact(4).enumerate() {
                    f(d, f32::from_le_bytes(c.try_into().unwrap()));
                }
            }
            TableFormat::Rowwise8 => {
                let p = self.row_params(r).unwrap();
                for (d, &q) in codes.iter().enumerate() {
                    f(d, quant::dequantize_row_scalar(q, &p));
                }
            }
            TableFormat::Rowwise4 => {
                let p = self.row_params(r).unwrap();
                for d in 0..self.dim {
                    let b = codes[d / 2];
                    let q = if d % 2 == 0 { b & 0x0F } else { b >> 4 };
                    f(d, quant::dequantize_row_scalar(q, &p));
                }
            }
        }
    }

    pub fn row_values(&self, r: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.dim];
        self.for_each_in_row(r, |d, v| out[d] = v);
        out
    }

    /// All values as fp32 (dequantized when stored quantized).
    pub fn to_f32(&self) -> Vec<f32> {
        (0..self.rows).flat_map(|r| self.row_values(r)).collect()
    }

    /// Rowwise-quantize an fp32 table.
    pub fn quantize(&self, format: TableFormat) -> Result<EmbeddingTable> {
        if self.format != TableFormat::Fp32 {
            return Err(Error::Config("table is already quantized".into()));
        }
        let Some(range) = format.range() else {
            return Ok(self.clone());
        };
        let mut bytes = Vec::with_capacity(self.rows * format.row_bytes(self.dim));
        for r in 0..self.rows {
            let row = self.row_values(r);
            let p = quant::compute_row_params(&row, range)?;
            bytes.extend(quant::quantize_row(&row, &p, range)?);
            match format {
                TableFormat::Rowwise8 => {
                    bytes.extend(p.scale.to_le_bytes());
                    bytes.extend(p.bias.to_le_bytes());
                }
                _ => {
                    // Parameters are already binary16 values; conversion is exact.
                    bytes.extend(Half::from_f32(p.scale).to_bits().to_le_bytes());
                    bytes.extend(Half::from_f32(p.bias).to_bits().to_le_bytes());
                }
            }
        }
        Ok(EmbeddingTable {
            rows: self.rows,
            dim: self.dim,
            format,
            bytes,
        })
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[u32]) -> EmbeddingTable {
        let mut bytes = Vec::with_capacity(rows.len() * self.format.row_bytes(self.dim));
        for &r in rows {
            bytes.extend_from_slice(self.row_slice(r as usize));
        }
        EmbeddingTable {
            rows: rows.len(),
            dim: self.dim,
            format: self.format,
            bytes,
        }
    }
}
