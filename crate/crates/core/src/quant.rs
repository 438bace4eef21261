//! Linear quantization: (scale, zero point) for activations and weights,
//! (scale, bias) for embedding rows, range selection and int4 packing.

use serde::{Deserialize, Serialize};

use crate::calib::Histogram;
use crate::error::{Error, Result};
use crate::numerics::Half;

/// Target integer type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IntRange {
    pub bits: u8,
    pub signed: bool,
}

impl IntRange {
    pub const UINT8: IntRange = IntRange { bits: 8, signed: false };
    pub const INT8: IntRange = IntRange { bits: 8, signed: true };
    pub const UINT4: IntRange = IntRange { bits: 4, signed: false };
    pub const INT4: IntRange = IntRange { bits: 4, signed: true };

    pub fn new(bits: u8, signed: bool) -> Result<IntRange> {
        if bits != 4 && bits != 8 {
            return Err(Error::Config(format!("unsupported bit width {bits}")));
        }
        Ok(IntRange { bits, signed })
    }

    pub fn i_min(self) -> i32 {
        if self.signed {
            -(1 << (self.bits - 1))
        } else {
            0
        }
    }

    pub fn i_max(self) -> i32 {
        if self.signed {
            (1 << (self.bits - 1)) - 1
        } else {
            (1 << self.bits) - 1
        }
    }

    /// `i_max - i_min`.
    pub fn levels(self) -> i32 {
        self.i_max() - self.i_min()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
}

impl QuantParams {
    pub fn new(scale: f32, zero_point: i32) -> QuantParams {
        debug_assert!(scale > 0.0);
        QuantParams { scale, zero_point }
    }

    /// Bitwise equality (used by graph transforms to match boundaries).
    pub fn same_as(&self, other: &QuantParams) -> bool {
        self.scale.to_bits() == other.scale.to_bits() && self.zero_point == other.zero_point
    }

    #[inline]
    pub fn quantize_scalar(&self, x: f32, range: IntRange) -> i32 {
        let q = (x as f64 / self.scale as f64).round_ties_even() + self.zero_point as f64;
        q.clamp(range.i_min() as f64, range.i_max() as f64) as i32
    }

    #[inline]
    pub fn dequantize_scalar(&self, q: i32) -> f32 {
        self.scale * (q - self.zero_point) as f32
    }
}

/// Per-row parameters for embedding tables. For 4-bit rows both fields hold
/// binary16-representable values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowQuantParams {
    pub scale: f32,
    pub bias: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    PerTensor,
    /// One parameter pair per output channel (column of an n x k weight).
    PerChannel,
    PerRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum RangeMethod {
    MinMax,
    /// Keep the central `q` of the mass, trimming `(1 - q) / 2` per tail.
    Percentile { q: f32 },
    L2Min,
}

impl RangeMethod {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RangeMethod::Percentile { q } if !(q > 0.0 && q <= 1.0) => {
                Err(Error::Config(format!("percentile q={q} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Whether this is a refined (non min-max) method.
    pub fn is_refined(&self) -> bool {
        !matches!(self, RangeMethod::MinMax)
    }
}

/// Parameters for `[x_min, x_max]` after widening the range to contain zero.
/// A degenerate range yields `scale = 1` with the zero point chosen so that
/// the constant reconstructs exactly.
pub fn compute_qparams(x_min: f32, x_max: f32, range: IntRange) -> QuantParams {
    debug_assert!(x_min <= x_max);
    let lo = x_min.min(0.0) as f64;
    let hi = x_max.max(0.0) as f64;
    let levels = range.levels() as f64;
    let scale = ((hi - lo) / levels) as f32;
    if !(scale > 0.0) || !scale.is_finite() {
        let zp = (range.i_max() as f64 - hi).round_ties_even();
        return QuantParams::new(1.0, zp.clamp(range.i_min() as f64, range.i_max() as f64) as i32);
    }
    // I_max - X_max / scale, evaluated with the exact (unrounded) scale.
    let zp = (range.i_max() as f64 - hi * levels / (hi - lo)).round_ties_even();
    QuantParams::new(
        scale,
        zp.clamp(range.i_min() as f64, range.i_max() as f64) as i32,
    )
}

/// Symmetric parameters (zero point 0) covering `[-abs_max, abs_max]`.
pub fn compute_symmetric_qparams(abs_max: f32, range: IntRange) -> QuantParams {
    debug_assert!(range.signed);
    let scale = abs_max / range.i_max() as f32;
    if !(scale > 0.0) || !scale.is_finite() {
        return QuantParams::new(1.0, 0);
    }
    QuantParams::new(scale, 0)
}

fn check_finite(x: &[f32]) -> Result<()> {
    match x.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(*v as f64)),
        None => Ok(()),
    }
}

pub fn quantize(x: &[f32], p: &QuantParams, range: IntRange) -> Result<Vec<i32>> {
    check_finite(x)?;
    Ok(x.iter().map(|&v| p.quantize_scalar(v, range)).collect())
}

pub fn dequantize(q: &[i32], p: &QuantParams) -> Vec<f32> {
    q.iter().map(|&v| p.dequantize_scalar(v)).collect()
}

/// `|| x - D(Q(x)) ||_2`.
pub fn quant_error_l2(x: &[f32], p: &QuantParams, range: IntRange) -> Result<f32> {
    check_finite(x)?;
    let sq: f64 = x
        .iter()
        .map(|&v| {
            let d = v as f64 - p.dequantize_scalar(p.quantize_scalar(v, range)) as f64;
            d * d
        })
        .sum();
    Ok(sq.sqrt() as f32)
}

pub fn compute_row_params(row: &[f32], range: IntRange) -> Result<RowQuantParams> {
    if row.is_empty() {
        return Err(Error::Data("empty embedding row".into()));
    }
    check_finite(row)?;
    let (min, max) = row
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let levels = range.levels() as f64;
    if range.bits == 4 {
        // fp16 metadata: round the bias down and the scale up so the stored
        // grid still covers [min, max].
        let bias = Half::round_down(min).to_f32();
        let span = max as f64 - bias as f64;
        if span == 0.0 {
            return Ok(RowQuantParams { scale: 1.0, bias });
        }
        let mut scale = Half::round_up((span / levels) as f32);
        while (scale.to_f64() * levels) < span {
            scale = scale.next_up();
        }
        return Ok(RowQuantParams {
            scale: scale.to_f32(),
            bias,
        });
    }
    let scale = ((max as f64 - min as f64) / levels) as f32;
    if !(scale > 0.0) {
        return Ok(RowQuantParams { scale: 1.0, bias: min });
    }
    Ok(RowQuantParams { scale, bias: min })
}

#[inline]
pub fn quantize_row_scalar(x: f32, p: &RowQuantParams, range: IntRange) -> u8 {
    let q = ((x as f64 - p.bias as f64) / p.scale as f64).round_ties_even();
    q.clamp(range.i_min() as f64, range.i_max() as f64) as u8
}

#[inline]
pub fn dequantize_row_scalar(q: u8, p: &RowQuantParams) -> f32 {
    p.scale * q as f32 + p.bias
}

/// Quantize a row; 4-bit codes come back packed two per byte.
pub fn quantize_row(row: &[f32], p: &RowQuantParams, range: IntRange) -> Result<Vec<u8>> {
    check_finite(row)?;
    let codes: Vec<u8> = row
        .iter()
        .map(|&v| quantize_row_scalar(v, p, range))
        .collect();
    Ok(if range.bits == 4 {
        pack_int4(&codes)
    } else {
        codes
    })
}

/// Inverse of [`quantize_row`]; `dim` is the unpacked element count.
pub fn dequantize_row(packed: &[u8], p: &RowQuantParams, range: IntRange, dim: usize) -> Vec<f32> {
    if range.bits == 4 {
        unpack_int4(packed, dim)
            .into_iter()
            .map(|q| dequantize_row_scalar(q, p))
            .collect()
    } else {
        packed[..dim]
            .iter()
            .map(|&q| dequantize_row_scalar(q, p))
            .collect()
    }
}

/// Pack 4-bit codes, low nibble first (element 2i in the low nibble of byte i).
pub fn pack_int4(nibbles: &[u8]) -> Vec<u8> {
    nibbles
        .chunks(2)
        .map(|c| (c[0] & 0x0F) | (c.get(1).copied().unwrap_or(0) & 0x0F) << 4)
        .collect()
}

pub fn unpack_int4(bytes: &[u8], len: usize) -> Vec<u8> {
    (0..len)
        .map(|i| {
            let b = bytes[i / 2];
            if i % 2 == 0 {
                b & 0x0F
            } else {
                b >> 4
            }
        })
        .collect()
}

/// Quantile of already sorted data with linear interpolation.
fn sorted_quantile(sorted: &[f32], frac: f64) -> f32 {
    let pos = frac.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    (sorted[i] as f64 * (1.0 - t) + sorted[j] as f64 * t) as f32
}

/// Effective range of raw data. `range` is only consulted by `L2Min`, whose
/// error model depends on the number of quantization levels.
pub fn select_range(data: &[f32], method: RangeMethod, range: IntRange) -> Result<(f32, f32)> {
    if data.is_empty() {
        return Err(Error::Data("select_range on empty input".into()));
    }
    check_finite(data)?;
    method.validate()?;
    match method {
        RangeMethod::MinMax => Ok(min_max(data)),
        RangeMethod::Percentile { q } => {
            let mut sorted = data.to_vec();
            sorted.sort_by(f32::total_cmp);
            let tail = (1.0 - q as f64) / 2.0;
            Ok((
                sorted_quantile(&sorted, tail),
                sorted_quantile(&sorted, 1.0 - tail),
            ))
        }
        RangeMethod::L2Min => {
            let mut h = Histogram::new(crate::calib::DEFAULT_BINS);
            h.observe(data)?;
            h.derive_range(method, range)
        }
    }
}

pub(crate) fn min_max(data: &[f32]) -> (f32, f32) {
    data.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Signed symmetric int8 weights of an `n x k` (input-major) matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub data: Vec<i8>,
    /// One entry for per-tensor, `k` entries for per-channel.
    pub params: Vec<QuantParams>,
}

impl QuantizedWeights {
    pub fn params_for(&self, channel: usize) -> &QuantParams {
        if self.params.len() == 1 {
            &self.params[0]
        } else {
            &self.params[channel]
        }
    }

    /// Column sums of the integer weights.
    pub fn column_offsets(&self, n: usize, k: usize) -> Vec<i32> {
        let mut off = vec![0i32; k];
        for t in 0..n {
            for (j, o) in off.iter_mut().enumerate() {
                *o += self.data[t * k + j] as i32;
            }
        }
        off
    }

    pub fn dequantize(&self, n: usize, k: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(n * k);
        for t in 0..n {
            for j in 0..k {
                out.push(self.params_for(j).dequantize_scalar(self.data[t * k + j] as i32));
            }
        }
        out
    }
}

fn symmetric_params_for(slice: &[f32], method: RangeMethod) -> Result<QuantParams> {
    let (lo, hi) = select_range(slice, method, IntRange::INT8)?;
    Ok(compute_symmetric_qparams(lo.abs().max(hi.abs()), IntRange::INT8))
}

/// Quantize an `n x k` weight matrix to signed int8, symmetric around zero.
pub fn quantize_weights(
    w: &[f32],
    n: usize,
    k: usize,
    granularity: Granularity,
    method: RangeMethod,
) -> Result<QuantizedWeights> {
    if w.len() != n * k {
        return Err(Error::Shape(format!("weight has {} elements, expected {n}x{k}", w.len())));
    }
    let params = match granularity {
        Granularity::PerTensor => vec![symmetric_params_for(w, method)?],
        Granularity::PerChannel => (0..k)
            .map(|j| {
                let col: Vec<f32> = (0..n).map(|t| w[t * k + j]).collect();
                symmetric_params_for(&col, method)
            })
            .collect::<Result<_>>()?,
        Granularity::PerRow => {
            return Err(Error::Config("per-row granularity applies to embedding tables only".into()))
        }
    };
    let mut qw = QuantizedWeights {
        data: Vec::with_capacity(n * k),
        params,
    };
    for t in 0..n {
        for j in 0..k {
            let q = qw.params_for(j).quantize_scalar(w[t * k + j], IntRange::INT8);
            qw.data.push(q as i8);
        }
    }
    Ok(qw)
}
