//! Deterministic reference kernels.
//!
//! Reductions always run left to right over the reduction axis. Products and
//! sums are separate operations (no fused multiply-add).

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::{Half, HalfPolicy};
use crate::quant::{compute_qparams, IntRange, QuantParams};
use crate::tensor::{Matrix, QMatrix, SparseIds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumMode {
    Fp32,
    Fp16,
    Int32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LutSpec {
    pub lo: f32,
    pub hi: f32,
    pub entries: usize,
    pub interpolation: Interpolation,
}

impl Default for LutSpec {
    fn default() -> Self {
        LutSpec {
            lo: -12.0,
            hi: 12.0,
            entries: 2048,
            interpolation: Interpolation::Linear,
        }
    }
}

impl LutSpec {
    pub fn validate(&self) -> Result<()> {
        let min_entries = match self.interpolation {
            Interpolation::Linear => 2,
            Interpolation::Quadratic => 3,
        };
        if !(self.lo < self.hi) || self.entries < min_entries {
            return Err(Error::Config(format!("invalid lookup table {self:?}")));
        }
        Ok(())
    }
}

/// Tabulated scalar function with clamped input.
#[derive(Debug, Clone)]
pub struct Lut {
    spec: LutSpec,
    table: Vec<f64>,
}

impl Lut {
    pub fn new(spec: LutSpec, f: impl Fn(f64) -> f64) -> Result<Lut> {
        spec.validate()?;
        let (lo, hi) = (spec.lo as f64, spec.hi as f64);
        let n = (spec.entries - 1) as f64;
        let table = (0..spec.entries)
            .map(|i| f(lo + (hi - lo) * i as f64 / n))
            .collect();
        Ok(Lut { spec, table })
    }

    pub fn sigmoid(spec: LutSpec) -> Result<Lut> {
        Lut::new(spec, sigmoid64)
    }

    pub fn swish(spec: LutSpec) -> Result<Lut> {
        Lut::new(spec, |x| x * sigmoid64(x))
    }

    pub fn eval(&self, x: f32) -> f32 {
        let (lo, hi) = (self.spec.lo as f64, self.spec.hi as f64);
        let xc = (x as f64).clamp(lo, hi);
        let last = self.table.len() - 1;
        let t = (xc - lo) * last as f64 / (hi - lo);
        let y = match self.spec.interpolation {
            Interpolation::Linear => {
                let i = (t.floor() as usize).min(last - 1);
                let s = t - i as f64;
                self.table[i] + s * (self.table[i + 1] - self.table[i])
            }
            Interpolation::Quadratic => {
                let i = (t.floor() as usize).min(last - 2);
                let s = t - i as f64;
                let (y0, y1, y2) = (self.table[i], self.table[i + 1], self.table[i + 2]);
                y0 + s * (y1 - y0) + s * (s - 1.0) / 2.0 * (y2 - 2.0 * y1 + y0)
            }
        };
        y as f32
    }
}

pub fn sigmoid64(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn check_fc_shapes(x: &Matrix, w_len: usize, bias: &[f32], k: usize) -> Result<usize> {
    let n = x.cols;
    if w_len != n * k || bias.len() != k {
        return Err(Error::Shape(format!(
            "fc input has {n} columns, weight {w_len} elements, bias {}, output {k}",
            bias.len()
        )));
    }
    Ok(n)
}

/// fp32 FC: `y = x W + b`, accumulating each output left to right over the
/// input dimension, bias added last.
pub fn fc_f32(x: &Matrix, w: &[f32], bias: &[f32], k: usize, relu: bool) -> Result<Matrix> {
    let n = check_fc_shapes(x, w.len(), bias, k)?;
    let mut out = Matrix::zeros(x.rows, k);
    for i in 0..x.rows {
        let xi = x.row(i);
        let acc = &mut out.data[i * k..(i + 1) * k];
        for t in 0..n {
            let a = xi[t];
            let wt = &w[t * k..(t + 1) * k];
            for j in 0..k {
                acc[j] += a * wt[j];
            }
        }
        for j in 0..k {
            let y = acc[j] + bias[j];
            acc[j] = if relu { y.max(0.0) } else { y };
        }
    }
    Ok(out)
}

/// Weights stored as binary16, widened once, fp32 arithmetic.
pub fn fc_f16_storage(x: &Matrix, w: &[Half], bias: &[f32], k: usize, relu: bool) -> Result<Matrix> {
    let wide: Vec<f32> = w.iter().map(|h| h.to_f32()).collect();
    fc_f32(x, &wide, bias, k, relu)
}

#[inline]
fn h64(x: f64, policy: HalfPolicy) -> f32 {
    Half::from_f64_with(x, policy).to_f32()
}

/// fp16 compute: inputs and products rounded to binary16, accumulation in the
/// given mode.
pub fn fc_f16_compute(
    x: &Matrix,
    w: &[Half],
    bias: &[f32],
    k: usize,
    accum: AccumMode,
    policy: HalfPolicy,
    relu: bool,
) -> Result<Matrix> {
    let n = check_fc_shapes(x, w.len(), bias, k)?;
    let wide: Vec<f32> = w.iter().map(|h| h.to_f32()).collect();
    let mut out = Matrix::zeros(x.rows, k);
    for i in 0..x.rows {
        let xh: Vec<f32> = x.row(i).iter().map(|&v| h64(v as f64, policy)).collect();
        let acc = &mut out.data[i * k..(i + 1) * k];
        for t in 0..n {
            let wt = &wide[t * k..(t + 1) * k];
            for j in 0..k {
                let p = h64(xh[t] as f64 * wt[j] as f64, policy);
                acc[j] = match accum {
                    AccumMode::Fp16 => h64(acc[j] as f64 + p as f64, policy),
                    _ => acc[j] + p,
                };
            }
        }
        for j in 0..k {
            let y = match accum {
                AccumMode::Fp16 => h64(acc[j] as f64 + h64(bias[j] as f64, policy) as f64, policy),
                _ => acc[j] + bias[j],
            };
            acc[j] = if relu { y.max(0.0) } else { y };
        }
    }
    Ok(out)
}

/// Integer stage of the int8 FC: `acc[i,j] = sum_t a[i,t] w[t,j] - z_a colsum[j]`.
pub fn int8_accumulate(a: &QMatrix, w: &[i8], k: usize, col_offsets: &[i32]) -> Result<Vec<i32>> {
    let n = a.cols;
    if w.len() != n * k || col_offsets.len() != k {
        return Err(Error::Shape(format!(
            "int8 fc: input {n} columns, weight {} elements, {} offsets, output {k}",
            w.len(),
            col_offsets.len()
        )));
    }
    let za = a.params.zero_point;
    let max_off = col_offsets.iter().map(|c| c.unsigned_abs() as i64).max().unwrap_or(0);
    let bound = n as i64 * 255 * 128 + za.unsigned_abs() as i64 * max_off;
    let mut out = vec![0i32; a.rows * k];
    if bound <= i32::MAX as i64 {
        // The bound rules out overflow, so wrapping ops are exact here and
        // keep the loop vectorizable when overflow checks are on.
        for i in 0..a.rows {
            let ai = &a.data[i * n..(i + 1) * n];
            let acc = &mut out[i * k..(i + 1) * k];
            for t in 0..n {
                let av = ai[t] as i32;
                let wt = &w[t * k..(t + 1) * k];
                for (o, &wv) in acc.iter_mut().zip(wt) {
                    *o = o.wrapping_add(av.wrapping_mul(wv as i32));
                }
            }
            for (o, &c) in acc.iter_mut().zip(col_offsets) {
                *o = o.wrapping_sub(za.wrapping_mul(c));
            }
        }
        return Ok(out);
    }
    let overflow = || Error::AccumulatorOverflow(String::new());
    for i in 0..a.rows {
        let ai = &a.data[i * n..(i + 1) * n];
        for j in 0..k {
            let mut acc: i32 = 0;
            for t in 0..n {
                acc = acc
                    .checked_add(ai[t] as i32 * w[t * k + j] as i32)
                    .ok_or_else(overflow)?;
            }
            let comp = za.checked_mul(col_offsets[j]).ok_or_else(overflow)?;
            out[i * k + j] = acc.checked_sub(comp).ok_or_else(overflow)?;
        }
    }
    Ok(out)
}

/// Quantized weights of one int8 FC.
#[derive(Debug, Clone, Copy)]
pub struct Int8Weights<'a> {
    pub data: &'a [i8],
    /// One entry (per-tensor) or one per output channel.
    pub params: &'a [QuantParams],
    pub col_offsets: &'a [i32],
}

impl Int8Weights<'_> {
    #[inline]
    fn scale(&self, j: usize) -> f32 {
        if self.params.len() == 1 {
            self.params[0].scale
        } else {
            self.params[j].scale
        }
    }
}

pub enum Int8Output {
    F32(Matrix),
    Q8(QMatrix),
}

/// int8 FC. Without `output` params the result is dequantized to fp32 with an
/// fp32 bias; with them the bias is folded in as int32 and the accumulator is
/// requantized to uint8.
pub fn fc_int8(
    a: &QMatrix,
    w: &Int8Weights<'_>,
    bias: &[f32],
    k: usize,
    output: Option<QuantParams>,
    relu: bool,
) -> Result<Int8Output> {
    if bias.len() != k || (w.params.len() != 1 && w.params.len() != k) {
        return Err(Error::Shape("int8 fc bias or weight params do not match output".into()));
    }
    let acc = int8_accumulate(a, w.data, k, w.col_offsets)?;
    let sa = a.params.scale;
    let combined: Vec<f32> = (0..k).map(|j| sa * w.scale(j)).collect();
    match output {
        None => {
            let mut y = Vec::with_capacity(acc.len());
            for (idx, &v) in acc.iter().enumerate() {
                let j = idx % k;
                let r = combined[j] * v as f32 + bias[j];
                y.push(if relu { r.max(0.0) } else { r });
            }
            Ok(Int8Output::F32(Matrix::new(a.rows, k, y)?))
        }
        Some(p) => {
            let range = IntRange::UINT8;
            let bias_q: Vec<i64> = (0..k)
                .map(|j| (bias[j] as f64 / combined[j] as f64).round_ties_even() as i64)
                .collect();
            let mult: Vec<f64> = combined.iter().map(|&c| c as f64 / p.scale as f64).collect();
            let mut data = Vec::with_capacity(acc.len());
            for (idx, &v) in acc.iter().enumerate() {
                let j = idx % k;
                let total = v as i64 + bias_q[j];
                if total > i32::MAX as i64 || total < i32::MIN as i64 {
                    return Err(Error::AccumulatorOverflow(String::new()));
                }
                let q = ((total as f64 * mult[j]).round_ties_even() + p.zero_point as f64)
                    .clamp(range.i_min() as f64, range.i_max() as f64) as i32;
                let q = if relu { q.max(p.zero_point) } else { q };
                data.push(q as u8);
            }
            Ok(Int8Output::Q8(QMatrix {
                rows: a.rows,
                cols: k,
                data,
                params: p,
            }))
        }
    }
}

/// Pooled sum of table rows per sample, dequantizing rows on the fly.
pub fn sls(
    table: &EmbeddingTable,
    name: &str,
    ids: &SparseIds,
    fp16_accumulate: bool,
    policy: HalfPolicy,
) -> Result<Matrix> {
    let d = table.dim;
    let mut out = Matrix::zeros(ids.samples(), d);
    for (s, list) in ids.iter().enumerate() {
        let acc = &mut out.data[s * d..(s + 1) * d];
        for &id in list {
            if id as usize >= table.rows {
                return Err(Error::IndexOutOfRange {
                    table: name.to_string(),
                    id,
                    rows: table.rows,
                });
            }
            if fp16_accumulate {
                table.for_each_in_row(id as usize, |c, v| {
                    acc[c] = h64(acc[c] as f64 + v as f64, policy)
                });
            } else {
                table.for_each_in_row(id as usize, |c, v| acc[c] += v);
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

pub fn sigmoid_exact(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| sigmoid64(v as f64) as f32).collect(),
    }
}

pub fn swish_exact(x: &Matrix) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| (v as f64 * sigmoid64(v as f64)) as f32)
            .collect(),
    }
}

pub fn apply_lut(x: &Matrix, lut: &Lut) -> Matrix {
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data: x.data.iter().map(|&v| lut.eval(v)).collect(),
    }
}

pub fn concat(xs: &[&Matrix]) -> Result<Matrix> {
    let rows = xs.first().map_or(0, |m| m.rows);
    if xs.iter().any(|m| m.rows != rows) {
        return Err(Error::Shape("concat inputs differ in batch size".into()));
    }
    let cols: usize = xs.iter().map(|m| m.cols).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for m in xs {
            data.extend_from_slice(m.row(i));
        }
    }
    Matrix::new(rows, cols, data)
}

/// Shapes of a batched matmul: per sample `(p x q) * (q x r)`. With
/// `transpose_b` the second operand is stored as `r x q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmmShape {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub transpose_b: bool,
}

/// Batched matmul; `fp16` selects fp16 compute with the given accumulation.
pub fn batch_matmul(
    a: &Matrix,
    c: &Matrix,
    s: BmmShape,
    fp16: Option<(AccumMode, HalfPolicy)>,
) -> Result<Matrix> {
    let BmmShape { p, q, r, transpose_b } = s;
    if a.cols != p * q || c.cols != q * r || a.rows != c.rows {
        return Err(Error::Shape(format!(
            "batch_matmul operands {}x{} and {}x{} do not match p={p} q={q} r={r}",
            a.rows, a.cols, c.rows, c.cols
        )));
    }
    let round = |v: f32| -> f32 {
        match fp16 {
            Some((_, pol)) => h64(v as f64, pol),
            None => v,
        }
    };
    let mut out = Matrix::zeros(a.rows, p * r);
    for b in 0..a.rows {
        let ab: Vec<f32> = a.row(b).iter().map(|&v| round(v)).collect();
        let cb: Vec<f32> = c.row(b).iter().map(|&v| round(v)).collect();
        let ob = &mut out.data[b * p * r..(b + 1) * p * r];
        for i in 0..p {
            for j in 0..r {
                let mut acc = 0.0f32;
                for t in 0..q {
                    let cv = if transpose_b { cb[j * q + t] } else { cb[t * r + j] };
                    match fp16 {
                        None => acc += ab[i * q + t] * cv,
                        Some((mode, pol)) => {
                            let prod = h64(ab[i * q + t] as f64 * cv as f64, pol);
                            acc = match mode {
                                AccumMode::Fp16 => h64(acc as f64 + prod as f64, pol),
                                _ => acc + prod,
                            };
                        }
                    }
                }
                ob[i * r + j] = acc;
            }
        }
    }
    Ok(out)
}

fn check_finite(x: &Matrix) -> Result<()> {
    match x.data.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NonFinite(*v as f64)),
        None => Ok(()),
    }
}

pub fn quantize_op(x: &Matrix, p: QuantParams) -> Result<QMatrix> {
    check_finite(x)?;
    Ok(QMatrix {
        rows: x.rows,
        cols: x.cols,
        data: x
            .data
            .iter()
            .map(|&v| p.quantize_scalar(v, IntRange::UINT8) as u8)
            .collect(),
        params: p,
    })
}

/// Per-batch min/max parameters, then quantize.
pub fn quantize_dynamic(x: &Matrix) -> Result<QMatrix> {
    check_finite(x)?;
    let (lo, hi) = if x.data.is_empty() {
        (0.0, 0.0)
    } else {
        crate::quant::min_max(&x.data)
    };
    quantize_op(x, compute_qparams(lo, hi, IntRange::UINT8))
}

/// `Q_p(D(q))` elementwise, the fold of a dequantize/quantize pair.
pub fn requantize_op(q: &QMatrix, p: QuantParams) -> QMatrix {
    QMatrix {
        rows: q.rows,
        cols: q.cols,
        data: q
            .data
            .iter()
            .map(|&v| {
                let real = q.params.dequantize_scalar(v as i32);
                p.quantize_scalar(real, IntRange::UINT8) as u8
            })
            .collect(),
        params: p,
    }
}

pub fn dequantize_op(q: &QMatrix) -> Matrix {
    Matrix {
        rows: q.rows,
        cols: q.cols,
        data: q
            .data
            .iter()
            .map(|&v| q.params.dequantize_scalar(v as i32))
            .collect(),
    }
}
