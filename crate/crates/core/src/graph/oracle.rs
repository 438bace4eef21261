//! Independent fp64 interpreter for unquantized graphs. Weights are taken as
//! stored (fp16 widened, table rows dequantized); all arithmetic is f64.

use std::collections::HashMap;

use super::{Blob, ModelGraph, Op};
use crate::dataset::Batch;
use crate::embedding::TableFormat;
use crate::error::{Error, Result};
use crate::quant::unpack_int4;

struct M64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

enum V64 {
    Dense(M64),
    Ids(Vec<Vec<u32>>),
}

fn dense<'a>(v: Option<&'a V64>, t: &str) -> Result<&'a M64> {
    match v {
        Some(V64::Dense(m)) => Ok(m),
        Some(V64::Ids(_)) => Err(Error::Shape(format!("`{t}` is not dense"))),
        None => Err(Error::MissingTensor(t.to_string())),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// fp64 predictions of `g` on `batch`.
pub fn run_f64(g: &ModelGraph, batch: &Batch) -> Result<Vec<f64>> {
    let mut env: HashMap<&str, V64> = HashMap::new();
    env.insert(
        &g.io.dense_input,
        V64::Dense(M64 {
            rows: batch.dense.rows,
            cols: batch.dense.cols,
            data: batch.dense.data.iter().map(|&v| v as f64).collect(),
        }),
    );
    for (name, ids) in g.io.sparse_inputs.iter().zip(&batch.sparse) {
        env.insert(name, V64::Ids(ids.iter().map(|l| l.to_vec()).collect()));
    }
    for node in &g.nodes {
        let arg = |i: usize| -> Result<&M64> {
            let t = &node.inputs[i];
            dense(env.get(t.as_str()), t)
        };
        let out = match &node.op {
            Op::FullyConnected(a) | Op::FcRelu(a) => {
                let x = arg(0)?;
                let w: Vec<f64> = match g.blob(&a.weight)? {
                    Blob::F32(v) => v.iter().map(|&x| x as f64).collect(),
                    Blob::F16(v) => v.iter().map(|h| h.to_f64()).collect(),
                    _ => {
                        return Err(Error::Unsupported {
                            kind: "int8 FullyConnected".into(),
                            backend: "fp64-oracle".into(),
                        })
                    }
                };
                let b = g.blob(&a.bias)?.to_f32();
                let (n, k) = (a.in_dim, a.out_dim);
                let mut data = Vec::with_capacity(x.rows * k);
                for i in 0..x.rows {
                    let mut s: Vec<f64> = b.iter().map(|&v| v as f64).collect();
                    for t in 0..n {
                        let xv = x.data[i * n + t];
                        for (acc, &wv) in s.iter_mut().zip(&w[t * k..(t + 1) * k]) {
                            *acc += xv * wv;
                        }
                    }
                    if matches!(node.op, Op::FcRelu(_)) {
                        s.iter_mut().for_each(|v| *v = v.max(0.0));
                    }
                    data.extend(s);
                }
                M64 { rows: x.rows, cols: k, data }
            }
            Op::Relu | Op::Sigmoid { .. } | Op::Swish { .. } => {
                let x = arg(0)?;
                let f = |v: f64| match node.op {
                    Op::Relu => v.max(0.0),
                    Op::Sigmoid { .. } => sigmoid(v),
                    _ => v * sigmoid(v),
                };
                M64 {
                    rows: x.rows,
                    cols: x.cols,
                    data: x.data.iter().map(|&v| f(v)).collect(),
                }
            }
            Op::Concat => {
                let parts = (0..node.inputs.len()).map(arg).collect::<Result<Vec<_>>>()?;
                let rows = parts[0].rows;
                let cols = parts.iter().map(|m| m.cols).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for i in 0..rows {
                    for m in &parts {
                        data.extend_from_slice(&m.data[i * m.cols..(i + 1) * m.cols]);
                    }
                }
                M64 { rows, cols, data }
            }
            Op::SparseLengthsSum { table } => {
                let t = g.table(table)?;
                let lists = match env.get(node.inputs[0].as_str()) {
                    Some(V64::Ids(l)) => l,
                    _ => return Err(Error::MissingTensor(node.inputs[0].clone())),
                };
                let mut data = vec![0.0; lists.len() * t.dim];
                for (s, l) in lists.iter().enumerate() {
                    for &id in l {
                        if id as usize >= t.rows {
                            return Err(Error::IndexOutOfRange {
                                table: table.clone(),
                                id,
                                rows: t.rows,
                            });
                        }
                        let row: Vec<f64> = match t.row_params(id as usize) {
                            None => t.row_values(id as usize).iter().map(|&v| v as f64).collect(),
                            Some(p) => {
                                let codes = match t.format {
                                    TableFormat::Rowwise8 => t.row_codes(id as usize).to_vec(),
                                    _ => unpack_int4(t.row_codes(id as usize), t.dim),
                                };
                                codes
                                    .iter()
                                    .map(|&q| p.scale as f64 * q as f64 + p.bias as f64)
                                    .collect()
                            }
                        };
                        for (d, v) in row.iter().enumerate() {
                            data[s * t.dim + d] += v;
                        }
                    }
                }
                M64 { rows: lists.len(), cols: t.dim, data }
            }
            Op::BatchMatMul(s) => {
                let a = arg(0)?;
                let c = arg(1)?;
                let mut data = vec![0.0; a.rows * s.p * s.r];
                for b in 0..a.rows {
                    let ab = &a.data[b * a.cols..(b + 1) * a.cols];
                    let cb = &c.data[b * c.cols..(b + 1) * c.cols];
                    for i in 0..s.p {
                        for j in 0..s.r {
                            let mut acc = 0.0;
                            for t in 0..s.q {
                                let cv = if s.transpose_b { cb[j * s.q + t] } else { cb[t * s.r + j] };
                                acc += ab[i * s.q + t] * cv;
                            }
                            data[b * s.p * s.r + i * s.r + j] = acc;
                        }
                    }
                }
                M64 { rows: a.rows, cols: s.p * s.r, data }
            }
            Op::Quantize(_) | Op::Dequantize(_) => {
                return Err(Error::Unsupported {
                    kind: format!("{:?}", node.op.kind()),
                    backend: "fp64-oracle".into(),
                })
            }
        };
        env.insert(&node.output, V64::Dense(out));
    }
    let out = dense(env.get(g.io.output.as_str()), &g.io.output)?;
    Ok(out.data.clone())
}
