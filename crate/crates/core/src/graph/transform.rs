//! Graph rewrites: FC+Relu fusion, Dequantize/Quantize elision and scheme
//! application. Every transform returns a new graph.

use super::{Blob, DequantizeAttrs, FcQuant, ModelGraph, Node, Op, Precision, QuantizeAttrs};
use crate::autoquant::scheme::{FallbackPrecision, QuantScheme, TablePolicy};
use crate::calib::Calibration;
use crate::embedding::{EmbeddingTable, TableFormat};
use crate::error::{Error, Result};
use crate::numerics::Half;
use crate::quant::{compute_qparams, quantize_weights, IntRange, QuantParams, RangeMethod};

/// Fuse every FC whose sole consumer is a Relu into one FC+Relu node. The
/// fused node keeps the FC's name and takes over the Relu's output tensor.
pub fn fuse_fc_relu(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    let mut i = 0;
    while i < out.nodes.len() {
        let fusable = matches!(out.nodes[i].op, Op::FullyConnected(_))
            && out.nodes[i].output != out.io.output
            && {
                let consumers = out.consumers(&out.nodes[i].output);
                consumers.len() == 1
                    && matches!(out.nodes[consumers[0]].op, Op::Relu)
                    && out.nodes[consumers[0]].inputs.len() == 1
            };
        if fusable {
            let r = out.consumers(&out.nodes[i].output)[0];
            let relu = out.nodes.remove(r);
            let fc = &mut out.nodes[i];
            if let Op::FullyConnected(a) = fc.op.clone() {
                fc.op = Op::FcRelu(a);
            }
            fc.output = relu.output;
        }
        i += 1;
    }
    out
}

fn rename_input(g: &mut ModelGraph, from: &str, to: &str) {
    for n in &mut g.nodes {
        for t in &mut n.inputs {
            if t == from {
                *t = to.to_string();
            }
        }
    }
}

/// Remove Dequantize->Quantize pairs with identical parameters and fold pairs
/// with differing parameters into a single requantizing Quantize.
pub fn elide_dq_q(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    loop {
        let mut changed = false;
        for qi in 0..out.nodes.len() {
            let Op::Quantize(qa) = &out.nodes[qi].op else {
                continue;
            };
            if qa.dynamic {
                continue;
            }
            let Some(di) = out.producer(&out.nodes[qi].inputs[0]) else {
                continue;
            };
            let Op::Dequantize(da) = &out.nodes[di].op else {
                continue;
            };
            let q_in = out.nodes[di].inputs[0].clone();
            if qa.params.same_as(&da.params) && qa.range == da.range {
                let q_out = out.nodes[qi].output.clone();
                out.nodes.remove(qi);
                rename_input(&mut out, &q_out, &q_in);
                if out.io.output == q_out {
                    out.io.output = q_in.clone();
                }
            } else {
                out.nodes[qi].inputs[0] = q_in;
            }
            changed = true;
            break;
        }
        // Drop dequantize nodes left without consumers.
        let before = out.nodes.len();
        let dead: Vec<usize> = (0..out.nodes.len())
            .filter(|&i| {
                matches!(out.nodes[i].op, Op::Dequantize(_))
                    && out.nodes[i].output != out.io.output
                    && out.consumers(&out.nodes[i].output).is_empty()
            })
            .collect();
        for i in dead.into_iter().rev() {
            out.nodes.remove(i);
        }
        if !changed && out.nodes.len() == before {
            return out;
        }
    }
}

fn to_fp16_blob(b: &Blob) -> Blob {
    match b {
        Blob::F32(v) => Blob::F16(v.iter().map(|&x| Half::from_f32(x)).collect()),
        other => other.clone(),
    }
}

/// Every FC with fp32 weights switched to binary16 weight storage.
pub fn to_fp16_weights(g: &ModelGraph) -> ModelGraph {
    let mut out = g.clone();
    for n in &mut out.nodes {
        if let Some(a) = n.op.fc() {
            if n.precision == Precision::Fp32 {
                let w = out.weights.get(&a.weight).map(to_fp16_blob);
                if let Some(w) = w {
                    out.weights.insert(a.weight.clone(), w);
                }
                n.precision = Precision::Fp16Storage;
            }
        }
    }
    out
}

/// Rowwise-quantize the fp32 tables of `g` according to `policy`.
pub fn quantize_tables(g: &ModelGraph, policy: TablePolicy) -> Result<ModelGraph> {
    let mut out = g.clone();
    let mut names: Vec<(&String, &EmbeddingTable)> = g
        .tables
        .iter()
        .filter(|(_, t)| t.format == TableFormat::Fp32)
        .collect();
    // Largest first; name order breaks ties.
    names.sort_by(|a, b| b.1.rows.cmp(&a.1.rows).then(a.0.cmp(b.0)));
    let int4_count = match policy {
        TablePolicy::Fp32 => return Ok(out),
        TablePolicy::Int8 => 0,
        TablePolicy::Int4TopHalf => names.len().div_ceil(2),
    };
    for (i, (name, t)) in names.iter().enumerate() {
        let format = if i < int4_count {
            TableFormat::Rowwise4
        } else {
            TableFormat::Rowwise8
        };
        out.tables.insert((*name).clone(), t.quantize(format)?);
    }
    Ok(out)
}

fn act_params(calib: &Calibration, tensor: &str, method: RangeMethod) -> Result<QuantParams> {
    let (lo, hi) = calib.get(tensor)?.derive_range(method, IntRange::UINT8)?;
    Ok(compute_qparams(lo, hi, IntRange::UINT8))
}

/// Quantize `g` according to `scheme`, using `calib` for static activation
/// ranges. Quantized FCs read a Quantize node and feed a Dequantize node;
/// adjacent Dequantize/Quantize pairs are then elided.
pub fn apply_scheme(g: &ModelGraph, scheme: &QuantScheme, calib: &Calibration) -> Result<ModelGraph> {
    let fused = fuse_fc_relu(g);
    scheme.validate_for(&fused)?;
    let last = fused.last_fc().map(|n| n.name.clone());
    let mut out = fused.clone();
    out.nodes.clear();
    for node in &fused.nodes {
        let Some(attrs) = node.op.fc() else {
            out.nodes.push(node.clone());
            continue;
        };
        if node.precision != Precision::Fp32 {
            out.nodes.push(node.clone());
            continue;
        }
        let cfg = scheme.layer_config(&node.name, Some(&node.name) == last.as_ref());
        if cfg.skip {
            let mut n = node.clone();
            if scheme.global.fallback == FallbackPrecision::Fp16 {
                let w = to_fp16_blob(fused.blob(&attrs.weight)?);
                out.weights.insert(attrs.weight.clone(), w);
                n.precision = Precision::Fp16Storage;
            }
            out.nodes.push(n);
            continue;
        }

        let w = match fused.blob(&attrs.weight)? {
            Blob::F32(w) => w,
            other => {
                return Err(Error::InvalidGraph(format!(
                    "fp32 FC `{}` has {} weights",
                    node.name,
                    other.dtype()
                )))
            }
        };
        let qw = quantize_weights(w, attrs.in_dim, attrs.out_dim, cfg.granularity, cfg.weight_range)?;
        let offsets = qw.column_offsets(attrs.in_dim, attrs.out_dim);
        let offsets_name = format!("{}/col_offsets", attrs.weight);
        out.weights.insert(attrs.weight.clone(), Blob::I8(qw.data.clone()));
        out.weights.insert(offsets_name.clone(), Blob::I32(offsets));

        let x = &node.inputs[0];
        let x_q = format!("{x}/q@{}", node.name);
        let in_params = if cfg.dynamic {
            QuantParams::new(1.0, 0)
        } else {
            act_params(calib, x, cfg.act_range)?
        };
        out.nodes.push(Node {
            name: format!("{}/quantize", node.name),
            op: Op::Quantize(QuantizeAttrs {
                params: in_params,
                range: IntRange::UINT8,
                dynamic: cfg.dynamic,
            }),
            inputs: vec![x.clone()],
            output: x_q.clone(),
            precision: Precision::Int8,
        });

        let out_params = if cfg.dynamic {
            None
        } else {
            Some(act_params(calib, &node.output, cfg.act_range)?)
        };
        let mut qnode = node.clone();
        qnode.precision = Precision::Int8;
        qnode.inputs[0] = x_q;
        if let Some(a) = qnode.op.fc_mut() {
            a.quant = Some(FcQuant {
                weight_params: qw.params.clone(),
                col_offsets: offsets_name,
                output: out_params,
            });
        }
        match out_params {
            None => out.nodes.push(qnode),
            Some(p) => {
                let y_q = format!("{}/q", node.output);
                qnode.output = y_q.clone();
                out.nodes.push(qnode);
                out.nodes.push(Node {
                    name: format!("{}/dequantize", node.name),
                    op: Op::Dequantize(DequantizeAttrs {
                        params: p,
                        range: IntRange::UINT8,
                    }),
                    inputs: vec![y_q],
                    output: node.output.clone(),
                    precision: Precision::Int8,
                });
            }
        }
    }
    let out = quantize_tables(&out, scheme.tables)?;
    Ok(elide_dq_q(&out))
}
