//! Graph execution with pluggable per-node backends.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{Blob, ModelGraph, Node, Op, OpKind, Precision};
use crate::dataset::{to_batch, Batch, LabeledSample};
use crate::error::{Error, Result};
use crate::kernels::{self, AccumMode, Int8Output, Int8Weights, Lut, LutSpec};
use crate::numerics::HalfPolicy;
use crate::par::Exec;
use crate::tensor::Value;

/// Fixed evaluation batch size. Chunk boundaries never depend on the
/// execution strategy, so batch-dependent kernels stay deterministic.
pub const EVAL_BATCH: usize = 256;

/// Evaluates single nodes. Implementations must be deterministic.
pub trait Backend: Sync {
    fn name(&self) -> &str;

    fn supports(&self, _kind: OpKind) -> bool {
        true
    }

    fn eval(&self, g: &ModelGraph, node: &Node, inputs: &[&Value]) -> Result<Value>;
}

/// Knobs of the reference backend, used to emulate other targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Accumulate embedding pooling in binary16.
    pub sls_fp16_accumulate: bool,
    /// Evaluate every Sigmoid through this table.
    pub sigmoid_lut: Option<LutSpec>,
    /// Evaluate every Swish through this table.
    pub swish_lut: Option<LutSpec>,
    /// Run fp16 FC nodes (storage or compute) as fp16 compute with this
    /// accumulation.
    pub fp16_compute: Option<AccumMode>,
    pub half_policy: HalfPolicy,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            sls_fp16_accumulate: false,
            sigmoid_lut: None,
            swish_lut: None,
            fp16_compute: None,
            half_policy: HalfPolicy::DEFAULT,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceBackend {
    pub config: BackendConfig,
    name: Option<String>,
}

impl ReferenceBackend {
    pub fn new(config: BackendConfig) -> ReferenceBackend {
        ReferenceBackend { config, name: None }
    }

    pub fn named(name: &str, config: BackendConfig) -> ReferenceBackend {
        ReferenceBackend {
            config,
            name: Some(name.to_string()),
        }
    }
}

fn input<'a>(inputs: &[&'a Value], i: usize, node: &Node) -> Result<&'a Value> {
    inputs
        .get(i)
        .copied()
        .ok_or_else(|| Error::InvalidGraph(format!("node `{}` is missing input {i}", node.name)))
}

fn f32_blob<'a>(g: &'a ModelGraph, name: &str) -> Result<&'a [f32]> {
    match g.blob(name)? {
        Blob::F32(v) => Ok(v),
        other => Err(Error::InvalidGraph(format!("blob `{name}` is {}, expected f32", other.dtype()))),
    }
}

impl Backend for ReferenceBackend {
    fn name(&self) -> &str {
        self.name.as_deref().unwrap_or("reference")
    }

    fn eval(&self, g: &ModelGraph, node: &Node, inputs: &[&Value]) -> Result<Value> {
        let cfg = &self.config;
        let out = match &node.op {
            Op::FullyConnected(a) | Op::FcRelu(a) => {
                let relu = matches!(node.op, Op::FcRelu(_));
                let x = input(inputs, 0, node)?;
                let bias = f32_blob(g, &a.bias)?;
                let k = a.out_dim;
                match (node.precision, g.blob(&a.weight)?) {
                    (Precision::Int8, Blob::I8(w)) => {
                        let q = a.quant.as_ref().ok_or_else(|| {
                            Error::InvalidGraph(format!("int8 node `{}` lacks quant data", node.name))
                        })?;
                        let offsets = match g.blob(&q.col_offsets)? {
                            Blob::I32(v) => v,
                            _ => return Err(Error::InvalidGraph("column offsets must be i32".into())),
                        };
                        let weights = Int8Weights {
                            data: w,
                            params: &q.weight_params,
                            col_offsets: offsets,
                        };
                        let res = kernels::fc_int8(x.as_q8()?, &weights, bias, k, q.output, relu)
                            .map_err(|e| match e {
                                Error::AccumulatorOverflow(_) => {
                                    Error::AccumulatorOverflow(node.name.clone())
                                }
                                e => e,
                            })?;
                        match res {
                            Int8Output::F32(m) => Value::F32(m),
                            Int8Output::Q8(q) => Value::Q8(q),
                        }
                    }
                    (Precision::Fp32, Blob::F32(w)) => {
                        Value::F32(kernels::fc_f32(x.as_f32()?, w, bias, k, relu)?)
                    }
                    (Precision::Fp16Storage, Blob::F16(w)) => match cfg.fp16_compute {
                        Some(mode) => Value::F32(kernels::fc_f16_compute(
                            x.as_f32()?,
                            w,
                            bias,
                            k,
                            mode,
                            cfg.half_policy,
                            relu,
                        )?),
                        None => Value::F32(kernels::fc_f16_storage(x.as_f32()?, w, bias, k, relu)?),
                    },
                    (Precision::Fp16Compute { accum }, Blob::F16(w)) => {
                        Value::F32(kernels::fc_f16_compute(
                            x.as_f32()?,
                            w,
                            bias,
                            k,
                            cfg.fp16_compute.unwrap_or(accum),
                            cfg.half_policy,
                            relu,
                        )?)
                    }
                    (p, b) => {
                        return Err(Error::InvalidGraph(format!(
                            "node `{}`: precision {p:?} with {} weights",
                            node.name,
                            b.dtype()
                        )))
                    }
                }
            }
            Op::Relu => Value::F32(kernels::relu(input(inputs, 0, node)?.as_f32()?)),
            Op::Sigmoid { lut } => {
                let x = input(inputs, 0, node)?.as_f32()?;
                match cfg.sigmoid_lut.or(*lut) {
                    Some(spec) => Value::F32(kernels::apply_lut(x, &Lut::sigmoid(spec)?)),
                    None => Value::F32(kernels::sigmoid_exact(x)),
                }
            }
            Op::Swish { lut } => {
                let x = input(inputs, 0, node)?.as_f32()?;
                match cfg.swish_lut.or(*lut) {
                    Some(spec) => Value::F32(kernels::apply_lut(x, &Lut::swish(spec)?)),
                    None => Value::F32(kernels::swish_exact(x)),
                }
            }
            Op::Concat => {
                let ms = inputs
                    .iter()
                    .map(|v| v.as_f32())
                    .collect::<Result<Vec<_>>>()?;
                Value::F32(kernels::concat(&ms)?)
            }
            Op::SparseLengthsSum { table } => {
                let ids = input(inputs, 0, node)?.as_ids()?;
                Value::F32(kernels::sls(
                    g.table(table)?,
                    table,
                    ids,
                    cfg.sls_fp16_accumulate,
                    cfg.half_policy,
                )?)
            }
            Op::BatchMatMul(shape) => {
                let a = input(inputs, 0, node)?.as_f32()?;
                let c = input(inputs, 1, node)?.as_f32()?;
                let fp16 = match node.precision {
                    Precision::Fp16Compute { accum } => Some((accum, cfg.half_policy)),
                    _ => None,
                };
                Value::F32(kernels::batch_matmul(a, c, *shape, fp16)?)
            }
            Op::Quantize(q) => match input(inputs, 0, node)? {
                Value::F32(m) if q.dynamic => Value::Q8(kernels::quantize_dynamic(m)?),
                Value::F32(m) => Value::Q8(kernels::quantize_op(m, q.params)?),
                Value::Q8(m) => Value::Q8(kernels::requantize_op(m, q.params)),
                Value::Ids(_) => return Err(Error::Shape("cannot quantize id lists".into())),
            },
            Op::Dequantize(_) => Value::F32(kernels::dequantize_op(input(inputs, 0, node)?.as_q8()?)),
        };
        Ok(out)
    }
}

/// Sees every node evaluation, in order.
pub trait Observer {
    fn on_node(&mut self, index: usize, node: &Node, inputs: &[&Value], output: &Value) -> Result<()>;
}

fn bind_inputs(g: &ModelGraph, batch: &Batch) -> Result<HashMap<String, Value>> {
    if batch.dense.cols != g.io.dense_dim || batch.sparse.len() != g.io.sparse_inputs.len() {
        return Err(Error::Data(format!(
            "batch has {} dense features and {} sparse slots; model expects {} and {}",
            batch.dense.cols,
            batch.sparse.len(),
            g.io.dense_dim,
            g.io.sparse_inputs.len()
        )));
    }
    let mut env = HashMap::with_capacity(g.nodes.len() + 1 + batch.sparse.len());
    env.insert(g.io.dense_input.clone(), Value::F32(batch.dense.clone()));
    for (name, ids) in g.io.sparse_inputs.iter().zip(&batch.sparse) {
        env.insert(name.clone(), Value::Ids(ids.clone()));
    }
    Ok(env)
}

/// Execute all nodes in order; returns the output tensor.
pub fn execute(
    g: &ModelGraph,
    backend: &dyn Backend,
    batch: &Batch,
    mut observer: Option<&mut dyn Observer>,
) -> Result<Value> {
    let mut env = bind_inputs(g, batch)?;
    for (idx, node) in g.nodes.iter().enumerate() {
        if !backend.supports(node.op.kind()) {
            return Err(Error::Unsupported {
                kind: format!("{:?}", node.op.kind()),
                backend: backend.name().to_string(),
            });
        }
        let out = {
            let inputs = node
                .inputs
                .iter()
                .map(|t| env.get(t).ok_or_else(|| Error::MissingTensor(t.clone())))
                .collect::<Result<Vec<_>>>()?;
            let out = backend.eval(g, node, &inputs)?;
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_node(idx, node, &inputs, &out)?;
            }
            out
        };
        env.insert(node.output.clone(), out);
    }
    env.remove(&g.io.output)
        .ok_or_else(|| Error::MissingTensor(g.io.output.clone()))
}

/// Predictions (first output column) for one batch.
pub fn run(g: &ModelGraph, backend: &dyn Backend, batch: &Batch) -> Result<Vec<f32>> {
    let out = execute(g, backend, batch, None)?.to_real()?;
    if out.cols != 1 {
        return Err(Error::InvalidGraph(format!("output has {} columns", out.cols)));
    }
    Ok(out.data)
}

/// Predictions over a sample list, evaluated in fixed-size batches.
pub fn predict(
    g: &ModelGraph,
    backend: &dyn Backend,
    samples: &[LabeledSample],
    exec: Exec,
) -> Result<Vec<f32>> {
    let parts = exec.map_chunks(samples, EVAL_BATCH, |_, chunk| {
        to_batch(chunk).and_then(|b| run(g, backend, &b))
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
