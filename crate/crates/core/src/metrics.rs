//! Normalized entropy, per-layer error attribution and flop accounting.

use serde::{Deserialize, Serialize};

use crate::autoquant::scheme::QuantScheme;
use crate::dataset::{has_both_classes, to_batch, Batch};
pub use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::graph::exec::{execute, EVAL_BATCH};
use crate::graph::transform::fuse_fc_relu;
use crate::graph::{Backend, ModelGraph, Node, Observer, Op};
use crate::par::Exec;
use crate::tensor::{Matrix, Value};

/// Prediction clamp applied before taking logs.
pub const PRED_EPS: f64 = 1e-7;
/// Added to the reference norm in relative L2 errors.
pub const L2_EPS: f64 = 1e-12;

/// Weighted cross entropy of one sample, natural log.
pub fn cross_entropy_sample(p: f64, s: &LabeledSample) -> f64 {
    let p = p.clamp(PRED_EPS, 1.0 - PRED_EPS);
    let w = s.weight as f64;
    if s.label == 1 {
        -w * p.ln()
    } else {
        -w * (1.0 - p).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeResult {
    pub ne: f64,
    pub p_star: f64,
    pub numerator: f64,
    pub denominator: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeComparison {
    pub ne_lowp: f64,
    pub ne_fp32: f64,
    pub ne_diff: f64,
}

impl NeComparison {
    pub fn passes(&self, max: f64) -> bool {
        self.ne_diff <= max
    }
}

/// Per-sample cross entropies in dataset order.
pub fn cross_entropies<P: Copy + Into<f64>>(preds: &[P], samples: &[LabeledSample]) -> Vec<f64> {
    preds
        .iter()
        .zip(samples)
        .map(|(&p, s)| cross_entropy_sample(p.into(), s))
        .collect()
}

pub fn normalized_entropy<P: Copy + Into<f64>>(preds: &[P], samples: &[LabeledSample]) -> Result<NeResult> {
    if preds.len() != samples.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            preds.len(),
            samples.len()
        )));
    }
    if !has_both_classes(samples) {
        return Err(Error::SingleClass);
    }
    let mut numerator = 0.0;
    for (&p, s) in preds.iter().zip(samples) {
        numerator += cross_entropy_sample(p.into(), s);
    }
    let (mut pos, mut total) = (0.0, 0.0);
    for s in samples {
        let w = s.weight as f64;
        total += w;
        if s.label == 1 {
            pos += w;
        }
    }
    let p_star = pos / total;
    let mut denominator = 0.0;
    for s in samples {
        denominator += cross_entropy_sample(p_star, s);
    }
    Ok(NeResult {
        ne: numerator / denominator,
        p_star,
        numerator,
        denominator,
    })
}

pub fn ne_diff(lowp: &NeResult, fp32: &NeResult) -> NeComparison {
    compare_ne(lowp.ne, fp32.ne)
}

pub fn compare_ne(ne_lowp: f64, ne_fp32: f64) -> NeComparison {
    NeComparison {
        ne_lowp,
        ne_fp32,
        ne_diff: (ne_lowp - ne_fp32) / ne_fp32,
    }
}

/// One node evaluation seen by a shadow run: the operands handed to the twin
/// and the low-precision output next to the twin's output.
pub struct ShadowStep<'a> {
    pub node: &'a Node,
    pub twin: &'a Node,
    pub inputs: &'a [Value],
    pub lowp: &'a Matrix,
    pub reference: &'a Matrix,
}

struct Shadow<'a, F> {
    reference: &'a ModelGraph,
    ref_backend: &'a dyn Backend,
    visit: F,
}

fn real_input(v: &Value) -> Result<Value> {
    Ok(match v {
        Value::Ids(ids) => Value::Ids(ids.clone()),
        other => Value::F32(other.to_real()?),
    })
}

impl<F: FnMut(ShadowStep<'_>) -> Result<()>> Observer for Shadow<'_, F> {
    fn on_node(&mut self, _: usize, node: &Node, inputs: &[&Value], output: &Value) -> Result<()> {
        if matches!(node.op, Op::Quantize(_) | Op::Dequantize(_)) {
            return Ok(());
        }
        let Some(twin) = self.reference.node(&node.name) else {
            if node.is_fc() {
                return Err(Error::Alignment(format!("no reference twin for `{}`", node.name)));
            }
            return Ok(());
        };
        if node.op.kind() != twin.op.kind() || node.inputs.len() != twin.inputs.len() {
            return Err(Error::Alignment(format!("`{}` differs from its reference twin", node.name)));
        }
        // An identical twin (same op and precision) takes the raw operands;
        // any other twin takes their real-valued form.
        let real = if twin.op == node.op && twin.precision == node.precision {
            inputs.iter().map(|v| (*v).clone()).collect()
        } else {
            inputs.iter().map(|v| real_input(v)).collect::<Result<Vec<_>>>()?
        };
        let refs: Vec<&Value> = real.iter().collect();
        let y_ref = self
            .ref_backend
            .eval(self.reference, twin, &refs)
            .map_err(|e| Error::Alignment(format!("twin of `{}`: {e}", node.name)))?
            .to_real()?;
        let y_q = output.to_real()?;
        if y_q.rows != y_ref.rows || y_q.cols != y_ref.cols {
            return Err(Error::Alignment(format!("`{}` output shape differs from its twin", node.name)));
        }
        (self.visit)(ShadowStep {
            node,
            twin,
            inputs: &real,
            lowp: &y_q,
            reference: &y_ref,
        })
    }
}

/// Execute `lowp` on `batch`; at every node that has a same-named twin in
/// `reference`, evaluate the twin with `ref_backend` on the low-precision
/// node's dequantized inputs and hand both outputs to `visit`.
pub fn shadow_execute(
    lowp: &ModelGraph,
    backend: &dyn Backend,
    reference: &ModelGraph,
    ref_backend: &dyn Backend,
    batch: &Batch,
    visit: impl FnMut(ShadowStep<'_>) -> Result<()>,
) -> Result<Value> {
    let mut obs = Shadow {
        reference,
        ref_backend,
        visit,
    };
    execute(lowp, backend, batch, Some(&mut obs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub node: String,
    pub error: f64,
}

/// Squared difference and squared reference norm of one shadow step.
pub fn squared_parts(a: &Matrix, b: &Matrix) -> (f64, f64) {
    let mut diff = 0.0;
    let mut norm = 0.0;
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let d = x as f64 - y as f64;
        diff += d * d;
        norm += y as f64 * y as f64;
    }
    (diff, norm)
}

pub fn relative_l2(diff_sq: f64, norm_sq: f64) -> f64 {
    diff_sq.sqrt() / (norm_sq.sqrt() + L2_EPS)
}

/// Relative L2 error of every aligned node of `lowp`, aggregated over all
/// samples, in graph order. Quantize/Dequantize nodes carry no twin.
pub fn per_layer_error_with(
    lowp: &ModelGraph,
    backend: &dyn Backend,
    reference: &ModelGraph,
    ref_backend: &dyn Backend,
    samples: &[LabeledSample],
    exec: Exec,
) -> Result<Vec<LayerError>> {
    let lowp = &fuse_fc_relu(lowp);
    let reference = fuse_fc_relu(reference);
    let parts = exec.map_chunks(samples, EVAL_BATCH, |_, chunk| -> Result<Vec<(String, f64, f64)>> {
        let batch = to_batch(chunk)?;
        let mut acc: Vec<(String, f64, f64)> = Vec::new();
        shadow_execute(lowp, backend, &reference, ref_backend, &batch, |s| {
            let (d, n) = squared_parts(s.lowp, s.reference);
            acc.push((s.node.name.clone(), d, n));
            Ok(())
        })?;
        Ok(acc)
    });
    let mut total: Vec<(String, f64, f64)> = Vec::new();
    for part in parts {
        let part = part?;
        if total.is_empty() {
            total = part;
        } else {
            for (t, p) in total.iter_mut().zip(part) {
                t.1 += p.1;
                t.2 += p.2;
            }
        }
    }
    Ok(total
        .into_iter()
        .map(|(node, d, n)| LayerError {
            node,
            error: relative_l2(d, n),
        })
        .collect())
}

/// Shadow errors of `lowp` against the fp32 `reference`, both on the default
/// reference backend.
pub fn per_layer_error(
    lowp: &ModelGraph,
    reference: &ModelGraph,
    samples: &[LabeledSample],
    exec: Exec,
) -> Result<Vec<LayerError>> {
    let b = crate::graph::ReferenceBackend::default();
    per_layer_error_with(lowp, &b, reference, &b, samples, exec)
}

/// Flops of one evaluation at batch size `m`: 2mnk per FC and 2mpqr per
/// batched matmul.
pub fn graph_flops(g: &ModelGraph, m: usize) -> f64 {
    g.nodes
        .iter()
        .map(|n| match &n.op {
            Op::FullyConnected(_) | Op::FcRelu(_) => m as f64 * n.fc_flops_per_sample(),
            Op::BatchMatMul(s) => 2.0 * (m * s.p * s.q * s.r) as f64,
            _ => 0.0,
        })
        .sum()
}

/// Share of FC flops that `scheme` leaves unquantized.
pub fn skipped_flops_ratio(g: &ModelGraph, scheme: &QuantScheme) -> f64 {
    let fused = fuse_fc_relu(g);
    let skipped = scheme.skipped_layers(&fused);
    let mut total = 0.0;
    let mut skip = 0.0;
    for n in fused.nodes.iter().filter(|n| n.is_fc()) {
        let f = n.fc_flops_per_sample();
        total += f;
        if skipped.contains(&n.name) {
            skip += f;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        skip / total
    }
}
