//! Numeric debugging: small reproducible bundles, sample ranking, per-op
//! shadow errors with distribution profiles, and bitwise backend comparison.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{dataset_hash, load_jsonl, save_jsonl, to_batch, LabeledSample};
use crate::error::{Error, Result};
use crate::graph::exec::execute;
use crate::graph::transform::fuse_fc_relu;
use crate::graph::{self, run, Backend, Blob, ModelGraph, Node, Observer, ReferenceBackend};
use crate::metrics::{cross_entropy_sample, relative_l2, shadow_execute, squared_parts};
use crate::rng::stream;
use crate::tensor::Value;

pub const DEFAULT_BUNDLE_SIZE: usize = 256;
pub const DEFAULT_TOP_OPS: usize = 10;
pub const DEFAULT_TOP_SAMPLES: usize = 20;
const HIST_BINS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub dataset_sha256: String,
    pub dataset_len: usize,
    pub seed: u64,
    /// Positions of the bundle samples in the source dataset.
    pub sample_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DebugBundle {
    pub samples: Vec<LabeledSample>,
    pub model: ModelGraph,
    /// Per table, the original row id of each row of the shrunken table.
    pub remap: BTreeMap<String, Vec<u32>>,
    pub provenance: Provenance,
}

fn predictions_bitwise_equal(a: &[f32], b: &[f32]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

impl DebugBundle {
    /// Shrink another model with this bundle's remap (for instance the fp32
    /// source of a quantized bundle model) and check it on the bundle samples
    /// drawn from `dataset`.
    pub fn shrink_model(&self, g: &ModelGraph, dataset: &[LabeledSample]) -> Result<ModelGraph> {
        if dataset_hash(dataset) != self.provenance.dataset_sha256 {
            return Err(Error::Data("dataset differs from the bundle's source".into()));
        }
        let picked: Vec<LabeledSample> = self
            .provenance
            .sample_indices
            .iter()
            .map(|&i| dataset[i].clone())
            .collect();
        let shrunk = shrink_tables(g, &self.remap)?;
        verify(g, &picked, &shrunk, &self.samples)?;
        Ok(shrunk)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_jsonl(&self.samples, &dir.join("data.jsonl"))?;
        graph::io::save(&self.model, &dir.join("model"))?;
        let doc = serde_json::json!({ "remap": self.remap, "provenance": self.provenance });
        let p = dir.join("remap.json");
        std::fs::write(&p, serde_json::to_string_pretty(&doc)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<DebugBundle> {
        let p = dir.join("remap.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut doc: serde_json::Value = serde_json::from_str(&text)?;
        Ok(DebugBundle {
            samples: load_jsonl(&dir.join("data.jsonl"))?,
            model: graph::io::load(&dir.join("model"))?,
            remap: serde_json::from_value(doc["remap"].take())?,
            provenance: serde_json::from_value(doc["provenance"].take())?,
        })
    }
}

fn shrink_tables(g: &ModelGraph, remap: &BTreeMap<String, Vec<u32>>) -> Result<ModelGraph> {
    let mut out = g.clone();
    for (name, rows) in remap {
        let t = g.table(name)?;
        if let Some(&bad) = rows.iter().find(|&&r| r as usize >= t.rows) {
            return Err(Error::IndexOutOfRange {
                table: name.clone(),
                id: bad,
                rows: t.rows,
            });
        }
        out.tables.insert(name.clone(), t.select_rows(rows));
    }
    Ok(out)
}

fn verify(g: &ModelGraph, samples: &[LabeledSample], shrunk: &ModelGraph, remapped: &[LabeledSample]) -> Result<()> {
    let b = ReferenceBackend::default();
    let before = run(g, &b, &to_batch(samples)?)?;
    let after = run(shrunk, &b, &to_batch(remapped)?)?;
    if predictions_bitwise_equal(&before, &after) {
        Ok(())
    } else {
        let n = before.iter().zip(&after).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
        Err(Error::BundleMismatch(format!(
            "{n} of {} predictions differ after remapping",
            before.len()
        )))
    }
}

/// Draw `n` samples, shrink every table to the rows they reference (in
/// ascending original id order), remap the ids, and verify that the shrunken
/// pair predicts bitwise-identically to the original pair.
pub fn extract_bundle(g: &ModelGraph, dataset: &[LabeledSample], n: usize, seed: u64) -> Result<DebugBundle> {
    if n == 0 || n > dataset.len() {
        return Err(Error::Config(format!(
            "bundle size {n} must be in 1..={}",
            dataset.len()
        )));
    }
    let mut idx = rand::seq::index::sample(&mut stream(seed, "debug/bundle"), dataset.len(), n).into_vec();
    idx.sort_unstable();
    let picked: Vec<LabeledSample> = idx.iter().map(|&i| dataset[i].clone()).collect();
    let slot_tables = g.slot_tables()?;
    let mut used: BTreeMap<String, BTreeSet<u32>> = BTreeMap::new();
    for s in &picked {
        for (ids, t) in s.sparse.iter().zip(&slot_tables) {
            used.entry(t.clone()).or_default().extend(ids.iter().copied());
        }
    }
    let remap: BTreeMap<String, Vec<u32>> = used
        .into_iter()
        .map(|(t, ids)| (t, ids.into_iter().collect()))
        .collect();
    let lookup: BTreeMap<&str, BTreeMap<u32, u32>> = remap
        .iter()
        .map(|(t, rows)| {
            let m = rows.iter().enumerate().map(|(new, &old)| (old, new as u32)).collect();
            (t.as_str(), m)
        })
        .collect();
    let samples: Vec<LabeledSample> = picked
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for (ids, t) in s.sparse.iter_mut().zip(&slot_tables) {
                for id in ids.iter_mut() {
                    *id = lookup[t.as_str()][id];
                }
            }
            s
        })
        .collect();
    let model = shrink_tables(g, &remap)?;
    verify(g, &picked, &model, &samples)?;
    Ok(DebugBundle {
        samples,
        model,
        remap,
        provenance: Provenance {
            dataset_sha256: dataset_hash(dataset),
            dataset_len: dataset.len(),
            seed,
            sample_indices: idx,
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDelta {
    pub index: usize,
    pub label: u8,
    pub p_lowp: f32,
    pub p_fp32: f32,
    pub ce_lowp: f64,
    pub ce_fp32: f64,
    pub delta: f64,
}

/// Per-sample cross-entropy increase of `lowp` over `fp32`, largest first;
/// equal deltas keep sample order.
pub fn rank_samples(samples: &[LabeledSample], lowp: &ModelGraph, fp32: &ModelGraph) -> Result<Vec<SampleDelta>> {
    let b = ReferenceBackend::default();
    let batch = to_batch(samples)?;
    let pl = run(lowp, &b, &batch)?;
    let pf = run(fp32, &b, &batch)?;
    let mut out: Vec<SampleDelta> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let ce_lowp = cross_entropy_sample(pl[i] as f64, s);
            let ce_fp32 = cross_entropy_sample(pf[i] as f64, s);
            SampleDelta {
                index: i,
                label: s.label,
                p_lowp: pl[i],
                p_fp32: pf[i],
                ce_lowp,
                ce_fp32,
                delta: ce_lowp - ce_fp32,
            }
        })
        .collect();
    out.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub count: usize,
    pub min: f32,
    pub max: f32,
    pub mean: f64,
    pub std: f64,
    pub p1: f32,
    pub p99: f32,
    /// Equal-width counts over `[min, max]`.
    pub histogram: Vec<u64>,
}

impl Stats {
    pub fn of(values: &[f32]) -> Stats {
        if values.is_empty() {
            return Stats {
                count: 0,
                min: 0.0,
                max: 0.0,
                mean: 0.0,
                std: 0.0,
                p1: 0.0,
                p99: 0.0,
                histogram: vec![0; HIST_BINS],
            };
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f32::total_cmp);
        let n = sorted.len();
        let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        let at = |q: f64| sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)];
        let (min, max) = (sorted[0], sorted[n - 1]);
        let mut histogram = vec![0u64; HIST_BINS];
        let width = (max as f64 - min as f64) / HIST_BINS as f64;
        for &v in values {
            let b = if width > 0.0 {
                (((v as f64 - min as f64) / width) as usize).min(HIST_BINS - 1)
            } else {
                0
            };
            histogram[b] += 1;
        }
        Stats {
            count: n,
            min,
            max,
            mean,
            std: var.sqrt(),
            p1: at(0.01),
            p99: at(0.99),
            histogram,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpErrorRecord {
    pub node: String,
    pub op: String,
    pub precision: String,
    pub error: f64,
    pub input: Stats,
    pub output: Stats,
    pub weight: Option<Stats>,
    /// Samples with the largest per-sample relative error at this node.
    pub worst_samples: Vec<(usize, f64)>,
}

fn real_weights(g: &ModelGraph, node: &Node) -> Option<Vec<f32>> {
    let a = node.op.fc()?;
    match g.blob(&a.weight).ok()? {
        Blob::I8(w) => {
            let q = a.quant.as_ref()?;
            let k = a.out_dim;
            Some(
                w.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let p = &q.weight_params[if q.weight_params.len() == 1 { 0 } else { i % k }];
                        p.dequantize_scalar(v as i32)
                    })
                    .collect(),
            )
        }
        other => Some(other.to_f32()),
    }
}

/// Shadow every low-precision node with its fp32 twin on the same inputs
/// and profile the tensors involved. Sorted by error, largest first.
pub fn shadow_run(samples: &[LabeledSample], lowp: &ModelGraph, fp32: &ModelGraph) -> Result<Vec<OpErrorRecord>> {
    let b = ReferenceBackend::default();
    let lowp = &fuse_fc_relu(lowp);
    let reference = fuse_fc_relu(fp32);
    let batch = to_batch(samples)?;
    let mut records = Vec::new();
    shadow_execute(lowp, &b, &reference, &b, &batch, |s| {
        let (d, n) = squared_parts(s.lowp, s.reference);
        let input_values = match s.inputs.first() {
            Some(Value::F32(m)) => m.data.clone(),
            Some(v @ Value::Q8(_)) => v.to_real()?.data,
            _ => Vec::new(),
        };
        let cols = s.lowp.cols;
        let mut per_sample: Vec<(usize, f64)> = (0..s.lowp.rows)
            .map(|r| {
                let (a, b) = (&s.lowp.data[r * cols..(r + 1) * cols], &s.reference.data[r * cols..(r + 1) * cols]);
                let (mut dd, mut nn) = (0.0, 0.0);
                for (&x, &y) in a.iter().zip(b) {
                    dd += (x as f64 - y as f64).powi(2);
                    nn += (y as f64).powi(2);
                }
                (r, relative_l2(dd, nn))
            })
            .collect();
        per_sample.sort_by(|a, b| b.1.total_cmp(&a.1));
        per_sample.truncate(3);
        records.push(OpErrorRecord {
            node: s.node.name.clone(),
            op: format!("{:?}", s.node.op.kind()),
            precision: format!("{:?}", s.node.precision),
            error: relative_l2(d, n),
            input: Stats::of(&input_values),
            output: Stats::of(&s.lowp.data),
            weight: real_weights(lowp, s.node).map(|w| Stats::of(&w)),
            worst_samples: per_sample,
        });
        Ok(())
    })?;
    records.sort_by(|a, b| b.error.total_cmp(&a.error));
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDiff {
    pub node: String,
    /// Elements whose bits differ when both backends see the same operands.
    pub mismatches: usize,
    pub max_abs_diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperandDump {
    pub tensor: String,
    pub head: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub node: String,
    pub element: usize,
    pub value_a: f32,
    pub value_b: f32,
    pub bits_a: String,
    pub bits_b: String,
    pub operands: Vec<OperandDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDiff {
    pub backend_a: String,
    pub backend_b: String,
    pub nodes: Vec<NodeDiff>,
    pub first_divergence: Option<Divergence>,
    pub end_to_end_equal: bool,
}

impl BackendDiff {
    pub fn diverging_nodes(&self) -> usize {
        self.nodes.iter().filter(|n| n.mismatches > 0).count()
    }
}

fn value_bits(v: &Value) -> Result<(Vec<u32>, Vec<f32>)> {
    Ok(match v {
        Value::Ids(ids) => (ids.ids.clone(), ids.ids.iter().map(|&i| i as f32).collect()),
        Value::Q8(q) => (q.data.iter().map(|&c| c as u32).collect(), v.to_real()?.data),
        Value::F32(m) => (m.data.iter().map(|x| x.to_bits()).collect(), m.data.clone()),
    })
}

const DUMP_HEAD: usize = 16;

struct Compare<'a> {
    other: &'a dyn Backend,
    graph: &'a ModelGraph,
    diffs: Vec<NodeDiff>,
    first: Option<Divergence>,
}

impl Observer for Compare<'_> {
    fn on_node(&mut self, _: usize, node: &Node, inputs: &[&Value], output: &Value) -> Result<()> {
        let theirs = self.other.eval(self.graph, node, inputs)?;
        let (ba, va) = value_bits(output)?;
        let (bb, vb) = value_bits(&theirs)?;
        let same_params = match (output, &theirs) {
            (Value::Q8(x), Value::Q8(y)) => x.params.same_as(&y.params),
            _ => true,
        };
        let mut mismatches = usize::from(ba.len() != bb.len() || !same_params);
        let mut max_abs: f64 = 0.0;
        let mut first_el = None;
        for (i, (x, y)) in ba.iter().zip(&bb).enumerate() {
            if x != y {
                mismatches += 1;
                max_abs = max_abs.max((va[i] as f64 - vb[i] as f64).abs());
                first_el.get_or_insert(i);
            }
        }
        if mismatches > 0 && self.first.is_none() {
            let e = first_el.unwrap_or(0);
            let mut operands = Vec::new();
            for (t, v) in node.inputs.iter().zip(inputs) {
                let (_, vals) = value_bits(v)?;
                operands.push(OperandDump {
                    tensor: t.clone(),
                    head: vals.into_iter().take(DUMP_HEAD).collect(),
                });
            }
            let a = va.get(e).copied().unwrap_or(f32::NAN);
            let b = vb.get(e).copied().unwrap_or(f32::NAN);
            self.first = Some(Divergence {
                node: node.name.clone(),
                element: e,
                value_a: a,
                value_b: b,
                bits_a: format!("{:#010x}", ba.get(e).copied().unwrap_or(0)),
                bits_b: format!("{:#010x}", bb.get(e).copied().unwrap_or(0)),
                operands,
            });
        }
        self.diffs.push(NodeDiff {
            node: node.name.clone(),
            mismatches,
            max_abs_diff: max_abs,
        });
        Ok(())
    }
}

/// Run `g` under `a`; at every node also evaluate `b` on `a`'s operands and
/// compare bitwise. The end-to-end outputs of two full runs are compared too.
pub fn compare_backends(
    g: &ModelGraph,
    a: &dyn Backend,
    b: &dyn Backend,
    samples: &[LabeledSample],
) -> Result<BackendDiff> {
    let batch = to_batch(samples)?;
    let mut cmp = Compare {
        other: b,
        graph: g,
        diffs: Vec::new(),
        first: None,
    };
    let out_a = execute(g, a, &batch, Some(&mut cmp))?;
    let out_b = execute(g, b, &batch, None)?;
    Ok(BackendDiff {
        backend_a: a.name().to_string(),
        backend_b: b.name().to_string(),
        nodes: cmp.diffs,
        first_divergence: cmp.first,
        end_to_end_equal: out_a.bitwise_eq(&out_b),
    })
}

/// Multiply the weight scales of the int8 FC `node` by `factor`, leaving the
/// integer codes alone. Used to plant faults for localization tests.
pub fn corrupt_weight_scale(g: &ModelGraph, node: &str, factor: f32) -> Result<ModelGraph> {
    let mut out = g.clone();
    let n = out
        .nodes
        .iter_mut()
        .find(|n| n.name == node)
        .ok_or_else(|| Error::Config(format!("no node `{node}`")))?;
    let q = n
        .op
        .fc_mut()
        .and_then(|a| a.quant.as_mut())
        .ok_or_else(|| Error::Config(format!("node `{node}` is not an int8 FC")))?;
    for p in &mut q.weight_params {
        p.scale *= factor;
    }
    Ok(out)
}

/// Names of the int8 FC nodes of a quantized graph.
pub fn int8_fcs(g: &ModelGraph) -> Vec<String> {
    g.nodes
        .iter()
        .filter(|n| n.op.fc().is_some_and(|a| a.quant.is_some()))
        .map(|n| n.name.clone())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub node: String,
    pub actions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugReport {
    pub top_ops: Vec<OpErrorRecord>,
    pub top_samples: Vec<SampleDelta>,
    pub suggestions: Vec<Suggestion>,
}

/// Escalation steps worth trying for an op with relative error `error`.
pub fn suggest(op: &OpErrorRecord) -> Vec<String> {
    let fc = op.op == "FullyConnected" || op.op == "FcRelu";
    let e = op.error;
    let mut out = Vec::new();
    if e > 0.01 && fc {
        out.push("per-channel-weights".to_string());
    }
    if e > 0.05 && fc {
        out.push("percentile-acts".to_string());
        out.push("l2min-acts".to_string());
    }
    if e > 0.25 {
        out.push("skip".to_string());
    }
    out
}

pub fn report(records: &[OpErrorRecord], samples: &[SampleDelta], top_ops: usize, top_samples: usize) -> DebugReport {
    let top: Vec<OpErrorRecord> = records.iter().take(top_ops).cloned().collect();
    let suggestions = top
        .iter()
        .map(|r| Suggestion {
            node: r.node.clone(),
            actions: suggest(r),
        })
        .filter(|s| !s.actions.is_empty())
        .collect();
    DebugReport {
        top_ops: top,
        top_samples: samples.iter().take(top_samples).cloned().collect(),
        suggestions,
    }
}

impl DebugReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<DebugReport> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("top operators by shadow error\n");
        for r in &self.top_ops {
            let _ = writeln!(
                s,
                "  {:<20} {:<16} {:<12} err {:.3e}  out [{:.4}, {:.4}] mean {:.4} std {:.4}",
                r.node, r.op, r.precision, r.error, r.output.min, r.output.max, r.output.mean, r.output.std
            );
            if let Some(w) = &r.weight {
                let _ = writeln!(
                    s,
                    "  {:<20} weights [{:.4}, {:.4}] p1 {:.4} p99 {:.4}",
                    "", w.min, w.max, w.p1, w.p99
                );
            }
        }
        s.push_str("top samples by cross-entropy increase\n");
        for d in &self.top_samples {
            let _ = writeln!(
                s,
                "  #{:<6} y={} p_lowp {:.5} p_fp32 {:.5} delta {:+.4e}",
                d.index, d.label, d.p_lowp, d.p_fp32, d.delta
            );
        }
        s.push_str("suggested next steps\n");
        for g in &self.suggestions {
            let _ = writeln!(s, "  {}: {}", g.node, g.actions.join(" -> "));
        }
        s
    }
}
