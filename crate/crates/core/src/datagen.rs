//! Seeded synthetic recommendation models, teacher-labeled datasets, fault
//! injection and drifting snapshot sequences.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_jsonl, save_jsonl, Batch, LabeledSample};
use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{self, oracle, Blob, FcAttrs, IoSpec, ModelGraph, Node, Op};
use crate::kernels::BmmShape;
use crate::par::Exec;
use crate::perfmodel::BatchSizeDist;
use crate::rng::{stream, Rng};
use crate::tensor::{Matrix, SparseIds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interaction {
    Concat,
    /// Pairwise dot products of the bottom output and pooled embeddings,
    /// concatenated with the bottom output.
    Dot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Fault {
    /// `count` weights of magnitude `magnitude` in one input row of `layer`.
    /// The producer channel feeding that row is made inactive, so the
    /// outliers never move the fp32 output but dominate any linear grid.
    OutlierWeights { layer: String, magnitude: f32, count: usize },
    /// Input rows of `layer` scaled by factors spread log-uniformly over
    /// `[1, sigma_mult]`, with the producer's channels scaled down to match.
    /// The fp32 function is unchanged; the dynamic range is not.
    WideDynamicRange { layer: String, sigma_mult: f32 },
}

impl Fault {
    pub fn layer(&self) -> &str {
        match self {
            Fault::OutlierWeights { layer, .. } | Fault::WideDynamicRange { layer, .. } => layer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelGenConfig {
    pub name: String,
    pub dense_dim: usize,
    pub table_rows: Vec<usize>,
    pub embedding_dim: usize,
    pub bottom: Vec<usize>,
    pub top: Vec<usize>,
    pub interaction: Interaction,
    /// Weight std of a layer with fan-in n is `init_gain / sqrt(n)`.
    pub init_gain: f32,
    pub embedding_std: f32,
    /// Target mean and std of the logit over probe data.
    pub logit_mean: f32,
    pub logit_std: f32,
    pub faults: Vec<Fault>,
    pub seed: u64,
}

impl Default for ModelGenConfig {
    fn default() -> Self {
        ModelGenConfig {
            name: "synthetic-dlrm".into(),
            dense_dim: 16,
            table_rows: vec![200, 500, 1000, 2000, 5000, 10000, 20000, 40000],
            embedding_dim: 32,
            bottom: vec![64, 32],
            top: vec![512, 256, 1],
            interaction: Interaction::Concat,
            init_gain: std::f32::consts::SQRT_2,
            embedding_std: 0.5,
            logit_mean: -1.0,
            logit_std: 1.0,
            faults: Vec::new(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataGenConfig {
    pub n: usize,
    pub zipf_s: f64,
    /// Ids per slot, drawn uniformly from this inclusive range.
    pub pooling: (usize, usize),
    /// Added to every dense feature.
    pub dense_shift: f32,
    pub dense_std: f32,
    pub batch_sizes: BatchSizeDist,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        DataGenConfig {
            n: 10_000,
            zipf_s: 1.2,
            pooling: (1, 4),
            dense_shift: 0.0,
            dense_std: 1.0,
            batch_sizes: BatchSizeDist::serving_mix(),
            seed: 0,
        }
    }
}

pub const DENSE_INPUT: &str = "dense";
pub const OUTPUT: &str = "prob";
const PROBE_SAMPLES: usize = 1024;

pub fn bottom_name(i: usize) -> String {
    format!("bot{i}")
}

pub fn top_name(i: usize) -> String {
    format!("top{i}")
}

/// Standard normal truncated to [-4, 4].
fn normal(rng: &mut Rng) -> f32 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 4.0 {
            return z as f32;
        }
    }
}

struct Builder {
    nodes: Vec<Node>,
    weights: BTreeMap<String, Blob>,
}

impl Builder {
    fn fc(&mut self, rng: &mut Rng, name: &str, input: &str, n: usize, k: usize, gain: f32, relu: bool) -> String {
        let std = gain / (n as f32).sqrt();
        let w: Vec<f32> = (0..n * k).map(|_| std * normal(rng)).collect();
        let b: Vec<f32> = (0..k).map(|_| 0.01 * normal(rng)).collect();
        let (wn, bn) = (format!("{name}/w"), format!("{name}/b"));
        self.weights.insert(wn.clone(), Blob::F32(w));
        self.weights.insert(bn.clone(), Blob::F32(b));
        let attrs = FcAttrs {
            weight: wn,
            bias: bn,
            in_dim: n,
            out_dim: k,
            quant: None,
        };
        let y = format!("{name}/y");
        self.nodes.push(Node::new(name, Op::FullyConnected(attrs), &[input], &y));
        if relu {
            let a = format!("{name}/act");
            self.nodes.push(Node::new(&format!("{name}/relu"), Op::Relu, &[&y], &a));
            a
        } else {
            y
        }
    }
}

fn check_config(cfg: &ModelGenConfig) -> Result<()> {
    let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
    if cfg.dense_dim == 0 || cfg.embedding_dim == 0 || cfg.bottom.is_empty() {
        return bad("dense_dim, embedding_dim and bottom widths must be nonzero");
    }
    if cfg.top.last() != Some(&1) {
        return bad("the top MLP must end in width 1");
    }
    if cfg.bottom.iter().chain(&cfg.top).any(|&w| w == 0) || cfg.table_rows.contains(&0) {
        return bad("widths and table sizes must be positive");
    }
    if cfg.interaction == Interaction::Dot && cfg.bottom.last() != Some(&cfg.embedding_dim) {
        return bad("dot interaction needs the bottom output width to equal the embedding dim");
    }
    Ok(())
}

/// Build the seeded fp32 model described by `cfg`.
pub fn gen_model(cfg: &ModelGenConfig) -> Result<ModelGraph> {
    check_config(cfg)?;
    let mut rng = stream(cfg.seed, "model/weights");
    let mut b = Builder {
        nodes: Vec::new(),
        weights: BTreeMap::new(),
    };
    let mut x = DENSE_INPUT.to_string();
    let mut width = cfg.dense_dim;
    for (i, &k) in cfg.bottom.iter().enumerate() {
        x = b.fc(&mut rng, &bottom_name(i), &x, width, k, cfg.init_gain, true);
        width = k;
    }
    let mut tables = BTreeMap::new();
    let mut sparse_inputs = Vec::new();
    let mut pooled = Vec::new();
    let mut trng = stream(cfg.seed, "model/tables");
    for (t, &rows) in cfg.table_rows.iter().enumerate() {
        let name = format!("emb{t}");
        let values: Vec<f32> = (0..rows * cfg.embedding_dim)
            .map(|_| cfg.embedding_std * normal(&mut trng))
            .collect();
        tables.insert(name.clone(), EmbeddingTable::from_f32(rows, cfg.embedding_dim, &values)?);
        let ids = format!("ids{t}");
        let out = format!("{name}/pooled");
        b.nodes.push(Node::new(
            &format!("sls{t}"),
            Op::SparseLengthsSum { table: name },
            &[&ids],
            &out,
        ));
        sparse_inputs.push(ids);
        pooled.push(out);
    }
    let mut parts = vec![x.clone()];
    parts.extend(pooled);
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    let features = parts.len();
    let (inter, inter_dim) = match cfg.interaction {
        Interaction::Concat => {
            b.nodes.push(Node::new("interact", Op::Concat, &refs, "interact/out"));
            ("interact/out".to_string(), width + cfg.table_rows.len() * cfg.embedding_dim)
        }
        Interaction::Dot => {
            b.nodes.push(Node::new("interact/stack", Op::Concat, &refs, "interact/z"));
            let shape = BmmShape {
                p: features,
                q: cfg.embedding_dim,
                r: features,
                transpose_b: true,
            };
            b.nodes.push(Node::new(
                "interact/dot",
                Op::BatchMatMul(shape),
                &["interact/z", "interact/z"],
                "interact/dots",
            ));
            b.nodes.push(Node::new("interact", Op::Concat, &[&x, "interact/dots"], "interact/out"));
            ("interact/out".to_string(), width + features * features)
        }
    };
    let mut x = inter;
    let mut width = inter_dim;
    for (i, &k) in cfg.top.iter().enumerate() {
        let last = i + 1 == cfg.top.len();
        let gain = if last { 1.0 } else { cfg.init_gain };
        x = b.fc(&mut rng, &top_name(i), &x, width, k, gain, !last);
        width = k;
    }
    b.nodes.push(Node::new("predict", Op::Sigmoid { lut: None }, &[&x], OUTPUT));
    let mut g = ModelGraph {
        name: cfg.name.clone(),
        io: IoSpec {
            dense_input: DENSE_INPUT.into(),
            dense_dim: cfg.dense_dim,
            sparse_inputs,
            output: OUTPUT.into(),
        },
        nodes: b.nodes,
        weights: b.weights,
        tables,
    };
    for (i, f) in cfg.faults.iter().enumerate() {
        apply_fault(&mut g, f, &mut stream(cfg.seed, &format!("model/fault/{i}")))?;
    }
    calibrate_head(&mut g, cfg)?;
    let violations = graph::validate(&g);
    if let Some(v) = violations.first() {
        return Err(Error::InvalidGraph(format!("generated model: {}", v.message)));
    }
    Ok(g)
}

fn f32_weights<'a>(g: &'a mut ModelGraph, name: &str) -> Result<&'a mut Vec<f32>> {
    match g.weights.get_mut(name) {
        Some(Blob::F32(v)) => Ok(v),
        _ => Err(Error::MissingBlob(name.to_string())),
    }
}

/// The FC producing the input of FC `layer` through a single Relu.
fn relu_producer(g: &ModelGraph, layer: &str) -> Result<(FcAttrs, FcAttrs)> {
    let node = g
        .node(layer)
        .filter(|n| n.is_fc())
        .ok_or_else(|| Error::Config(format!("fault names unknown FC `{layer}`")))?;
    let attrs = node.op.fc().cloned().unwrap();
    let producer = g
        .producer(&node.inputs[0])
        .map(|i| &g.nodes[i])
        .filter(|n| matches!(n.op, Op::Relu))
        .and_then(|r| g.producer(&r.inputs[0]))
        .map(|i| &g.nodes[i])
        .and_then(|n| n.op.fc().cloned())
        .ok_or_else(|| Error::Config(format!("fault layer `{layer}` must consume an FC+Relu output")))?;
    Ok((attrs, producer))
}

fn apply_fault(g: &mut ModelGraph, fault: &Fault, rng: &mut Rng) -> Result<()> {
    let (attrs, prod) = relu_producer(g, fault.layer())?;
    let (n, k) = (attrs.in_dim, attrs.out_dim);
    match fault {
        Fault::OutlierWeights { magnitude, count, .. } => {
            if *count == 0 || *count > k || !(*magnitude > 0.0) {
                return Err(Error::Config("outlier fault needs 1 <= count <= out_dim and magnitude > 0".into()));
            }
            let row = rng.random_range(0..n);
            let pw = f32_weights(g, &prod.weight)?;
            for r in 0..prod.in_dim {
                pw[r * prod.out_dim + row] = 0.0;
            }
            f32_weights(g, &prod.bias)?[row] = -1.0;
            let w = f32_weights(g, &attrs.weight)?;
            for c in 0..*count {
                let col = c * k / count;
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                w[row * k + col] = sign * magnitude;
            }
        }
        Fault::WideDynamicRange { sigma_mult, .. } => {
            if !(*sigma_mult >= 1.0) {
                return Err(Error::Config("sigma_mult must be >= 1".into()));
            }
            let factors: Vec<f32> = (0..n)
                .map(|_| sigma_mult.powf(rng.random::<f32>()))
                .collect();
            let w = f32_weights(g, &attrs.weight)?;
            for (r, f) in factors.iter().enumerate() {
                w[r * k..(r + 1) * k].iter_mut().for_each(|v| *v *= f);
            }
            let pw = f32_weights(g, &prod.weight)?;
            for r in 0..prod.in_dim {
                for (c, f) in factors.iter().enumerate() {
                    pw[r * prod.out_dim + c] /= f;
                }
            }
            let pb = f32_weights(g, &prod.bias)?;
            for (c, f) in factors.iter().enumerate() {
                pb[c] /= f;
            }
        }
    }
    Ok(())
}

/// Rescale the last FC so the logit has the configured mean and std on a
/// probe sample drawn from the default feature distribution.
fn calibrate_head(g: &mut ModelGraph, cfg: &ModelGenConfig) -> Result<()> {
    let last = g.last_fc().and_then(|n| n.op.fc().cloned()).unwrap();
    let logit = g.last_fc().unwrap().output.clone();
    let mut probe_graph = g.clone();
    probe_graph.io.output = logit;
    let probe_cfg = DataGenConfig {
        n: PROBE_SAMPLES,
        seed: cfg.seed,
        ..DataGenConfig::default()
    };
    let feats = gen_features(g, &probe_cfg, "model/probe")?;
    let z = oracle::run_f64(&probe_graph, &feats)?;
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / z.len() as f64;
    let a = if var > 0.0 { cfg.logit_std as f64 / var.sqrt() } else { 1.0 };
    for v in f32_weights(g, &last.weight)?.iter_mut() {
        *v = (*v as f64 * a) as f32;
    }
    for v in f32_weights(g, &last.bias)?.iter_mut() {
        *v = ((*v as f64 - mean) * a + cfg.logit_mean as f64) as f32;
    }
    Ok(())
}

fn table_rows(g: &ModelGraph) -> Result<Vec<usize>> {
    g.slot_tables()?
        .iter()
        .map(|t| g.table(t).map(|t| t.rows))
        .collect()
}

fn gen_features(g: &ModelGraph, cfg: &DataGenConfig, tag: &str) -> Result<Batch> {
    let rows = table_rows(g)?;
    let zipfs = rows
        .iter()
        .map(|&r| Zipf::new(r as f64, cfg.zipf_s).map_err(|e| Error::Config(format!("zipf: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = cfg.pooling;
    if lo > hi {
        return Err(Error::Config("pooling range is empty".into()));
    }
    let d = g.io.dense_dim;
    let mut rng = stream(cfg.seed, &format!("{tag}/dense"));
    let dense: Vec<f32> = (0..cfg.n * d)
        .map(|_| cfg.dense_std * normal(&mut rng) + cfg.dense_shift)
        .collect();
    let mut sparse = Vec::with_capacity(rows.len());
    for (t, z) in zipfs.iter().enumerate() {
        let mut rng = stream(cfg.seed, &format!("{tag}/slot{t}"));
        let mut ids = SparseIds::default();
        for _ in 0..cfg.n {
            let len = rng.random_range(lo..=hi);
            ids.lengths.push(len as u32);
            for _ in 0..len {
                ids.ids.push(z.sample(&mut rng) as u32 - 1);
            }
        }
        sparse.push(ids);
    }
    Ok(Batch {
        dense: Matrix::new(cfg.n, d, dense)?,
        sparse,
    })
}

/// Features drawn per `cfg`, labels drawn from the teacher's fp64
/// prediction, unit weights.
pub fn gen_dataset(teacher: &ModelGraph, cfg: &DataGenConfig, exec: Exec) -> Result<Vec<LabeledSample>> {
    let batch = gen_features(teacher, cfg, "data")?;
    let d = teacher.io.dense_dim;
    let mut samples: Vec<LabeledSample> = (0..cfg.n)
        .map(|i| LabeledSample {
            dense: batch.dense.data[i * d..(i + 1) * d].to_vec(),
            sparse: Vec::new(),
            label: 0,
            weight: 1.0,
        })
        .collect();
    for slot in &batch.sparse {
        for (s, ids) in samples.iter_mut().zip(slot.iter()) {
            s.sparse.push(ids.to_vec());
        }
    }
    let probs = teacher_predictions(teacher, &samples, exec)?;
    let mut rng = stream(cfg.seed, "data/labels");
    for (s, p) in samples.iter_mut().zip(probs) {
        s.label = (rng.random::<f64>() < p) as u8;
    }
    Ok(samples)
}

/// fp64 teacher predictions, evaluated in fixed chunks.
pub fn teacher_predictions(teacher: &ModelGraph, samples: &[LabeledSample], exec: Exec) -> Result<Vec<f64>> {
    let parts = exec.map_chunks(samples, graph::exec::EVAL_BATCH, |_, c| {
        crate::dataset::to_batch(c).and_then(|b| oracle::run_f64(teacher, &b))
    });
    let mut out = Vec::with_capacity(samples.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Request batch sizes drawn from `cfg.batch_sizes`.
pub fn gen_batch_sizes(cfg: &DataGenConfig, count: usize) -> Vec<usize> {
    let mut rng = stream(cfg.seed, "data/batch-sizes");
    (0..count)
        .map(|_| cfg.batch_sizes.sample(rng.random::<f64>()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Drift {
    None,
    /// Every FC weight takes a Gaussian step of `sigma_step` times the
    /// blob's RMS per snapshot.
    WeightWalk { sigma_step: f32 },
    /// Dense inputs shift by `delta` per snapshot.
    ActivationShift { delta: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SnapshotConfig {
    pub model: ModelGenConfig,
    pub data: DataGenConfig,
    pub count: usize,
    pub calib_samples: usize,
    pub eval_samples: usize,
    pub drift: Drift,
}

impl Default for SnapshotConfig {
    fn default() -> Self {
        SnapshotConfig {
            model: ModelGenConfig::default(),
            data: DataGenConfig::default(),
            count: 5,
            calib_samples: 1000,
            eval_samples: 4000,
            drift: Drift::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotMeta {
    pub id: String,
    pub index: usize,
    /// Logical publication time (snapshot index), so replays are exact.
    pub timestamp: u64,
    pub drift: Drift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub meta: SnapshotMeta,
    pub model: ModelGraph,
    pub calib: Vec<LabeledSample>,
    pub eval: Vec<LabeledSample>,
}

fn walk_step(g: &mut ModelGraph, sigma: f32, seed: u64, step: usize) {
    let fc_weights: Vec<String> = g
        .nodes
        .iter()
        .filter_map(|n| n.op.fc().map(|a| a.weight.clone()))
        .collect();
    for name in fc_weights {
        if let Some(Blob::F32(w)) = g.weights.get_mut(&name) {
            let rms = (w.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / w.len() as f64).sqrt() as f32;
            let mut rng = stream(seed, &format!("snapshots/walk/{step}/{name}"));
            for v in w.iter_mut() {
                *v += sigma * rms * normal(&mut rng);
            }
        }
    }
}

/// Snapshot k is the base model with k steps of cumulative drift; each
/// snapshot carries calibration and evaluation data labeled by itself.
pub fn gen_snapshots(cfg: &SnapshotConfig, exec: Exec) -> Result<Vec<Snapshot>> {
    let base = gen_model(&cfg.model)?;
    let mut model = base;
    let mut out = Vec::with_capacity(cfg.count);
    for k in 0..cfg.count {
        if k > 0 {
            if let Drift::WeightWalk { sigma_step } = cfg.drift {
                walk_step(&mut model, sigma_step, cfg.model.seed, k);
            }
        }
        let shift = match cfg.drift {
            Drift::ActivationShift { delta } => delta * k as f32,
            _ => 0.0,
        };
        let data_cfg = |n: usize, tag: &str| DataGenConfig {
            n,
            dense_shift: cfg.data.dense_shift + shift,
            seed: crate::rng::derive_seed(cfg.data.seed, tag),
            ..cfg.data.clone()
        };
        let calib = gen_dataset(&model, &data_cfg(cfg.calib_samples, "snapshots/calib"), exec)?;
        let eval = gen_dataset(&model, &data_cfg(cfg.eval_samples, "snapshots/eval"), exec)?;
        out.push(Snapshot {
            meta: SnapshotMeta {
                id: format!("snap-{k:03}"),
                index: k,
                timestamp: k as u64,
                drift: cfg.drift,
            },
            model: model.clone(),
            calib,
            eval,
        });
    }
    Ok(out)
}

pub const SNAPSHOT_META: &str = "snapshot.json";
pub const SNAPSHOT_MODEL: &str = "model";
pub const SNAPSHOT_CALIB: &str = "calib.jsonl";
pub const SNAPSHOT_EVAL: &str = "eval.jsonl";

pub fn write_snapshots(snaps: &[Snapshot], dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for s in snaps {
        let d = dir.join(&s.meta.id);
        graph::io::save(&s.model, &d.join(SNAPSHOT_MODEL))?;
        save_jsonl(&s.calib, &d.join(SNAPSHOT_CALIB))?;
        save_jsonl(&s.eval, &d.join(SNAPSHOT_EVAL))?;
        let mp = d.join(SNAPSHOT_META);
        let text = serde_json::to_string_pretty(&s.meta)?;
        std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        paths.push(d);
    }
    Ok(paths)
}

pub fn read_snapshot(dir: &Path) -> Result<Snapshot> {
    let mp = dir.join(SNAPSHOT_META);
    let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let meta: SnapshotMeta = serde_json::from_str(&text)?;
    let read_opt = |name: &str| -> Result<Vec<LabeledSample>> {
        let p = dir.join(name);
        if p.exists() {
            load_jsonl(&p)
        } else {
            Ok(Vec::new())
        }
    };
    Ok(Snapshot {
        meta,
        model: graph::io::load(&dir.join(SNAPSHOT_MODEL))?,
        calib: read_opt(SNAPSHOT_CALIB)?,
        eval: read_opt(SNAPSHOT_EVAL)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelGenConfig {
        ModelGenConfig {
            table_rows: vec![50, 100],
            top: vec![16, 1],
            seed: 3,
            ..ModelGenConfig::default()
        }
    }

    #[test]
    fn deterministic_and_valid() {
        let a = gen_model(&small()).unwrap();
        let b = gen_model(&small()).unwrap();
        assert_eq!(graph::io::to_bytes(&a).unwrap(), graph::io::to_bytes(&b).unwrap());
        assert!(graph::validate(&a).is_empty());
        let dot = gen_model(&ModelGenConfig {
            interaction: Interaction::Dot,
            ..small()
        })
        .unwrap();
        assert!(graph::validate(&dot).is_empty());
    }

    #[test]
    fn rejects_inconsistent_widths() {
        let cfg = ModelGenConfig {
            interaction: Interaction::Dot,
            bottom: vec![64, 16],
            ..small()
        };
        assert!(matches!(gen_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_is_seeded() {
        let g = gen_model(&small()).unwrap();
        let cfg = DataGenConfig { n: 300, seed: 9, ..DataGenConfig::default() };
        let a = gen_dataset(&g, &cfg, Exec::Parallel).unwrap();
        let b = gen_dataset(&g, &cfg, Exec::Sequential).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|s| s.sparse[1].iter().all(|&id| id < 100)));
    }
}
