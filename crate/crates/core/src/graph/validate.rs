//! Structural checks on a [`ModelGraph`], reported rather than raised.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{Blob, ModelGraph, Op, Precision};
use crate::quant::QuantParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    DuplicateName,
    UndefinedTensor,
    Cycle,
    Order,
    Shape,
    MissingBlob,
    MissingTable,
    PrecisionBoundary,
    ParamMismatch,
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub node: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ty {
    F32(usize),
    Q8(usize, Option<QuantParams>),
    Ids,
}

struct Report(Vec<Violation>);

impl Report {
    fn push(&mut self, kind: ViolationKind, node: Option<&str>, message: String) {
        self.0.push(Violation {
            kind,
            node: node.map(str::to_string),
            message,
        });
    }
}

fn find_cycle(g: &ModelGraph) -> Option<Vec<String>> {
    let producer: HashMap<&str, usize> = g
        .nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.output.as_str(), i))
        .collect();
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; g.nodes.len()];
    fn dfs(
        g: &ModelGraph,
        producer: &HashMap<&str, usize>,
        state: &mut [u8],
        stack: &mut Vec<usize>,
        v: usize,
    ) -> Option<Vec<String>> {
        state[v] = 1;
        stack.push(v);
        for t in &g.nodes[v].inputs {
            if let Some(&u) = producer.get(t.as_str()) {
                if state[u] == 1 {
                    let start = stack.iter().position(|&x| x == u).unwrap_or(0);
                    return Some(stack[start..].iter().map(|&i| g.nodes[i].name.clone()).collect());
                }
                if state[u] == 0 {
                    if let Some(c) = dfs(g, producer, state, stack, u) {
                        return Some(c);
                    }
                }
            }
        }
        stack.pop();
        state[v] = 2;
        None
    }
    for v in 0..g.nodes.len() {
        if state[v] == 0 {
            let mut stack = Vec::new();
            if let Some(c) = dfs(g, &producer, &mut state, &mut stack, v) {
                return Some(c);
            }
        }
    }
    None
}

/// All violations found in `g`; empty for a well-formed graph.
pub fn validate(g: &ModelGraph) -> Vec<Violation> {
    let mut r = Report(Vec::new());

    let mut names = HashSet::new();
    let mut outputs = HashSet::new();
    for n in &g.nodes {
        if !names.insert(n.name.as_str()) {
            r.push(ViolationKind::DuplicateName, Some(&n.name), "duplicate node name".into());
        }
        if !outputs.insert(n.output.as_str()) {
            r.push(
                ViolationKind::DuplicateName,
                Some(&n.name),
                format!("tensor `{}` produced twice", n.output),
            );
        }
    }

    if let Some(cycle) = find_cycle(g) {
        r.push(
            ViolationKind::Cycle,
            cycle.first().map(String::as_str),
            format!("cycle through {}", cycle.join(" -> ")),
        );
    }

    let mut env: HashMap<String, Ty> = HashMap::new();
    env.insert(g.io.dense_input.clone(), Ty::F32(g.io.dense_dim));
    for s in &g.io.sparse_inputs {
        env.insert(s.clone(), Ty::Ids);
    }

    for n in &g.nodes {
        let name = Some(n.name.as_str());
        let mut ins = Vec::new();
        for t in &n.inputs {
            match env.get(t) {
                Some(ty) => ins.push(*ty),
                None if outputs.contains(t.as_str()) => {
                    r.push(
                        ViolationKind::Order,
                        name,
                        format!("input `{t}` is produced later in the node list"),
                    );
                }
                None => r.push(
                    ViolationKind::UndefinedTensor,
                    name,
                    format!("input `{t}` is never produced"),
                ),
            }
        }
        if ins.len() != n.inputs.len() {
            continue;
        }
        let shape = |r: &mut Report, msg: String| r.push(ViolationKind::Shape, name, msg);
        let out: Option<Ty> = match &n.op {
            Op::FullyConnected(a) | Op::FcRelu(a) => {
                let mut ok = true;
                match (ins.first(), n.precision) {
                    (Some(Ty::Q8(c, _)), Precision::Int8) | (Some(Ty::F32(c)), _)
                        if *c != a.in_dim =>
                    {
                        shape(&mut r, format!("input has {c} columns, FC expects {}", a.in_dim));
                    }
                    (Some(Ty::Q8(..)), p) if p != Precision::Int8 => {
                        r.push(
                            ViolationKind::PrecisionBoundary,
                            name,
                            "FC fed an int8 tensor without a Dequantize".into(),
                        );
                        ok = false;
                    }
                    (Some(Ty::F32(_)), Precision::Int8) => {
                        r.push(
                            ViolationKind::PrecisionBoundary,
                            name,
                            "int8 FC fed an fp32 tensor without a Quantize".into(),
                        );
                        ok = false;
                    }
                    (Some(Ty::Ids), _) | (None, _) => {
                        shape(&mut r, "FC needs one dense input".into());
                        ok = false;
                    }
                    _ => {}
                }
                let expect = match n.precision {
                    Precision::Fp32 => "f32",
                    Precision::Fp16Storage | Precision::Fp16Compute { .. } => "f16",
                    Precision::Int8 => "i8",
                };
                match g.weights.get(&a.weight) {
                    None => r.push(ViolationKind::MissingBlob, name, format!("weight `{}`", a.weight)),
                    Some(b) if b.dtype() != expect => r.push(
                        ViolationKind::PrecisionBoundary,
                        name,
                        format!("{:?} node with {} weights", n.precision, b.dtype()),
                    ),
                    Some(b) if b.len() != a.in_dim * a.out_dim => {
                        shape(&mut r, format!("weight has {} elements", b.len()))
                    }
                    _ => {}
                }
                match g.weights.get(&a.bias) {
                    Some(Blob::F32(b)) if b.len() == a.out_dim => {}
                    Some(_) => shape(&mut r, format!("bias `{}` must be f32 of length {}", a.bias, a.out_dim)),
                    None => r.push(ViolationKind::MissingBlob, name, format!("bias `{}`", a.bias)),
                }
                if n.precision == Precision::Int8 {
                    match &a.quant {
                        None => r.push(
                            ViolationKind::PrecisionBoundary,
                            name,
                            "int8 FC without quantization data".into(),
                        ),
                        Some(q) => {
                            if q.weight_params.len() != 1 && q.weight_params.len() != a.out_dim {
                                shape(&mut r, "weight params neither per-tensor nor per-channel".into());
                            }
                            match g.weights.get(&q.col_offsets) {
                                Some(Blob::I32(v)) if v.len() == a.out_dim => {}
                                _ => r.push(
                                    ViolationKind::MissingBlob,
                                    name,
                                    format!("column offsets `{}`", q.col_offsets),
                                ),
                            }
                        }
                    }
                }
                if !ok {
                    None
                } else if n.precision == Precision::Int8 {
                    match a.quant.as_ref().and_then(|q| q.output) {
                        Some(p) => Some(Ty::Q8(a.out_dim, Some(p))),
                        None => Some(Ty::F32(a.out_dim)),
                    }
                } else {
                    Some(Ty::F32(a.out_dim))
                }
            }
            Op::Relu | Op::Sigmoid { .. } | Op::Swish { .. } => match ins[..] {
                [Ty::F32(c)] => Some(Ty::F32(c)),
                [Ty::Q8(..)] => {
                    r.push(
                        ViolationKind::PrecisionBoundary,
                        name,
                        "elementwise op fed an int8 tensor".into(),
                    );
                    None
                }
                _ => {
                    shape(&mut r, "expects one dense input".into());
                    None
                }
            },
            Op::Concat => {
                let mut cols = 0;
                let mut ok = !ins.is_empty();
                for t in &ins {
                    match t {
                        Ty::F32(c) => cols += c,
                        Ty::Q8(..) => {
                            r.push(
                                ViolationKind::PrecisionBoundary,
                                name,
                                "interaction fed an int8 tensor".into(),
                            );
                            ok = false;
                        }
                        Ty::Ids => {
                            shape(&mut r, "concat of id lists".into());
                            ok = false;
                        }
                    }
                }
                ok.then_some(Ty::F32(cols))
            }
            Op::SparseLengthsSum { table } => {
                if ins[..] != [Ty::Ids] {
                    shape(&mut r, "lookup expects one id-list input".into());
                }
                match g.tables.get(table) {
                    Some(t) => {
                        if t.check_layout().is_err() {
                            shape(&mut r, format!("table `{table}` storage size is inconsistent"));
                        }
                        Some(Ty::F32(t.dim))
                    }
                    None => {
                        r.push(ViolationKind::MissingTable, name, format!("table `{table}`"));
                        None
                    }
                }
            }
            Op::BatchMatMul(s) => match ins[..] {
                [Ty::F32(a), Ty::F32(c)] => {
                    if a != s.p * s.q || c != s.q * s.r {
                        shape(&mut r, format!("operands {a} and {c} do not match {s:?}"));
                    }
                    Some(Ty::F32(s.p * s.r))
                }
                _ => {
                    r.push(
                        ViolationKind::PrecisionBoundary,
                        name,
                        "batch matmul needs two fp32 operands".into(),
                    );
                    None
                }
            },
            Op::Quantize(q) => match ins[..] {
                [Ty::F32(c)] | [Ty::Q8(c, _)] => {
                    Some(Ty::Q8(c, (!q.dynamic).then_some(q.params)))
                }
                _ => {
                    shape(&mut r, "quantize expects a dense input".into());
                    None
                }
            },
            Op::Dequantize(d) => match ins[..] {
                [Ty::Q8(c, p)] => {
                    if let Some(p) = p {
                        if !p.same_as(&d.params) {
                            r.push(
                                ViolationKind::ParamMismatch,
                                name,
                                "dequantize params differ from the producer's".into(),
                            );
                        }
                    }
                    Some(Ty::F32(c))
                }
                _ => {
                    r.push(
                        ViolationKind::PrecisionBoundary,
                        name,
                        "dequantize fed a non-int8 tensor".into(),
                    );
                    None
                }
            },
        };
        if let Some(t) = out {
            env.insert(n.output.clone(), t);
        }
    }

    match env.get(&g.io.output) {
        Some(Ty::F32(1)) => {}
        Some(t) => r.push(
            ViolationKind::Output,
            None,
            format!("output `{}` must be fp32 with one column, found {t:?}", g.io.output),
        ),
        None => r.push(
            ViolationKind::Output,
            None,
            format!("output `{}` is never produced", g.io.output),
        ),
    }
    match g.producer(&g.io.output).map(|i| &g.nodes[i].op) {
        Some(Op::Sigmoid { .. }) | None => {}
        Some(_) => r.push(
            ViolationKind::Output,
            None,
            "the output must come from a final Sigmoid".into(),
        ),
    }
    r.0
}
