//! Operator-level model IR.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingTable;
use crate::error::{Error, Result};
use crate::kernels::{AccumMode, BmmShape, LutSpec};
use crate::numerics::Half;
use crate::quant::{IntRange, QuantParams};

pub mod exec;
pub mod io;
pub mod oracle;
pub mod transform;
pub mod validate;

pub use exec::{predict, run, Backend, BackendConfig, Observer, ReferenceBackend};
pub use validate::{validate, Violation, ViolationKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Precision {
    Fp32,
    /// Weights stored as binary16, arithmetic in fp32.
    Fp16Storage,
    /// Inputs and products rounded to binary16.
    Fp16Compute { accum: AccumMode },
    Int8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcAttrs {
    pub weight: String,
    pub bias: String,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<FcQuant>,
}

/// Static data of an int8 FC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcQuant {
    pub weight_params: Vec<QuantParams>,
    /// Blob with per-output-channel sums of the integer weights.
    pub col_offsets: String,
    /// Requantize the output to uint8 with these parameters; `None` returns fp32.
    pub output: Option<QuantParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeAttrs {
    pub params: QuantParams,
    pub range: IntRange,
    /// Derive parameters from each batch's min/max instead of `params`.
    pub dynamic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DequantizeAttrs {
    pub params: QuantParams,
    pub range: IntRange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Op {
    FullyConnected(FcAttrs),
    FcRelu(FcAttrs),
    Relu,
    Sigmoid {
        #[serde(default)]
        lut: Option<LutSpec>,
    },
    Swish {
        #[serde(default)]
        lut: Option<LutSpec>,
    },
    Concat,
    SparseLengthsSum {
        table: String,
    },
    BatchMatMul(BmmShape),
    Quantize(QuantizeAttrs),
    Dequantize(DequantizeAttrs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    FullyConnected,
    FcRelu,
    Relu,
    Sigmoid,
    Swish,
    Concat,
    SparseLengthsSum,
    BatchMatMul,
    Quantize,
    Dequantize,
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::FullyConnected(_) => OpKind::FullyConnected,
            Op::FcRelu(_) => OpKind::FcRelu,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Swish { .. } => OpKind::Swish,
            Op::Concat => OpKind::Concat,
            Op::SparseLengthsSum { .. } => OpKind::SparseLengthsSum,
            Op::BatchMatMul(_) => OpKind::BatchMatMul,
            Op::Quantize(_) => OpKind::Quantize,
            Op::Dequantize(_) => OpKind::Dequantize,
        }
    }

    pub fn fc(&self) -> Option<&FcAttrs> {
        match self {
            Op::FullyConnected(a) | Op::FcRelu(a) => Some(a),
            _ => None,
        }
    }

    pub fn fc_mut(&mut self) -> Option<&mut FcAttrs> {
        match self {
            Op::FullyConnected(a) | Op::FcRelu(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    pub inputs: Vec<String>,
    pub output: String,
    pub precision: Precision,
}

impl Node {
    pub fn new(name: &str, op: Op, inputs: &[&str], output: &str) -> Node {
        Node {
            name: name.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output: output.to_string(),
            precision: Precision::Fp32,
        }
    }

    pub fn is_fc(&self) -> bool {
        self.op.fc().is_some()
    }

    /// `2 * batch * n * k` for FC nodes.
    pub fn fc_flops_per_sample(&self) -> f64 {
        self.op
            .fc()
            .map_or(0.0, |a| 2.0 * a.in_dim as f64 * a.out_dim as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoSpec {
    pub dense_input: String,
    pub dense_dim: usize,
    /// One tensor name per sparse slot, in slot order.
    pub sparse_inputs: Vec<String>,
    pub output: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Blob {
    F32(Vec<f32>),
    F16(Vec<Half>),
    I8(Vec<i8>),
    I32(Vec<i32>),
}

impl Blob {
    pub fn dtype(&self) -> &'static str {
        match self {
            Blob::F32(_) => "f32",
            Blob::F16(_) => "f16",
            Blob::I8(_) => "i8",
            Blob::I32(_) => "i32",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Blob::F32(v) => v.len(),
            Blob::F16(v) => v.len(),
            Blob::I8(v) => v.len(),
            Blob::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn byte_len(&self) -> usize {
        self.len()
            * match self {
                Blob::F32(_) | Blob::I32(_) => 4,
                Blob::F16(_) => 2,
                Blob::I8(_) => 1,
            }
    }

    /// Real values (fp16 widened, integers converted).
    pub fn to_f32(&self) -> Vec<f32> {
        match self {
            Blob::F32(v) => v.clone(),
            Blob::F16(v) => v.iter().map(|h| h.to_f32()).collect(),
            Blob::I8(v) => v.iter().map(|&x| x as f32).collect(),
            Blob::I32(v) => v.iter().map(|&x| x as f32).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub name: String,
    pub io: IoSpec,
    /// Topologically ordered.
    pub nodes: Vec<Node>,
    pub weights: BTreeMap<String, Blob>,
    pub tables: BTreeMap<String, EmbeddingTable>,
}

impl ModelGraph {
    pub fn node(&self, name: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.output == tensor)
    }

    pub fn consumers(&self, tensor: &str) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.iter().any(|i| i == tensor))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn blob(&self, name: &str) -> Result<&Blob> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::MissingBlob(name.to_string()))
    }

    pub fn table(&self, name: &str) -> Result<&EmbeddingTable> {
        self.tables
            .get(name)
            .ok_or_else(|| Error::MissingTable(name.to_string()))
    }

    /// Indices of FC and fused FC+Relu nodes, in execution order.
    pub fn fc_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_fc())
            .collect()
    }

    pub fn last_fc(&self) -> Option<&Node> {
        self.nodes.iter().rev().find(|n| n.is_fc())
    }

    /// Table feeding each sparse slot.
    pub fn slot_tables(&self) -> Result<Vec<String>> {
        self.io
            .sparse_inputs
            .iter()
            .map(|input| {
                self.nodes
                    .iter()
                    .find_map(|n| match &n.op {
                        Op::SparseLengthsSum { table } if n.inputs.first() == Some(input) => {
                            Some(table.clone())
                        }
                        _ => None,
                    })
                    .ok_or_else(|| Error::InvalidGraph(format!("slot `{input}` feeds no lookup")))
            })
            .collect()
    }

    /// Total bytes of FC weights as stored.
    pub fn fc_weight_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter_map(|n| n.op.fc())
            .filter_map(|a| self.weights.get(&a.weight))
            .map(Blob::byte_len)
            .sum()
    }

    pub fn table_bytes(&self) -> usize {
        self.tables.values().map(EmbeddingTable::storage_bytes).sum()
    }
}
