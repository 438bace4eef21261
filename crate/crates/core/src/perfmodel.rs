//! Roofline latency estimates for FC, embedding pooling and batched matmul.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Blob, ModelGraph, Op, Precision};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub name: String,
    /// Peak flops per second.
    pub peak_flops: f64,
    /// Achievable fraction of peak, in (0, 1].
    pub efficiency: f64,
    /// Memory bandwidth in bytes per second.
    pub mem_bandwidth: f64,
}

impl HardwareSpec {
    pub fn broadwell_like() -> HardwareSpec {
        HardwareSpec {
            name: "broadwell-like".into(),
            peak_flops: 1e12,
            efficiency: 0.9,
            mem_bandwidth: 70e9,
        }
    }

    pub fn preset(name: &str) -> Option<HardwareSpec> {
        (name == "broadwell-like").then(HardwareSpec::broadwell_like)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.peak_flops > 0.0
            && self.mem_bandwidth > 0.0
            && self.efficiency > 0.0
            && self.efficiency <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid hardware spec `{}`", self.name)))
        }
    }

    /// A preset name or a JSON document.
    pub fn load(spec: &str) -> Result<HardwareSpec> {
        let hw = match HardwareSpec::preset(spec) {
            Some(hw) => hw,
            None => {
                let path = Path::new(spec);
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))?
            }
        };
        hw.validate()?;
        Ok(hw)
    }

    fn effective_flops(&self) -> f64 {
        self.peak_flops * self.efficiency
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcShape {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub weight_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Bound {
    Memory,
    Compute,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub t_comp: f64,
    pub t_mem: f64,
    pub t: f64,
    pub bound: Bound,
}

impl Latency {
    fn new(t_comp: f64, t_mem: f64, bound: Bound) -> Latency {
        Latency {
            t_comp,
            t_mem,
            t: t_comp.max(t_mem),
            bound,
        }
    }
}

/// Batch size below which an FC with `bytes`-wide weights is memory bound:
/// bytes·F·E / (2B), which is 2FE/B for fp32.
pub fn batch_threshold(hw: &HardwareSpec, bytes: usize) -> f64 {
    bytes as f64 * hw.effective_flops() / (2.0 * hw.mem_bandwidth)
}

pub fn fc_latency(s: FcShape, hw: &HardwareSpec) -> Latency {
    let t_comp = 2.0 * (s.m as f64) * (s.n as f64) * (s.k as f64) / hw.effective_flops();
    let t_mem = (s.weight_bytes * s.n * s.k) as f64 / hw.mem_bandwidth;
    // t_comp < t_mem reduces to m < threshold; compare in that form so the
    // classification is exact.
    let bound = if (s.m as f64) < batch_threshold(hw, s.weight_bytes) {
        Bound::Memory
    } else {
        Bound::Compute
    };
    Latency::new(t_comp, t_mem, bound)
}

/// Discrete batch-size distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSizeDist {
    pub points: Vec<(usize, f64)>,
}

impl BatchSizeDist {
    pub fn fixed(m: usize) -> BatchSizeDist {
        BatchSizeDist {
            points: vec![(m.max(1), 1.0)],
        }
    }

    /// 44% of evaluations at batch size 1 and 86% below 25. The remaining
    /// mass is spread uniformly: 42% over 2..=24 and 14% over 25..=100.
    pub fn serving_mix() -> BatchSizeDist {
        let mut points = vec![(1, 0.44)];
        points.extend((2..=24).map(|m| (m, 0.42 / 23.0)));
        points.extend((25..=100).map(|m| (m, 0.14 / 76.0)));
        BatchSizeDist { points }
    }

    /// `serving-mix`, `fixed:M`, or a JSON file holding a point list.
    pub fn parse(spec: &str) -> Result<BatchSizeDist> {
        if spec == "serving-mix" {
            return Ok(BatchSizeDist::serving_mix());
        }
        if let Some(m) = spec.strip_prefix("fixed:") {
            let m = m
                .parse()
                .map_err(|_| Error::Config(format!("bad batch size `{m}`")))?;
            return Ok(BatchSizeDist::fixed(m));
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let d: BatchSizeDist =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{spec}: {e}")))?;
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.points.iter().map(|p| p.1).sum();
        if self.points.is_empty()
            || self.points.iter().any(|&(m, p)| m == 0 || !(p >= 0.0))
            || (total - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("batch-size distribution must be a probability mass over m >= 1".into()));
        }
        Ok(())
    }

    pub fn mass_below(&self, m: usize) -> f64 {
        self.points.iter().filter(|p| p.0 < m).map(|p| p.1).sum()
    }

    /// Draw a batch size from a uniform variate `u` in [0, 1).
    pub fn sample(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for &(m, p) in &self.points {
            acc += p;
            if u < acc {
                return m;
            }
        }
        self.points.last().map_or(1, |p| p.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRow {
    pub node: String,
    pub op: String,
    /// Bytes moved per evaluation at batch size 1 (weights for FC, rows for
    /// pooling, operands for batched matmul).
    pub bytes: f64,
    pub flops_per_sample: f64,
    pub latency_at_1: Latency,
    pub expected_latency: f64,
    /// Probability mass of batch sizes at which the op is memory bound.
    pub memory_bound_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphReport {
    pub hardware: HardwareSpec,
    pub rows: Vec<OpRow>,
    pub expected_latency: f64,
    pub fc_weight_bytes: f64,
    /// Share of FC evaluations that are memory bound under the distribution.
    pub fc_memory_bound_share: f64,
}

fn weight_bytes_per_element(g: &ModelGraph, precision: Precision, weight: &str) -> usize {
    match g.blob(weight) {
        Ok(Blob::I8(_)) => 1,
        Ok(Blob::F16(_)) => 2,
        Ok(_) => 4,
        Err(_) => match precision {
            Precision::Int8 => 1,
            Precision::Fp16Storage | Precision::Fp16Compute { .. } => 2,
            Precision::Fp32 => 4,
        },
    }
}

/// Per-op roofline table of `g`. Pooling is modeled as pure memory traffic
/// of `pooling` rows per sample.
pub fn graph_report(g: &ModelGraph, hw: &HardwareSpec, dist: &BatchSizeDist, pooling: f64) -> GraphReport {
    let mut rows = Vec::new();
    let mut fc_share = 0.0;
    let mut fc_count = 0usize;
    let mut fc_weight_bytes = 0.0;
    for node in &g.nodes {
        let row = match &node.op {
            Op::FullyConnected(a) | Op::FcRelu(a) => {
                let bytes = weight_bytes_per_element(g, node.precision, &a.weight);
                let lat = |m| {
                    fc_latency(
                        FcShape {
                            m,
                            n: a.in_dim,
                            k: a.out_dim,
                            weight_bytes: bytes,
                        },
                        hw,
                    )
                };
                let share: f64 = dist
                    .points
                    .iter()
                    .filter(|&&(m, _)| lat(m).bound == Bound::Memory)
                    .map(|p| p.1)
                    .sum();
                fc_share += share;
                fc_count += 1;
                let wb = (bytes * a.in_dim * a.out_dim) as f64;
                fc_weight_bytes += wb;
                OpRow {
                    node: node.name.clone(),
                    op: format!("{:?}", node.op.kind()),
                    bytes: wb,
                    flops_per_sample: node.fc_flops_per_sample(),
                    latency_at_1: lat(1),
                    expected_latency: dist.points.iter().map(|&(m, p)| p * lat(m).t).sum(),
                    memory_bound_share: share,
                }
            }
            Op::SparseLengthsSum { table } => {
                let row_bytes = g.table(table).map_or(0, |t| t.format.row_bytes(t.dim)) as f64;
                let lat = |m: usize| {
                    let t_mem = m as f64 * pooling * row_bytes / hw.mem_bandwidth;
                    Latency::new(0.0, t_mem, Bound::Memory)
                };
                OpRow {
                    node: node.name.clone(),
                    op: "SparseLengthsSum".into(),
                    bytes: pooling * row_bytes,
                    flops_per_sample: 0.0,
                    latency_at_1: lat(1),
                    expected_latency: dist.points.iter().map(|&(m, p)| p * lat(m).t).sum(),
                    memory_bound_share: 1.0,
                }
            }
            Op::BatchMatMul(s) => {
                let lat = |m: usize| {
                    let flops = 2.0 * (m * s.p * s.q * s.r) as f64;
                    let bytes = 4.0 * (m * (s.p * s.q + s.q * s.r + s.p * s.r)) as f64;
                    let t_comp = flops / hw.effective_flops();
                    let t_mem = bytes / hw.mem_bandwidth;
                    let bound = if t_comp < t_mem { Bound::Memory } else { Bound::Compute };
                    Latency::new(t_comp, t_mem, bound)
                };
                OpRow {
                    node: node.name.clone(),
                    op: "BatchMatMul".into(),
                    bytes: 4.0 * (s.p * s.q + s.q * s.r + s.p * s.r) as f64,
                    flops_per_sample: 2.0 * (s.p * s.q * s.r) as f64,
                    latency_at_1: lat(1),
                    expected_latency: dist.points.iter().map(|&(m, p)| p * lat(m).t).sum(),
                    memory_bound_share: dist
                        .points
                        .iter()
                        .filter(|&&(m, _)| lat(m).bound == Bound::Memory)
                        .map(|p| p.1)
                        .sum(),
                }
            }
            _ => continue,
        };
        rows.push(row);
    }
    GraphReport {
        hardware: hw.clone(),
        expected_latency: rows.iter().map(|r| r.expected_latency).sum(),
        rows,
        fc_weight_bytes,
        fc_memory_bound_share: if fc_count == 0 { 0.0 } else { fc_share / fc_count as f64 },
    }
}

impl GraphReport {
    pub fn to_text(&self) -> String {
        let hw = &self.hardware;
        let mut s = format!(
            "hardware {}: F={:.3e} flop/s, E={}, B={:.3e} B/s; fp32 batch threshold {:.2}\n",
            hw.name,
            hw.peak_flops,
            hw.efficiency,
            hw.mem_bandwidth,
            batch_threshold(hw, 4)
        );
        let _ = writeln!(
            s,
            "{:<24} {:<18} {:>12} {:>12} {:>12} {:>8} {:>9}",
            "node", "op", "bytes@1", "t@1 (us)", "E[t] (us)", "bound@1", "mem-share"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<24} {:<18} {:>12.0} {:>12.4} {:>12.4} {:>8} {:>9.3}",
                r.node,
                r.op,
                r.bytes,
                r.latency_at_1.t * 1e6,
                r.expected_latency * 1e6,
                match r.latency_at_1.bound {
                    Bound::Memory => "memory",
                    Bound::Compute => "compute",
                },
                r.memory_bound_share
            );
        }
        let _ = writeln!(
            s,
            "expected latency {:.4} us; FC weight bytes {:.0}; memory-bound FC share {:.3}",
            self.expected_latency * 1e6,
            self.fc_weight_bytes,
            self.fc_memory_bound_share
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fc_example() {
        let hw = HardwareSpec::broadwell_like();
        let l = fc_latency(FcShape { m: 1, n: 512, k: 512, weight_bytes: 4 }, &hw);
        assert!((l.t_comp - 524288.0 / 0.9e12).abs() < 1e-15);
        assert!((l.t_comp * 1e6 - 0.583).abs() < 1e-3);
        assert!((l.t_mem * 1e6 - 14.98).abs() < 1e-2);
        assert_eq!(l.bound, Bound::Memory);
        let q = fc_latency(FcShape { m: 1, n: 512, k: 512, weight_bytes: 1 }, &hw);
        assert_eq!(q.t_mem * 4.0, l.t_mem);
        let big = fc_latency(FcShape { m: 1 << 20, n: 512, k: 512, weight_bytes: 4 }, &hw);
        assert_eq!(big.bound, Bound::Compute);
    }

    #[test]
    fn thresholds() {
        let hw = HardwareSpec::broadwell_like();
        assert!((batch_threshold(&hw, 4) - 25.714285).abs() < 1e-5);
        assert!((batch_threshold(&hw, 1) - 25.714285 / 4.0).abs() < 1e-5);
        let inf = HardwareSpec { mem_bandwidth: f64::INFINITY, ..hw };
        assert_eq!(batch_threshold(&inf, 4), 0.0);
    }

    #[test]
    fn serving_mix_mass() {
        let d = BatchSizeDist::serving_mix();
        d.validate().unwrap();
        assert!((d.mass_below(2) - 0.44).abs() < 1e-12);
        assert!((d.mass_below(25) - 0.86).abs() < 1e-12);
        assert_eq!(d.sample(0.0), 1);
        assert_eq!(d.sample(0.999999), 100);
    }
}
