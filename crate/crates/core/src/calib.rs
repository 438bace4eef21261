//! Activation histograms and range derivation.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{to_batch, LabeledSample};
use crate::error::{Error, Result};
use crate::graph::exec::{execute, EVAL_BATCH};
use crate::graph::transform::fuse_fc_relu;
use crate::graph::{ModelGraph, Node, Observer, ReferenceBackend};
use crate::par::Exec;
use crate::quant::{IntRange, RangeMethod};
use crate::tensor::Value;

pub const DEFAULT_BINS: usize = 2048;
/// Candidate start and end positions per axis in the l2min window search.
pub const L2MIN_GRID: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    lo: f64,
    hi: f64,
    counts: Vec<u64>,
    running_min: f32,
    running_max: f32,
    total: u64,
}

impl Histogram {
    pub fn new(bins: usize) -> Histogram {
        let bins = bins.max(2) & !1;
        Histogram {
            lo: 0.0,
            hi: 0.0,
            counts: vec![0; bins],
            running_min: f32::INFINITY,
            running_max: f32::NEG_INFINITY,
            total: 0,
        }
    }

    /// Empty histogram with a fixed initial grid over `[lo, hi]`.
    pub fn with_range(lo: f32, hi: f32, bins: usize) -> Histogram {
        let mut h = Histogram::new(bins);
        h.set_grid(lo as f64, hi as f64);
        h
    }

    fn set_grid(&mut self, lo: f64, hi: f64) {
        let width = if hi > lo {
            hi - lo
        } else {
            (lo.abs() * 1e-3).max(1e-6)
        };
        self.lo = lo;
        self.hi = lo + width;
    }

    fn has_grid(&self) -> bool {
        self.hi > self.lo
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn running_range(&self) -> Option<(f32, f32)> {
        (self.total > 0).then_some((self.running_min, self.running_max))
    }

    fn bin_width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    fn edge(&self, b: usize) -> f64 {
        self.lo + b as f64 * self.bin_width()
    }

    fn midpoint(&self, b: usize) -> f64 {
        self.lo + (b as f64 + 0.5) * self.bin_width()
    }

    #[inline]
    fn bin_of(&self, x: f64) -> usize {
        let t = (x - self.lo) / (self.hi - self.lo) * self.bins() as f64;
        (t.max(0.0) as usize).min(self.bins() - 1)
    }

    fn grow_up(&mut self) {
        let n = self.bins();
        for i in 0..n / 2 {
            self.counts[i] = self.counts[2 * i] + self.counts[2 * i + 1];
        }
        self.counts[n / 2..].fill(0);
        self.hi = self.lo + 2.0 * (self.hi - self.lo);
    }

    fn grow_down(&mut self) {
        let n = self.bins();
        for i in (0..n / 2).rev() {
            self.counts[n / 2 + i] = self.counts[2 * i] + self.counts[2 * i + 1];
        }
        self.counts[..n / 2].fill(0);
        self.lo = self.hi - 2.0 * (self.hi - self.lo);
    }

    pub fn observe(&mut self, x: &[f32]) -> Result<()> {
        if x.is_empty() {
            return Ok(());
        }
        if let Some(v) = x.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(*v as f64));
        }
        if !self.has_grid() {
            let (lo, hi) = crate::quant::min_max(x);
            self.set_grid(lo as f64, hi as f64);
        }
        for &v in x {
            let xv = v as f64;
            while xv < self.lo {
                self.grow_down();
            }
            while xv > self.hi {
                self.grow_up();
            }
            let b = self.bin_of(xv);
            self.counts[b] += 1;
            self.running_min = self.running_min.min(v);
            self.running_max = self.running_max.max(v);
        }
        self.total += x.len() as u64;
        Ok(())
    }

    /// Merge `other` into `self`. Identical grids add exactly; otherwise both
    /// are rebinned by bin midpoint onto the union range.
    pub fn merge(&mut self, other: &Histogram) {
        if other.total == 0 {
            return;
        }
        if self.total == 0 {
            *self = other.clone();
            return;
        }
        let same_grid = self.bins() == other.bins()
            && self.lo.to_bits() == other.lo.to_bits()
            && self.hi.to_bits() == other.hi.to_bits();
        if same_grid {
            for (a, b) in self.counts.iter_mut().zip(&other.counts) {
                *a += b;
            }
        } else {
            let mut merged = Histogram::new(self.bins());
            merged.lo = self.lo.min(other.lo);
            merged.hi = self.hi.max(other.hi);
            for src in [&*self, other] {
                for (b, &c) in src.counts.iter().enumerate() {
                    if c > 0 {
                        let t = merged.bin_of(src.midpoint(b));
                        merged.counts[t] += c;
                    }
                }
            }
            self.lo = merged.lo;
            self.hi = merged.hi;
            self.counts = merged.counts;
        }
        self.total += other.total;
        self.running_min = self.running_min.min(other.running_min);
        self.running_max = self.running_max.max(other.running_max);
    }

    fn nonempty_span(&self) -> (usize, usize) {
        let first = self.counts.iter().position(|&c| c > 0).unwrap_or(0);
        let last = self.counts.iter().rposition(|&c| c > 0).unwrap_or(0);
        (first, last)
    }

    fn quantile(&self, target: f64) -> f64 {
        let mut cum = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let c = c as f64;
            if cum + c >= target {
                let frac = ((target - cum) / c).clamp(0.0, 1.0);
                return self.edge(b) + frac * self.bin_width();
            }
            cum += c;
        }
        self.hi
    }

    /// Modeled squared quantization error of clipping to `[lo, hi]` with
    /// `levels` steps. Bins are classified by their midpoint.
    pub fn modeled_error(&self, lo: f64, hi: f64, levels: i32) -> f64 {
        let step = (hi - lo) / levels as f64;
        let inside_cost = step * step / 12.0;
        let mut err = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let mid = self.midpoint(b);
            let c = c as f64;
            err += if mid < lo {
                c * (lo - mid) * (lo - mid)
            } else if mid > hi {
                c * (mid - hi) * (mid - hi)
            } else {
                c * inside_cost
            };
        }
        err
    }

    pub fn derive_range(&self, method: RangeMethod, range: IntRange) -> Result<(f32, f32)> {
        if self.total == 0 {
            return Err(Error::EmptyHistogram);
        }
        method.validate()?;
        let (rmin, rmax) = (self.running_min as f64, self.running_max as f64);
        let (lo, hi) = match method {
            RangeMethod::MinMax => (rmin, rmax),
            RangeMethod::Percentile { q } => {
                let tail = (1.0 - q as f64) / 2.0 * self.total as f64;
                (self.quantile(tail), self.quantile(self.total as f64 - tail))
            }
            RangeMethod::L2Min => self.l2min_window(rmin, rmax, range.levels()),
        };
        let lo = lo.clamp(rmin, rmax);
        let hi = hi.clamp(lo, rmax);
        Ok((lo as f32, hi as f32))
    }

    fn l2min_window(&self, rmin: f64, rmax: f64, levels: i32) -> (f64, f64) {
        let (first, last) = self.nonempty_span();
        let span = last - first + 1;
        let g = L2MIN_GRID.min(span);
        let mids: Vec<f64> = (0..self.bins()).map(|b| self.midpoint(b)).collect();
        // Prefix sums of count, count*mid, count*mid^2.
        let mut pc = vec![0.0f64; self.bins() + 1];
        let mut p1 = vec![0.0f64; self.bins() + 1];
        let mut p2 = vec![0.0f64; self.bins() + 1];
        for b in 0..self.bins() {
            let c = self.counts[b] as f64;
            pc[b + 1] = pc[b] + c;
            p1[b + 1] = p1[b] + c * mids[b];
            p2[b + 1] = p2[b] + c * mids[b] * mids[b];
        }
        let error = |lo: f64, hi: f64| -> f64 {
            let below = mids.partition_point(|&m| m < lo);
            let upto = mids.partition_point(|&m| m <= hi).max(below);
            let step = (hi - lo) / levels as f64;
            let left = lo * lo * pc[below] - 2.0 * lo * p1[below] + p2[below];
            let n = self.bins();
            let right = (p2[n] - p2[upto]) - 2.0 * hi * (p1[n] - p1[upto])
                + hi * hi * (pc[n] - pc[upto]);
            let inside = (pc[upto] - pc[below]) * step * step / 12.0;
            left.max(0.0) + right.max(0.0) + inside
        };
        let mut best = (rmin, rmax);
        let mut best_err = error(rmin, rmax);
        for i in 0..g {
            let s = first + i * span / g;
            let lo = self.edge(s).max(rmin);
            for j in 0..g {
                let e = first + ((j + 1) * span).div_ceil(g);
                let hi = self.edge(e).min(rmax);
                if hi < lo {
                    continue;
                }
                let err = error(lo, hi);
                if err < best_err || (err == best_err && hi - lo > best.1 - best.0) {
                    best = (lo, hi);
                    best_err = err;
                }
            }
        }
        best
    }
}

pub const CALIBRATION_VERSION: u32 = 1;

/// Calibration artifact: one histogram per activation tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub version: u32,
    pub model: String,
    pub samples: usize,
    pub histograms: BTreeMap<String, Histogram>,
}

impl Calibration {
    pub fn get(&self, tensor: &str) -> Result<&Histogram> {
        self.histograms
            .get(tensor)
            .ok_or_else(|| Error::MissingCalibration(tensor.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Calibration> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let c: Calibration = serde_json::from_str(&text)?;
        if c.version != CALIBRATION_VERSION {
            return Err(Error::Version {
                found: c.version,
                expected: CALIBRATION_VERSION,
            });
        }
        Ok(c)
    }
}

/// Activation tensors that static quantization needs: the input and output of
/// every FC in the fused graph.
pub fn calibration_tensors(g: &ModelGraph) -> BTreeSet<String> {
    let fused = fuse_fc_relu(g);
    fused
        .nodes
        .iter()
        .filter(|n| n.is_fc())
        .flat_map(|n| [n.inputs[0].clone(), n.output.clone()])
        .collect()
}

struct Tap<'a, F: FnMut(&str, &[f32]) -> Result<()>> {
    wanted: &'a BTreeSet<String>,
    seen: BTreeSet<String>,
    sink: F,
}

impl<F: FnMut(&str, &[f32]) -> Result<()>> Observer for Tap<'_, F> {
    fn on_node(&mut self, _: usize, node: &Node, inputs: &[&Value], output: &Value) -> Result<()> {
        let named = node.inputs.iter().zip(inputs.iter().copied());
        for (t, v) in named.chain(std::iter::once((&node.output, output))) {
            if let Value::F32(m) = v {
                if self.wanted.contains(t) && self.seen.insert(t.clone()) {
                    (self.sink)(t, &m.data)?;
                }
            }
        }
        Ok(())
    }
}

fn tap_chunks<T: Send, F>(
    g: &ModelGraph,
    wanted: &BTreeSet<String>,
    samples: &[LabeledSample],
    exec: Exec,
    init: impl Fn() -> T + Sync + Send,
    f: F,
) -> Result<Vec<T>>
where
    F: Fn(&mut T, &str, &[f32]) -> Result<()> + Sync + Send,
{
    let backend = ReferenceBackend::default();
    exec.map_chunks(samples, EVAL_BATCH, |_, chunk| {
        let mut state = init();
        {
            let mut tap = Tap {
                wanted,
                seen: BTreeSet::new(),
                sink: |t: &str, d: &[f32]| f(&mut state, t, d),
            };
            execute(g, &backend, &to_batch(chunk)?, Some(&mut tap))?;
        }
        Ok(state)
    })
    .into_iter()
    .collect()
}

/// Collect one histogram per activation tensor of `g`. The first pass finds
/// global ranges, the second fills fixed-range histograms per chunk, which
/// then merge exactly, so the result does not depend on `exec`.
pub fn calibrate(
    g: &ModelGraph,
    samples: &[LabeledSample],
    bins: usize,
    exec: Exec,
) -> Result<Calibration> {
    if samples.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    let fused = fuse_fc_relu(g);
    let wanted = calibration_tensors(&fused);
    let ranges = tap_chunks(&fused, &wanted, samples, exec, HashMap::new, |m, t, d| {
        let (lo, hi) = crate::quant::min_max(d);
        let e = m.entry(t.to_string()).or_insert((lo, hi));
        *e = (e.0.min(lo), e.1.max(hi));
        Ok(())
    })?;
    let mut global: HashMap<String, (f32, f32)> = HashMap::new();
    for part in ranges {
        for (t, (lo, hi)) in part {
            let e = global.entry(t).or_insert((lo, hi));
            *e = (e.0.min(lo), e.1.max(hi));
        }
    }
    let hists = tap_chunks(&fused, &wanted, samples, exec, BTreeMap::new, |m, t, d| {
        let h = m.entry(t.to_string()).or_insert_with(|| {
            let (lo, hi) = global[t];
            Histogram::with_range(lo, hi, bins)
        });
        h.observe(d)
    })?;
    let mut histograms: BTreeMap<String, Histogram> = BTreeMap::new();
    for part in hists {
        for (t, h) in part {
            histograms.entry(t).or_insert_with(|| Histogram::new(bins)).merge(&h);
        }
    }
    Ok(Calibration {
        version: CALIBRATION_VERSION,
        model: g.name.clone(),
        samples: samples.len(),
        histograms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn observe_basic() {
        let mut h = Histogram::new(DEFAULT_BINS);
        h.observe(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(h.total(), 3);
        assert_eq!(h.running_range(), Some((1.0, 3.0)));
        assert_eq!(h.counts().iter().sum::<u64>(), 3);
        assert!(h.observe(&[f32::NAN]).is_err());
    }

    #[test]
    fn doubling_keeps_counts() {
        let mut h = Histogram::new(16);
        h.observe(&[0.0, 1.0, 0.5]).unwrap();
        h.observe(&[5.0, -7.0]).unwrap();
        assert_eq!(h.total(), 5);
        assert_eq!(h.counts().iter().sum::<u64>(), 5);
        let (lo, hi) = h.bounds();
        assert!(lo <= -7.0 && hi >= 5.0);
    }

    #[test]
    fn disjoint_observes_match_combined() {
        let mut a = Histogram::new(DEFAULT_BINS);
        a.observe(&[1.0, 2.0]).unwrap();
        a.observe(&[3.0, -4.0]).unwrap();
        let mut b = Histogram::new(DEFAULT_BINS);
        b.observe(&[1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!(a.total(), b.total());
        assert_eq!(a.running_range(), b.running_range());
    }

    #[test]
    fn single_bin_mass() {
        let mut h = Histogram::new(DEFAULT_BINS);
        h.observe(&[0.25; 100]).unwrap();
        for m in [
            RangeMethod::MinMax,
            RangeMethod::Percentile { q: 0.99 },
            RangeMethod::L2Min,
        ] {
            assert_eq!(h.derive_range(m, IntRange::UINT8).unwrap(), (0.25, 0.25));
        }
    }

    #[test]
    fn empty_histogram_errors() {
        let h = Histogram::new(DEFAULT_BINS);
        assert!(matches!(
            h.derive_range(RangeMethod::MinMax, IntRange::UINT8),
            Err(Error::EmptyHistogram)
        ));
    }

    #[test]
    fn percentile_on_uniform() {
        let data: Vec<f32> = (0..100_000).map(|i| (i as f32 + 0.5) / 100_000.0).collect();
        let mut h = Histogram::new(DEFAULT_BINS);
        h.observe(&data).unwrap();
        let (lo, hi) = h
            .derive_range(RangeMethod::Percentile { q: 0.99 }, IntRange::UINT8)
            .unwrap();
        let w = 1.0 / DEFAULT_BINS as f32;
        assert!((lo - 0.005).abs() <= w, "{lo}");
        assert!((hi - 0.995).abs() <= w, "{hi}");
    }

    #[test]
    fn merge_same_grid_is_exact() {
        let mut a = Histogram::with_range(-1.0, 1.0, 64);
        let mut b = Histogram::with_range(-1.0, 1.0, 64);
        a.observe(&[-0.5, 0.1]).unwrap();
        b.observe(&[0.9]).unwrap();
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
        assert_eq!(ab.total(), 3);
    }

    #[test]
    fn calibration_roundtrip() {
        let mut h = Histogram::new(32);
        h.observe(&[1.0, 2.0]).unwrap();
        let c = Calibration {
            version: CALIBRATION_VERSION,
            model: "m".into(),
            samples: 2,
            histograms: [("x".to_string(), h)].into_iter().collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("calib.json");
        c.save(&p).unwrap();
        assert_eq!(Calibration::load(&p).unwrap(), c);
        assert!(c.get("y").is_err());
    }
}
