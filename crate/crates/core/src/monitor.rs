//! Accuracy monitoring over a directory of model snapshots.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autoquant::QuantScheme;
use crate::calib::{calibrate, Calibration, DEFAULT_BINS};
use crate::dataset::LabeledSample;
use crate::datagen::{read_snapshot, Snapshot};
use crate::error::{Error, Result};
use crate::graph::transform::{apply_scheme, fuse_fc_relu};
use crate::graph::{predict, Backend, ModelGraph, ReferenceBackend};
use crate::metrics::{compare_ne, normalized_entropy, per_layer_error, per_layer_error_with, LayerError};
use crate::par::Exec;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    pub threshold: f64,
    /// Recollect activation histograms per snapshot; otherwise reuse the
    /// first snapshot's histograms.
    pub recalibrate: bool,
    pub bins: usize,
    pub top_k: usize,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            threshold: 0.0005,
            recalibrate: true,
            bins: DEFAULT_BINS,
            top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRecord {
    pub schema_version: u32,
    pub snapshot_id: String,
    pub index: usize,
    pub timestamp: Option<u64>,
    pub ne_fp32: Option<f64>,
    pub ne_lowp: Option<f64>,
    pub ne_diff: Option<f64>,
    /// Change of `ne_diff` relative to the first successfully evaluated
    /// snapshot.
    pub ne_diff_change: Option<f64>,
    pub top_layers: Vec<LayerError>,
    pub alert: bool,
    pub scheme_hash: String,
    /// Set when the snapshot could not be loaded or evaluated.
    pub error: Option<String>,
}

impl SnapshotRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSummary {
    pub records: Vec<SnapshotRecord>,
}

impl MonitorSummary {
    pub fn any_alert(&self) -> bool {
        self.records.iter().any(|r| r.alert)
    }

    pub fn load_errors(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }
}

/// Snapshot subdirectories in name order.
pub fn snapshot_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if entry.path().is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

struct Evaluated {
    ne_fp32: f64,
    ne_lowp: f64,
    layers: Vec<LayerError>,
}

fn evaluate_snapshot(
    model: &ModelGraph,
    scheme: &QuantScheme,
    calib: &Calibration,
    eval: &[LabeledSample],
    exec: Exec,
) -> Result<Evaluated> {
    if eval.is_empty() {
        return Err(Error::Data("snapshot has no evaluation samples".into()));
    }
    let fp32 = fuse_fc_relu(model);
    let lowp = apply_scheme(&fp32, scheme, calib)?;
    let b = ReferenceBackend::default();
    let ne_fp32 = normalized_entropy(&predict(&fp32, &b, eval, exec)?, eval)?.ne;
    let ne_lowp = normalized_entropy(&predict(&lowp, &b, eval, exec)?, eval)?.ne;
    let layers = per_layer_error(&lowp, &fp32, eval, exec)?;
    Ok(Evaluated {
        ne_fp32,
        ne_lowp,
        layers,
    })
}

fn top_layers(mut layers: Vec<LayerError>, k: usize) -> Vec<LayerError> {
    layers.sort_by(|a, b| b.error.total_cmp(&a.error));
    layers.truncate(k);
    layers
}

/// Stateful monitor: feed snapshots in order, one record each.
pub struct Monitor<'a> {
    pub scheme: &'a QuantScheme,
    pub cfg: &'a MonitorConfig,
    pub exec: Exec,
    frozen: Option<Calibration>,
    baseline: Option<f64>,
    records: Vec<SnapshotRecord>,
}

impl<'a> Monitor<'a> {
    pub fn new(scheme: &'a QuantScheme, cfg: &'a MonitorConfig, exec: Exec) -> Self {
        Monitor {
            scheme,
            cfg,
            exec,
            frozen: None,
            baseline: None,
            records: Vec::new(),
        }
    }

    fn blank(&self, id: String, index: usize) -> SnapshotRecord {
        SnapshotRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            snapshot_id: id,
            index,
            timestamp: None,
            ne_fp32: None,
            ne_lowp: None,
            ne_diff: None,
            ne_diff_change: None,
            top_layers: Vec::new(),
            alert: false,
            scheme_hash: self.scheme.hash(),
            error: None,
        }
    }

    fn calibration_for(&mut self, snap: &Snapshot) -> Result<Calibration> {
        if !self.cfg.recalibrate {
            if let Some(c) = &self.frozen {
                return Ok(c.clone());
            }
        }
        let c = calibrate(&snap.model, &snap.calib, self.cfg.bins, self.exec)?;
        if !self.cfg.recalibrate {
            self.frozen = Some(c.clone());
        }
        Ok(c)
    }

    pub fn observe(&mut self, id: String, loaded: Result<Snapshot>) -> &SnapshotRecord {
        let index = self.records.len();
        let mut rec = self.blank(id, index);
        let outcome = loaded.and_then(|snap| {
            rec.timestamp = Some(snap.meta.timestamp);
            let calib = self.calibration_for(&snap)?;
            evaluate_snapshot(&snap.model, self.scheme, &calib, &snap.eval, self.exec)
        });
        match outcome {
            Ok(ev) => {
                let cmp = compare_ne(ev.ne_lowp, ev.ne_fp32);
                let base = *self.baseline.get_or_insert(cmp.ne_diff);
                rec.ne_fp32 = Some(cmp.ne_fp32);
                rec.ne_lowp = Some(cmp.ne_lowp);
                rec.ne_diff = Some(cmp.ne_diff);
                rec.ne_diff_change = Some(cmp.ne_diff - base);
                rec.top_layers = top_layers(ev.layers, self.cfg.top_k);
                rec.alert = cmp.ne_diff > self.cfg.threshold;
            }
            Err(e) => {
                log::warn!("snapshot {} skipped: {e}", rec.snapshot_id);
                rec.error = Some(e.to_string());
            }
        }
        self.records.push(rec);
        self.records.last().expect("just pushed")
    }

    pub fn finish(self) -> MonitorSummary {
        MonitorSummary { records: self.records }
    }
}

/// Evaluate every snapshot under `dir` in name order, appending one JSON
/// line per snapshot to `log_path` when given. `eval`, if set, replaces each
/// snapshot's own evaluation samples.
pub fn monitor_run(
    dir: &Path,
    scheme: &QuantScheme,
    cfg: &MonitorConfig,
    eval: Option<&[LabeledSample]>,
    log_path: Option<&Path>,
    exec: Exec,
) -> Result<MonitorSummary> {
    if !(cfg.threshold >= 0.0) || cfg.bins == 0 {
        return Err(Error::Config("monitor threshold must be >= 0 and bins > 0".into()));
    }
    let mut log = match log_path {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))?,
        ),
        None => None,
    };
    let mut mon = Monitor::new(scheme, cfg, exec);
    for d in snapshot_dirs(dir)? {
        let id = d
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let loaded = read_snapshot(&d).map(|mut s| {
            if let Some(e) = eval {
                s.eval = e.to_vec();
            }
            s
        });
        let rec = mon.observe(id, loaded);
        log::info!(
            "{} ne_diff={:?} alert={}",
            rec.snapshot_id,
            rec.ne_diff,
            rec.alert
        );
        if let (Some(f), Some(p)) = (log.as_mut(), log_path) {
            writeln!(f, "{}", rec.to_json()).map_err(|e| Error::io(p, e))?;
        }
    }
    Ok(mon.finish())
}

pub fn read_log(path: &Path) -> Result<Vec<SnapshotRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmulationRecord {
    pub backend_default: String,
    pub backend_emulation: String,
    pub ne_default: f64,
    pub ne_emulation: f64,
    /// Relative NE change of the emulated run over the default run.
    pub ne_diff: f64,
    pub layers: Vec<LayerError>,
}

/// Run the quantized model under `emulation` and under `default`, and report
/// how far the emulated run drifts, overall and per node.
pub fn emulation_compare(
    lowp: &ModelGraph,
    default: &dyn Backend,
    emulation: &dyn Backend,
    eval: &[LabeledSample],
    exec: Exec,
) -> Result<EmulationRecord> {
    let ne_default = normalized_entropy(&predict(lowp, default, eval, exec)?, eval)?.ne;
    let ne_emulation = normalized_entropy(&predict(lowp, emulation, eval, exec)?, eval)?.ne;
    let layers = per_layer_error_with(lowp, emulation, lowp, default, eval, exec)?;
    Ok(EmulationRecord {
        backend_default: default.name().to_string(),
        backend_emulation: emulation.name().to_string(),
        ne_default,
        ne_emulation,
        ne_diff: compare_ne(ne_emulation, ne_default).ne_diff,
        layers,
    })
}
