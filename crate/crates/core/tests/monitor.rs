mod common;

use std::path::Path;

use lpq::autoquant::{GlobalScheme, QuantScheme};
use lpq::calib::calibrate;
use lpq::datagen::{gen_snapshots, write_snapshots, DataGenConfig, Drift, SnapshotConfig};
use lpq::graph::transform::{apply_scheme, fuse_fc_relu};
use lpq::graph::{predict, BackendConfig, Op, ReferenceBackend};
use lpq::kernels::{Interpolation, LutSpec};
use lpq::metrics::normalized_entropy;
use lpq::monitor::{emulation_compare, monitor_run, read_log, MonitorConfig};
use lpq::Exec;

fn snapshots(dir: &Path, seed: u64, count: usize, drift: Drift) {
    let cfg = SnapshotConfig {
        model: common::small_config(seed),
        data: DataGenConfig {
            seed: seed + 1,
            ..DataGenConfig::default()
        },
        count,
        calib_samples: 300,
        eval_samples: 800,
        drift,
    };
    write_snapshots(&gen_snapshots(&cfg, Exec::Parallel).unwrap(), dir).unwrap();
}

fn scheme() -> QuantScheme {
    QuantScheme::new(GlobalScheme::default())
}

fn frozen() -> MonitorConfig {
    MonitorConfig {
        recalibrate: false,
        ..MonitorConfig::default()
    }
}

#[test]
fn identical_snapshots_show_no_change() {
    let dir = tempfile::tempdir().unwrap();
    snapshots(dir.path(), 1, 3, Drift::None);
    let cfg = MonitorConfig {
        threshold: 1.0,
        ..MonitorConfig::default()
    };
    let s = monitor_run(dir.path(), &scheme(), &cfg, None, None, Exec::Parallel).unwrap();
    assert_eq!(s.records.len(), 3);
    let first = s.records[0].ne_diff.unwrap();
    for r in &s.records {
        assert_eq!(r.ne_diff.unwrap().to_bits(), first.to_bits());
        assert_eq!(r.ne_diff_change, Some(0.0));
        assert!(!r.alert);
        assert!(r.error.is_none());
    }
}

#[test]
fn activation_shift_without_recalibration_raises_ne_diff() {
    let dir = tempfile::tempdir().unwrap();
    snapshots(dir.path(), 2, 4, Drift::ActivationShift { delta: 1.0 });
    let s = monitor_run(dir.path(), &scheme(), &frozen(), None, None, Exec::Parallel).unwrap();
    let d: Vec<f64> = s.records.iter().map(|r| r.ne_diff.unwrap()).collect();
    assert!(d[3] > d[0], "{d:?}");
    assert!(s.records[3].alert, "{d:?}");
    for r in &s.records {
        assert_eq!(r.alert, r.ne_diff.unwrap() > 0.0005);
    }
}

#[test]
fn unreadable_snapshot_is_recorded_and_skipped() {
    let dir = tempfile::tempdir().unwrap();
    snapshots(dir.path(), 3, 3, Drift::None);
    let clean = monitor_run(dir.path(), &scheme(), &frozen(), None, None, Exec::Parallel).unwrap();
    std::fs::remove_file(dir.path().join("snap-001/model/weights.bin")).unwrap();
    let s = monitor_run(dir.path(), &scheme(), &frozen(), None, None, Exec::Parallel).unwrap();
    assert_eq!(s.records.len(), 3);
    assert_eq!(s.load_errors(), 1);
    assert!(s.records[1].error.is_some());
    assert!(s.records[1].ne_diff.is_none());
    assert_eq!(s.records[0], clean.records[0]);
    assert_eq!(s.records[2], clean.records[2]);
}

#[test]
fn replay_writes_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    snapshots(dir.path(), 4, 3, Drift::ActivationShift { delta: 0.5 });
    let logs = tempfile::tempdir().unwrap();
    let (a, b) = (logs.path().join("a.jsonl"), logs.path().join("b.jsonl"));
    monitor_run(dir.path(), &scheme(), &frozen(), None, Some(&a), Exec::Parallel).unwrap();
    monitor_run(dir.path(), &scheme(), &frozen(), None, Some(&b), Exec::Sequential).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_log(&a).unwrap().len(), 3);
    // The log is appended to, never truncated.
    monitor_run(dir.path(), &scheme(), &frozen(), None, Some(&a), Exec::Parallel).unwrap();
    assert_eq!(read_log(&a).unwrap().len(), 6);
}

#[test]
fn recorded_ne_matches_a_direct_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    snapshots(dir.path(), 5, 2, Drift::WeightWalk { sigma_step: 0.05 });
    let cfg = MonitorConfig::default();
    let s = monitor_run(dir.path(), &scheme(), &cfg, None, None, Exec::Parallel).unwrap();
    for r in &s.records {
        let snap = lpq::datagen::read_snapshot(&dir.path().join(&r.snapshot_id)).unwrap();
        let fp32 = fuse_fc_relu(&snap.model);
        let cal = calibrate(&snap.model, &snap.calib, cfg.bins, Exec::Sequential).unwrap();
        let lowp = apply_scheme(&fp32, &scheme(), &cal).unwrap();
        let b = ReferenceBackend::default();
        let nf = normalized_entropy(&predict(&fp32, &b, &snap.eval, Exec::Sequential).unwrap(), &snap.eval)
            .unwrap()
            .ne;
        let nl = normalized_entropy(&predict(&lowp, &b, &snap.eval, Exec::Sequential).unwrap(), &snap.eval)
            .unwrap()
            .ne;
        assert_eq!(r.ne_fp32.unwrap().to_bits(), nf.to_bits());
        assert_eq!(r.ne_lowp.unwrap().to_bits(), nl.to_bits());
        assert_eq!(r.ne_diff.unwrap().to_bits(), ((nl - nf) / nf).to_bits());
        assert_eq!(r.timestamp, Some(snap.meta.timestamp));
        assert_eq!(r.scheme_hash, scheme().hash());
        assert!(r.top_layers.len() <= cfg.top_k);
    }
}

#[test]
fn bad_threshold_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = MonitorConfig {
        threshold: -1.0,
        ..MonitorConfig::default()
    };
    assert!(matches!(
        monitor_run(dir.path(), &scheme(), &cfg, None, None, Exec::Parallel),
        Err(lpq::Error::Config(_))
    ));
}

#[test]
fn emulation_drift_is_attributed_to_the_emulated_op() {
    let g = common::small_model(6);
    let data = common::data(&g, 600, 7);
    let cal = calibrate(&g, &data[..300], 512, Exec::Parallel).unwrap();
    let q = apply_scheme(&g, &scheme(), &cal).unwrap();
    let eval = &data[300..];
    let base = ReferenceBackend::default();

    let same = emulation_compare(&q, &base, &ReferenceBackend::default(), eval, Exec::Parallel).unwrap();
    assert_eq!(same.ne_diff, 0.0);
    assert!(same.layers.iter().all(|l| l.error == 0.0));

    let sls16 = ReferenceBackend::named(
        "fp16-sls",
        BackendConfig {
            sls_fp16_accumulate: true,
            ..BackendConfig::default()
        },
    );
    let r = emulation_compare(&q, &base, &sls16, eval, Exec::Parallel).unwrap();
    assert!(r.ne_diff.abs() < 1e-3, "{}", r.ne_diff);
    assert!(r.layers.iter().all(|l| l.error < 1e-2));

    let narrow = ReferenceBackend::named(
        "narrow-lut",
        BackendConfig {
            sigmoid_lut: Some(LutSpec {
                lo: -1.0,
                hi: 1.0,
                entries: 64,
                interpolation: Interpolation::Linear,
            }),
            ..BackendConfig::default()
        },
    );
    let r = emulation_compare(&q, &base, &narrow, eval, Exec::Parallel).unwrap();
    let sigmoid = q.nodes.iter().find(|n| matches!(n.op, Op::Sigmoid { .. })).unwrap();
    let worst = r.layers.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    assert_eq!(worst.node, sigmoid.name);
    assert_eq!(r.backend_emulation, "narrow-lut");
}
