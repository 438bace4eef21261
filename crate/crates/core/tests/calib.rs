mod common;

use lpq::calib::{calibrate, calibration_tensors, Histogram, DEFAULT_BINS};
use lpq::quant::{IntRange, RangeMethod};
use lpq::Exec;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

fn sample(seed: u64, n: usize, outliers: usize) -> Vec<f32> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(rng.random_range(-2.0f32..2.0), rng.random_range(0.1f32..3.0)).unwrap();
    let mut v: Vec<f32> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    for _ in 0..outliers {
        v.push(rng.random_range(-40.0f32..40.0));
    }
    v
}

fn methods() -> impl Strategy<Value = RangeMethod> {
    prop_oneof![
        Just(RangeMethod::MinMax),
        (0.5f32..=1.0).prop_map(|q| RangeMethod::Percentile { q }),
        Just(RangeMethod::L2Min),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn l2min_never_worse_than_minmax(seed in any::<u64>(), outliers in 0usize..5, bins in 64usize..1024) {
        let mut h = Histogram::new(bins);
        h.observe(&sample(seed, 2000, outliers)).unwrap();
        let levels = IntRange::UINT8.levels();
        let (lo, hi) = h.derive_range(RangeMethod::L2Min, IntRange::UINT8).unwrap();
        let (rmin, rmax) = h.running_range().unwrap();
        let full = h.modeled_error(rmin as f64, rmax as f64, levels);
        prop_assert!(h.modeled_error(lo as f64, hi as f64, levels) <= full);
    }

    #[test]
    fn derived_range_inside_running_range(seed in any::<u64>(), outliers in 0usize..5, m in methods()) {
        let mut h = Histogram::new(512);
        h.observe(&sample(seed, 1000, outliers)).unwrap();
        let (lo, hi) = h.derive_range(m, IntRange::UINT8).unwrap();
        let (rmin, rmax) = h.running_range().unwrap();
        prop_assert!(lo <= hi);
        prop_assert!(rmin <= lo && hi <= rmax, "{lo} {hi} outside {rmin} {rmax}");
    }

    #[test]
    fn merge_matches_concatenation(a in any::<u64>(), b in any::<u64>(), q in 0.9f32..=1.0) {
        let (xa, xb) = (sample(a, 800, 1), sample(b, 800, 0));
        let mut ha = Histogram::new(DEFAULT_BINS);
        ha.observe(&xa).unwrap();
        let mut hb = Histogram::new(DEFAULT_BINS);
        hb.observe(&xb).unwrap();
        ha.merge(&hb);
        let mut hc = Histogram::new(DEFAULT_BINS);
        hc.observe(&xa).unwrap();
        hc.observe(&xb).unwrap();
        prop_assert_eq!(ha.total(), hc.total());
        prop_assert_eq!(ha.running_range(), hc.running_range());
        let width = |h: &Histogram| (h.bounds().1 - h.bounds().0) / h.bins() as f64;
        let tol = width(&ha).max(width(&hc));
        let m = RangeMethod::Percentile { q };
        let (l1, h1) = ha.derive_range(m, IntRange::UINT8).unwrap();
        let (l2, h2) = hc.derive_range(m, IntRange::UINT8).unwrap();
        prop_assert!((l1 as f64 - l2 as f64).abs() <= tol + 1e-6, "{l1} vs {l2}, width {tol}");
        prop_assert!((h1 as f64 - h2 as f64).abs() <= tol + 1e-6, "{h1} vs {h2}, width {tol}");
    }
}

#[test]
fn calibration_is_independent_of_execution_strategy() {
    let g = common::small_model(5);
    let data = common::data(&g, 700, 6);
    let seq = calibrate(&g, &data, 256, Exec::Sequential).unwrap();
    let par = calibrate(&g, &data, 256, Exec::Parallel).unwrap();
    assert_eq!(seq, par);
    let wanted = calibration_tensors(&g);
    assert_eq!(seq.histograms.keys().cloned().collect::<std::collections::BTreeSet<_>>(), wanted);
    for h in seq.histograms.values() {
        assert_eq!(h.total() % 700, 0);
    }
}

#[test]
fn calibration_roundtrips_through_file() {
    let g = common::small_model(5);
    let data = common::data(&g, 300, 6);
    let c = calibrate(&g, &data, 128, Exec::Sequential).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("calib.json");
    c.save(&p).unwrap();
    assert_eq!(lpq::calib::Calibration::load(&p).unwrap(), c);
}

#[test]
fn empty_calibration_set_is_rejected() {
    let g = common::small_model(5);
    assert!(matches!(
        calibrate(&g, &[], 128, Exec::Sequential),
        Err(lpq::Error::Data(_))
    ));
}
