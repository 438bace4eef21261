mod common;

use lpq::autoquant::{GlobalScheme, LayerAction, LayerOverride, QuantScheme};
use lpq::calib::calibrate;
use lpq::dataset::LabeledSample;
use lpq::debugger::corrupt_weight_scale;
use lpq::graph::transform::apply_scheme;
use lpq::graph::Op;
use lpq::metrics::{
    compare_ne, cross_entropies, graph_flops, normalized_entropy, per_layer_error, skipped_flops_ratio,
};
use lpq::{Error, Exec};
use proptest::prelude::*;

fn sample(label: u8, weight: f32) -> LabeledSample {
    LabeledSample {
        dense: vec![],
        sparse: vec![],
        label,
        weight,
    }
}

fn weighted_set() -> impl Strategy<Value = (Vec<LabeledSample>, Vec<f32>)> {
    prop::collection::vec((0u8..=1, 0.1f32..5.0, 0.0f32..1.0), 2..200)
        .prop_map(|v| {
            let mut s: Vec<LabeledSample> = v.iter().map(|&(l, w, _)| sample(l, w)).collect();
            s[0].label = 0;
            s[1].label = 1;
            let p = v.iter().map(|t| t.2).collect();
            (s, p)
        })
}

/// Weighted log loss in plain f64, natural log, clamped to [1e-7, 1 - 1e-7].
fn ce_oracle(p: f64, y: u8, w: f64) -> f64 {
    let p = p.max(1e-7).min(1.0 - 1e-7);
    if y == 1 {
        -w * p.ln()
    } else {
        -w * (1.0 - p).ln()
    }
}

#[test]
fn hand_example() {
    let s: Vec<LabeledSample> = [1, 1, 0, 0].iter().map(|&l| sample(l, 1.0)).collect();
    let r = normalized_entropy(&[0.8f64, 0.7, 0.3, 0.2], &s).unwrap();
    let num = -(0.8f64.ln() + 0.7f64.ln() + 0.7f64.ln() + 0.8f64.ln());
    assert!((r.numerator - num).abs() < 1e-12);
    assert!((r.denominator - 4.0 * 2f64.ln()).abs() < 1e-12);
    assert!((r.ne - 1.159637 / 2.772589).abs() < 1e-6, "{}", r.ne);
    let d = compare_ne(0.41900, 0.418248);
    assert!((d.ne_diff - 0.001798).abs() < 1e-6);
    assert!(compare_ne(1.0004, 1.0).passes(0.0005));
    assert!(!compare_ne(1.0006, 1.0).passes(0.0005));
}

#[test]
fn single_class_is_rejected() {
    let s = vec![sample(1, 1.0), sample(1, 2.0)];
    assert!(matches!(normalized_entropy(&[0.5f64, 0.5], &s), Err(Error::SingleClass)));
}

#[test]
fn near_perfect_predictor_approaches_zero() {
    let s: Vec<LabeledSample> = (0..100).map(|i| sample((i % 2) as u8, 1.0)).collect();
    let p: Vec<f64> = s.iter().map(|x| x.label as f64).collect();
    assert!(normalized_entropy(&p, &s).unwrap().ne < 1e-5);
}

proptest! {
    #[test]
    fn constant_predictor_has_unit_ne((s, _) in weighted_set()) {
        let pos: f64 = s.iter().filter(|x| x.label == 1).map(|x| x.weight as f64).sum();
        let total: f64 = s.iter().map(|x| x.weight as f64).sum();
        let p = vec![pos / total; s.len()];
        let r = normalized_entropy(&p, &s).unwrap();
        prop_assert!((r.ne - 1.0).abs() <= 1e-12, "{}", r.ne);
    }

    #[test]
    fn numerator_is_the_sum_of_sample_losses((s, p) in weighted_set()) {
        let r = normalized_entropy(&p, &s).unwrap();
        let ce = cross_entropies(&p, &s);
        let mut sum = 0.0;
        for (c, (x, &pi)) in ce.iter().zip(s.iter().zip(&p)) {
            prop_assert_eq!(c.to_bits(), ce_oracle(pi as f64, x.label, x.weight as f64).to_bits());
            sum += c;
        }
        prop_assert_eq!(r.numerator.to_bits(), sum.to_bits());
    }

    #[test]
    fn ne_is_invariant_to_weight_rescaling((s, p) in weighted_set(), k in prop_oneof![Just(0.5f32), Just(2.0f32), Just(4.0f32)]) {
        let scaled: Vec<LabeledSample> = s.iter().map(|x| sample(x.label, x.weight * k)).collect();
        let a = normalized_entropy(&p, &s).unwrap().ne;
        let b = normalized_entropy(&p, &scaled).unwrap().ne;
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn ne_diff_sign_follows_direction(a in 0.1f64..2.0, b in 0.1f64..2.0) {
        let d = compare_ne(a, b).ne_diff;
        prop_assert_eq!(d > 0.0, a > b);
        prop_assert!((d - (a - b) / b).abs() <= 1e-15 * d.abs().max(1.0));
    }
}

#[test]
fn layer_errors_vanish_for_unquantized_layers_and_flag_faults() {
    let g = common::small_model(21);
    let data = common::data(&g, 500, 22);
    let self_err = per_layer_error(&g, &g, &data, Exec::Parallel).unwrap();
    assert!(!self_err.is_empty());
    assert!(self_err.iter().all(|e| e.error == 0.0));

    let cal = calibrate(&g, &data, 512, Exec::Parallel).unwrap();
    let mut scheme = QuantScheme::new(GlobalScheme {
        fallback: lpq::autoquant::FallbackPrecision::Fp32,
        ..GlobalScheme::default()
    });
    scheme.overrides.push(LayerOverride {
        node: "top0".into(),
        action: LayerAction::Skip,
    });
    let q = apply_scheme(&g, &scheme, &cal).unwrap();
    let errs = per_layer_error(&q, &g, &data, Exec::Parallel).unwrap();
    // A layer left in fp32 reproduces its twin exactly on the same operands.
    assert_eq!(errs.iter().find(|e| e.node == "top0").unwrap().error, 0.0);
    assert!(errs.iter().any(|e| e.error > 0.0));

    let bad = corrupt_weight_scale(&q, "bot1", 4.0).unwrap();
    let errs = per_layer_error(&bad, &g, &data, Exec::Parallel).unwrap();
    let worst = errs.iter().max_by(|a, b| a.error.total_cmp(&b.error)).unwrap();
    assert_eq!(worst.node, "bot1");
}

#[test]
fn flops_follow_layer_shapes() {
    let g = common::small_model(1);
    let mut want = 0.0;
    for n in &g.nodes {
        match &n.op {
            Op::FullyConnected(a) | Op::FcRelu(a) => want += 2.0 * (a.in_dim * a.out_dim) as f64,
            Op::BatchMatMul(s) => want += 2.0 * (s.p * s.q * s.r) as f64,
            _ => {}
        }
    }
    assert_eq!(graph_flops(&g, 1), want);
    assert_eq!(graph_flops(&g, 64), 64.0 * want);

    let mut scheme = QuantScheme::new(GlobalScheme::default());
    assert_eq!(skipped_flops_ratio(&g, &scheme), 0.0);
    let fcs: Vec<(String, f64)> = g
        .nodes
        .iter()
        .filter_map(|n| n.op.fc().map(|a| (n.name.clone(), (a.in_dim * a.out_dim) as f64)))
        .collect();
    let total: f64 = fcs.iter().map(|f| f.1).sum();
    scheme.overrides.push(LayerOverride {
        node: fcs[1].0.clone(),
        action: LayerAction::Skip,
    });
    assert!((skipped_flops_ratio(&g, &scheme) - fcs[1].1 / total).abs() < 1e-15);
}
