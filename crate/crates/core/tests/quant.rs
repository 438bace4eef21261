use lpq::embedding::{EmbeddingTable, TableFormat};
use lpq::quant::{
    compute_qparams, compute_row_params, dequantize, dequantize_row, pack_int4, quantize, quantize_row,
    quantize_weights, unpack_int4, Granularity, IntRange, RangeMethod,
};
use proptest::prelude::*;

fn ulp(x: f32) -> f64 {
    let a = x.abs();
    (f32::from_bits(a.to_bits() + 1) - a) as f64
}

fn ranges() -> impl Strategy<Value = IntRange> {
    prop_oneof![
        Just(IntRange::UINT8),
        Just(IntRange::INT8),
        Just(IntRange::UINT4),
        Just(IntRange::INT4)
    ]
}

fn tensor() -> impl Strategy<Value = Vec<f32>> {
    (1usize..64, 0.01f32..100.0, -50.0f32..50.0).prop_flat_map(|(n, spread, center)| {
        prop::collection::vec((center - spread)..(center + spread), n)
    })
}

proptest! {
    #[test]
    fn roundtrip_within_half_step(x in tensor(), range in ranges()) {
        let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let p = compute_qparams(lo, hi, range);
        let back = dequantize(&quantize(&x, &p, range).unwrap(), &p);
        for (&v, &r) in x.iter().zip(&back) {
            let bound = p.scale as f64 / 2.0 + 2.0 * ulp(v).max(ulp(r));
            prop_assert!((v as f64 - r as f64).abs() <= bound, "{v} -> {r}, scale {}", p.scale);
        }
    }

    #[test]
    fn quantize_is_monotone(mut x in tensor(), range in ranges()) {
        x.sort_by(f32::total_cmp);
        let p = compute_qparams(x[0], x[x.len() - 1], range);
        let q = quantize(&x, &p, range).unwrap();
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn zero_is_exact(x in tensor(), range in ranges()) {
        let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let p = compute_qparams(lo, hi, range);
        let q = quantize(&[0.0], &p, range).unwrap();
        prop_assert_eq!(dequantize(&q, &p)[0], 0.0);
    }

    #[test]
    fn row_roundtrip_and_endpoints(row in tensor(), four in any::<bool>()) {
        let range = if four { IntRange::UINT4 } else { IntRange::UINT8 };
        let p = compute_row_params(&row, range).unwrap();
        let packed = quantize_row(&row, &p, range).unwrap();
        let back = dequantize_row(&packed, &p, range, row.len());
        for (&v, &r) in row.iter().zip(&back) {
            let bound = p.scale as f64 / 2.0 + 2.0 * ulp(v).max(ulp(r));
            prop_assert!((v as f64 - r as f64).abs() <= bound);
        }
        let (min_i, _) = row.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        let (max_i, &max) = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap();
        // Code 0 reconstructs the stored bias exactly.
        prop_assert_eq!(lpq::quant::dequantize_row_scalar(0, &p).to_bits(), p.bias.to_bits());
        if !four || lpq::numerics::Half::from_f32(row[min_i]).to_f32() == row[min_i] {
            prop_assert_eq!(back[min_i].to_bits(), row[min_i].to_bits());
        }
        if !four {
            let span_ulp = ulp(row[min_i].abs().max(max.abs()));
            prop_assert!((back[max_i] as f64 - max as f64).abs() <= 2.0 * span_ulp);
        }
    }

    #[test]
    fn per_channel_is_per_tensor_per_slice(
        n in 1usize..12,
        k in 1usize..8,
        seed in any::<u64>(),
        pct in any::<bool>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f32> = (0..n * k).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let method = if pct { RangeMethod::Percentile { q: 0.9 } } else { RangeMethod::MinMax };
        let pc = quantize_weights(&w, n, k, Granularity::PerChannel, method).unwrap();
        for j in 0..k {
            let col: Vec<f32> = (0..n).map(|t| w[t * k + j]).collect();
            let pt = quantize_weights(&col, n, 1, Granularity::PerTensor, method).unwrap();
            prop_assert!(pt.params[0].same_as(&pc.params[j]));
            for t in 0..n {
                prop_assert_eq!(pc.data[t * k + j], pt.data[t]);
            }
        }
    }

    #[test]
    fn int4_pack_bijection(nibbles in prop::collection::vec(0u8..16, 0..200)) {
        let packed = pack_int4(&nibbles);
        prop_assert_eq!(packed.len(), nibbles.len().div_ceil(2));
        prop_assert_eq!(unpack_int4(&packed, nibbles.len()), nibbles.clone());
        if nibbles.len() % 2 == 0 {
            prop_assert_eq!(pack_int4(&unpack_int4(&packed, nibbles.len())), packed);
        }
    }

    #[test]
    fn table_storage_bytes(rows in 1usize..40, dim in 1usize..20, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let v: Vec<f32> = (0..rows * dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let t = EmbeddingTable::from_f32(rows, dim, &v).unwrap();
        prop_assert_eq!(t.quantize(TableFormat::Rowwise8).unwrap().storage_bytes(), rows * (dim + 8));
        prop_assert_eq!(t.quantize(TableFormat::Rowwise4).unwrap().storage_bytes(), rows * (dim.div_ceil(2) + 4));
    }
}
