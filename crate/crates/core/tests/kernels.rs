use lpq::embedding::{EmbeddingTable, TableFormat};
use lpq::kernels::{
    batch_matmul, fc_f16_compute, fc_f32, fc_int8, int8_accumulate, relu, sigmoid64, sls, AccumMode, BmmShape,
    Int8Output, Int8Weights, Lut, LutSpec,
};
use lpq::numerics::{Half, HalfPolicy};
use lpq::quant::{quantize_weights, Granularity, QuantParams, RangeMethod};
use lpq::tensor::{Matrix, QMatrix, SparseIds};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, amp: f32) -> Matrix {
    Matrix::new(rows, cols, (0..rows * cols).map(|_| r.random_range(-amp..amp)).collect()).unwrap()
}

fn qmatrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> QMatrix {
    QMatrix {
        rows,
        cols,
        data: (0..rows * cols).map(|_| r.random()).collect(),
        params: QuantParams::new(r.random_range(1e-3f32..0.1), r.random_range(0..=255)),
    }
}

/// Exact integer oracle: `sum_t (a - z_a) w` in i64.
fn int8_oracle(a: &QMatrix, w: &[i8], k: usize) -> Vec<i64> {
    let n = a.cols;
    let za = a.params.zero_point as i64;
    let mut out = vec![0i64; a.rows * k];
    for i in 0..a.rows {
        for j in 0..k {
            out[i * k + j] = (0..n)
                .map(|t| (a.data[i * n + t] as i64 - za) * w[t * k + j] as i64)
                .sum();
        }
    }
    out
}

fn col_sums(w: &[i8], n: usize, k: usize) -> Vec<i32> {
    (0..k).map(|j| (0..n).map(|t| w[t * k + j] as i32).sum()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn int8_integer_stage_is_exact(seed in any::<u64>(), rows in 1usize..6, n in 1usize..=1024, k in 1usize..12) {
        let mut r = rng(seed);
        let a = qmatrix(&mut r, rows, n);
        let w: Vec<i8> = (0..n * k).map(|_| r.random()).collect();
        let got = int8_accumulate(&a, &w, k, &col_sums(&w, n, k)).unwrap();
        let want = int8_oracle(&a, &w, k);
        prop_assert_eq!(got.iter().map(|&v| v as i64).collect::<Vec<_>>(), want);
    }

    #[test]
    fn fp32_fc_tracks_fp64(seed in any::<u64>(), rows in 1usize..5, n in 1usize..300, k in 1usize..10) {
        let mut r = rng(seed);
        let x = matrix(&mut r, rows, n, 2.0);
        let w = matrix(&mut r, n, k, 1.0).data;
        let b = matrix(&mut r, 1, k, 1.0).data;
        let y = fc_f32(&x, &w, &b, k, false).unwrap();
        for i in 0..rows {
            for j in 0..k {
                let terms: Vec<f64> = (0..n).map(|t| x.data[i * n + t] as f64 * w[t * k + j] as f64).collect();
                let exact = terms.iter().sum::<f64>() + b[j] as f64;
                let mag = terms.iter().map(|v| v.abs()).sum::<f64>() + (b[j] as f64).abs();
                let got = y.data[i * k + j] as f64;
                prop_assert!((got - exact).abs() <= 1e-5 * mag, "{got} vs {exact}");
            }
        }
    }

    #[test]
    fn bmm_tracks_fp64(seed in any::<u64>(), rows in 1usize..4, p in 1usize..6, q in 1usize..40, rr in 1usize..6, tb in any::<bool>()) {
        let mut r = rng(seed);
        let a = matrix(&mut r, rows, p * q, 3.0);
        let c = matrix(&mut r, rows, q * rr, 3.0);
        let s = BmmShape { p, q, r: rr, transpose_b: tb };
        let y = batch_matmul(&a, &c, s, None).unwrap();
        for b in 0..rows {
            for i in 0..p {
                for j in 0..rr {
                    let mut exact = 0.0f64;
                    let mut mag = 0.0f64;
                    for t in 0..q {
                        let cv = if tb { c.data[b * q * rr + j * q + t] } else { c.data[b * q * rr + t * rr + j] };
                        let v = a.data[b * p * q + i * q + t] as f64 * cv as f64;
                        exact += v;
                        mag += v.abs();
                    }
                    let got = y.data[b * p * rr + i * rr + j] as f64;
                    prop_assert!((got - exact).abs() <= 1e-5 * mag.max(f64::MIN_POSITIVE));
                }
            }
        }
    }

    #[test]
    fn fused_relu_matches_unfused(seed in any::<u64>(), n in 1usize..64, k in 1usize..16) {
        let mut r = rng(seed);
        let x = matrix(&mut r, 3, n, 2.0);
        let w = matrix(&mut r, n, k, 1.0).data;
        let b = matrix(&mut r, 1, k, 1.0).data;
        let fused = fc_f32(&x, &w, &b, k, true).unwrap();
        let unfused = relu(&fc_f32(&x, &w, &b, k, false).unwrap());
        prop_assert_eq!(fused, unfused);

        let qw = quantize_weights(&w, n, k, Granularity::PerChannel, RangeMethod::MinMax).unwrap();
        let offs = qw.column_offsets(n, k);
        let iw = Int8Weights { data: &qw.data, params: &qw.params, col_offsets: &offs };
        let a = qmatrix(&mut r, 3, n);
        let (Int8Output::F32(f), Int8Output::F32(u)) = (
            fc_int8(&a, &iw, &b, k, None, true).unwrap(),
            fc_int8(&a, &iw, &b, k, None, false).unwrap(),
        ) else { unreachable!() };
        prop_assert_eq!(f, relu(&u));
    }
}

#[test]
fn int8_large_shapes_are_exact() {
    let mut r = rng(7);
    for _ in 0..20 {
        let n = r.random_range(512..=1024);
        let k = r.random_range(1..8);
        let a = qmatrix(&mut r, 2, n);
        let w: Vec<i8> = (0..n * k).map(|_| r.random()).collect();
        let got = int8_accumulate(&a, &w, k, &col_sums(&w, n, k)).unwrap();
        let want = int8_oracle(&a, &w, k);
        assert!(got.iter().zip(&want).all(|(&g, &w)| g as i64 == w));
    }
}

#[test]
fn int8_dequantized_output_follows_integer_stage() {
    let mut r = rng(3);
    let (n, k) = (40, 6);
    let w = matrix(&mut r, n, k, 0.5).data;
    let b = matrix(&mut r, 1, k, 0.5).data;
    let qw = quantize_weights(&w, n, k, Granularity::PerTensor, RangeMethod::MinMax).unwrap();
    let offs = qw.column_offsets(n, k);
    let a = qmatrix(&mut r, 4, n);
    let iw = Int8Weights { data: &qw.data, params: &qw.params, col_offsets: &offs };
    let Int8Output::F32(y) = fc_int8(&a, &iw, &b, k, None, false).unwrap() else { unreachable!() };
    let acc = int8_oracle(&a, &qw.data, k);
    for (idx, &v) in acc.iter().enumerate() {
        let j = idx % k;
        let want = a.params.scale * qw.params[0].scale * v as f32 + b[j];
        assert_eq!(y.data[idx].to_bits(), want.to_bits());
    }
}

#[test]
fn fp32_accumulation_beats_fp16_in_aggregate() {
    let mut r = rng(11);
    let (n, k) = (512, 8);
    let x = matrix(&mut r, 16, n, 1.0);
    let wf = matrix(&mut r, n, k, 1.0).data;
    let w: Vec<Half> = wf.iter().map(|&v| Half::from_f32(v)).collect();
    let b = vec![0.0f32; k];
    let e32 = fc_f16_compute(&x, &w, &b, k, AccumMode::Fp32, HalfPolicy::DEFAULT, false).unwrap();
    let e16 = fc_f16_compute(&x, &w, &b, k, AccumMode::Fp16, HalfPolicy::DEFAULT, false).unwrap();
    let wide: Vec<f32> = w.iter().map(|h| h.to_f32()).collect();
    let mut err = (0.0f64, 0.0f64);
    for i in 0..16 {
        for j in 0..k {
            let exact: f64 = (0..n).map(|t| x.data[i * n + t] as f64 * wide[t * k + j] as f64).sum();
            err.0 += (e32.data[i * k + j] as f64 - exact).powi(2);
            err.1 += (e16.data[i * k + j] as f64 - exact).powi(2);
        }
    }
    assert!(err.0 < err.1, "fp32 {} fp16 {}", err.0, err.1);
}

#[test]
fn kernels_are_deterministic() {
    let mut r = rng(5);
    let x = matrix(&mut r, 8, 100, 1.0);
    let w = matrix(&mut r, 100, 10, 1.0).data;
    let b = vec![0.1f32; 10];
    let y1 = fc_f32(&x, &w, &b, 10, false).unwrap();
    let y2 = fc_f32(&x, &w, &b, 10, false).unwrap();
    assert_eq!(
        y1.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        y2.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn lut_sigmoid_sweep() {
    let lut = Lut::sigmoid(LutSpec::default()).unwrap();
    let points = 1_000_000;
    let mut worst = 0.0f64;
    for i in 0..points {
        let x = -16.0 + 32.0 * i as f64 / (points - 1) as f64;
        let x = x as f32;
        worst = worst.max((lut.eval(x) as f64 - sigmoid64(x as f64)).abs());
    }
    assert!(worst <= 1e-4, "max error {worst}");
}

#[test]
fn sls_sums_selected_rows() {
    let mut r = rng(9);
    let (rows, dim) = (30, 5);
    let vals: Vec<f32> = (0..rows * dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
    let t = EmbeddingTable::from_f32(rows, dim, &vals).unwrap();
    let lists: Vec<Vec<u32>> = vec![vec![0, 3, 3], vec![], vec![29]];
    let ids = SparseIds::from_lists(lists.iter().map(|l| l.as_slice()));
    let y = sls(&t, "t", &ids, false, HalfPolicy::DEFAULT).unwrap();
    for (s, l) in lists.iter().enumerate() {
        for c in 0..dim {
            let want: f32 = l.iter().fold(0.0, |acc, &id| acc + vals[id as usize * dim + c]);
            assert_eq!(y.data[s * dim + c].to_bits(), want.to_bits());
        }
    }
    let q = t.quantize(TableFormat::Rowwise8).unwrap();
    let yq = sls(&q, "t", &ids, false, HalfPolicy::DEFAULT).unwrap();
    assert!(y.data.iter().zip(&yq.data).all(|(a, b)| (a - b).abs() < 0.05));
    let bad = SparseIds::from_lists([[30u32].as_slice()]);
    assert!(sls(&t, "t", &bad, false, HalfPolicy::DEFAULT).is_err());
}
