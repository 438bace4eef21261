#![allow(dead_code)]

use lpq::dataset::LabeledSample;
use lpq::datagen::{gen_dataset, gen_model, DataGenConfig, ModelGenConfig};
use lpq::graph::ModelGraph;
use lpq::Exec;

pub fn small_config(seed: u64) -> ModelGenConfig {
    ModelGenConfig {
        dense_dim: 8,
        table_rows: vec![40, 120, 300],
        embedding_dim: 8,
        bottom: vec![16, 8],
        top: vec![32, 16, 1],
        seed,
        ..ModelGenConfig::default()
    }
}

pub fn small_model(seed: u64) -> ModelGraph {
    gen_model(&small_config(seed)).unwrap()
}

pub fn data(g: &ModelGraph, n: usize, seed: u64) -> Vec<LabeledSample> {
    let cfg = DataGenConfig {
        n,
        seed,
        ..DataGenConfig::default()
    };
    gen_dataset(g, &cfg, Exec::Sequential).unwrap()
}

/// Decode binary16 bits with integer arithmetic only.
pub fn half_bits_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1F) as i32;
    let man = (bits & 0x3FF) as f64;
    match exp {
        0 => sign * man * 2f64.powi(-24),
        31 if man == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1024.0 + man) * 2f64.powi(exp - 25),
    }
}

/// Round to binary16 by searching the sorted table of finite positive
/// values; ties go to the even bit pattern. `None` means overflow.
pub struct HalfOracle {
    values: Vec<f64>,
}

impl HalfOracle {
    pub fn new() -> HalfOracle {
        HalfOracle {
            values: (0u16..0x7C00).map(half_bits_to_f64).collect(),
        }
    }

    /// IEEE round-to-nearest-even of `x` into binary16 bits.
    pub fn round(&self, x: f64) -> u16 {
        let sign: u16 = if x.is_sign_negative() { 0x8000 } else { 0 };
        let a = x.abs();
        let max = *self.values.last().unwrap();
        // Halfway between 65504 and the next binade step (65536) overflows.
        if a >= max + 16.0 {
            return sign | 0x7C00;
        }
        let i = self.values.partition_point(|&v| v <= a);
        if i == 0 {
            return sign;
        }
        let lo = i - 1;
        if lo == self.values.len() - 1 {
            return sign | lo as u16;
        }
        let (dl, dh) = (a - self.values[lo], self.values[lo + 1] - a);
        let pick = if dl < dh {
            lo
        } else if dh < dl {
            lo + 1
        } else if lo % 2 == 0 {
            lo
        } else {
            lo + 1
        };
        sign | pick as u16
    }
}
