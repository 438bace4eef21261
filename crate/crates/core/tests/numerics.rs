mod common;

use common::{half_bits_to_f64, HalfOracle};
use lpq::numerics::{from_half, to_half, Half, HalfPolicy, NanPolicy, OverflowPolicy, SubnormalPolicy};
use proptest::prelude::*;

fn policy(subnormal: SubnormalPolicy) -> HalfPolicy {
    HalfPolicy {
        subnormal,
        ..HalfPolicy::IEEE
    }
}

#[test]
fn every_half_roundtrips() {
    for bits in 0u16..=u16::MAX {
        let h = Half::from_bits(bits);
        let wide = from_half(h);
        if h.is_nan() {
            assert!(wide.is_nan());
            continue;
        }
        assert_eq!(wide as f64, half_bits_to_f64(bits), "decode {bits:#06x}");
        assert_eq!(to_half(wide as f64, HalfPolicy::IEEE).unwrap().to_bits(), bits);
    }
}

#[test]
fn matches_table_oracle_near_boundaries() {
    let oracle = HalfOracle::new();
    // Midpoints between neighbours are the hardest inputs for rounding.
    for bits in 0u16..0x7BFF {
        let a = half_bits_to_f64(bits);
        let b = half_bits_to_f64(bits + 1);
        for x in [(a + b) / 2.0, a + (b - a) * 0.499, a + (b - a) * 0.501] {
            let x32 = x as f32;
            let got = Half::from_f32_with(x32, HalfPolicy::IEEE).to_bits();
            assert_eq!(got, oracle.round(x32 as f64), "x = {x32:e}");
        }
    }
}

#[test]
fn overflow_and_saturation() {
    assert_eq!(Half::from_f32(65520.0).to_f32(), 65504.0);
    assert!(Half::from_f32_with(65520.0, HalfPolicy::IEEE).is_infinite());
    assert_eq!(Half::from_f32_with(65519.0, HalfPolicy::IEEE).to_f32(), 65504.0);
    assert_eq!(Half::from_f32(f32::INFINITY).to_f32(), 65504.0);
    assert_eq!(Half::from_f32(f32::NEG_INFINITY).to_f32(), -65504.0);
    let strict = HalfPolicy {
        nan: NanPolicy::Fail,
        ..HalfPolicy::DEFAULT
    };
    assert!(to_half(f64::NAN, strict).is_err());
    assert!(Half::from_f32(f32::NAN).is_nan());
}

proptest! {
    #[test]
    fn normal_range_half_ulp_bound(x in prop_oneof![
        2f32.powi(-14)..=65504f32,
        -65504f32..=-(2f32.powi(-14)),
    ]) {
        let back = from_half(Half::from_f32_with(x, HalfPolicy::IEEE)) as f64;
        prop_assert!((x as f64 - back).abs() <= 2f64.powi(-11) * (x as f64).abs());
    }

    #[test]
    fn saturate_never_infinite(x in any::<f32>().prop_filter("finite", |v| !v.is_nan())) {
        let p = HalfPolicy {
            overflow: OverflowPolicy::Saturate,
            ..HalfPolicy::IEEE
        };
        prop_assert!(!Half::from_f32_with(x, p).is_infinite());
    }

    #[test]
    fn subnormal_policies(m in 1u32..1024, neg in any::<bool>(), frac in 0.0f64..1.0) {
        // A value whose IEEE rounding lands on a nonzero subnormal.
        let x = (m as f64 - 0.5 + frac * 0.999) * 2f64.powi(-24);
        let x = if neg { -x } else { x };
        let ieee = to_half(x, HalfPolicy::IEEE).unwrap();
        prop_assume!(ieee.is_subnormal());
        let ftz = to_half(x, policy(SubnormalPolicy::FlushToZero)).unwrap();
        prop_assert_eq!(ftz.to_f32(), 0.0);
        prop_assert_eq!(ftz.to_f32().is_sign_negative(), neg);
        let mn = to_half(x, policy(SubnormalPolicy::SaturateToMinNormal)).unwrap();
        prop_assert_eq!(mn.to_f32().abs(), 2f32.powi(-14));
        prop_assert_eq!(mn.to_f32().is_sign_negative(), neg);
    }

    #[test]
    fn agrees_with_table_oracle(bits in any::<u32>()) {
        let x = f32::from_bits(bits);
        prop_assume!(x.is_finite());
        let oracle = ORACLE.with(|o| o.round(x as f64));
        prop_assert_eq!(Half::from_f32_with(x, HalfPolicy::IEEE).to_bits(), oracle);
    }
}

thread_local! {
    static ORACLE: HalfOracle = HalfOracle::new();
}
