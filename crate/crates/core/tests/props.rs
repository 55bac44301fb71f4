use cordic_rpe::cordic::{encode_weight, linear_mac_prescaled, mac_encoded};
use cordic_rpe::fxp::{FxpFormat, FxpValue, RoundingMode};
use cordic_rpe::rpe::{AfKind, Rpe, RpeConfig};
use cordic_rpe::sycore::{map_layer, ArrayConfig, LayerSpec, PruningSpec};
use proptest::prelude::*;

fn format() -> impl Strategy<Value = FxpFormat> {
    prop_oneof![Just(FxpFormat::Q8_4), Just(FxpFormat::Q16_8), Just(FxpFormat::Q32_16)]
}

fn raw_in(f: FxpFormat) -> impl Strategy<Value = i64> {
    f.min_raw()..=f.max_raw()
}

proptest! {
    #[test]
    fn add_saturates_to_the_exact_sum(f in format(), a in any::<i64>(), b in any::<i64>()) {
        let clamp = |v: i64| v.clamp(f.min_raw(), f.max_raw());
        let (x, y) = (FxpValue::from_raw(clamp(a), f).unwrap(), FxpValue::from_raw(clamp(b), f).unwrap());
        let want = (x.raw() as i128 + y.raw() as i128).clamp(f.min_raw() as i128, f.max_raw() as i128) as i64;
        prop_assert_eq!(x.add(y).unwrap().raw(), want);
    }

    #[test]
    fn quantize_round_trips(f in format(), r in any::<i64>()) {
        let r = r.clamp(f.min_raw(), f.max_raw());
        let v = FxpValue::from_raw(r, f).unwrap();
        for mode in [RoundingMode::Truncate, RoundingMode::NearestEven] {
            prop_assert_eq!(FxpValue::quantize(v.to_real(), f, mode).raw(), r);
        }
    }

    #[test]
    fn truncation_never_rounds_up(f in format(), x in -1000.0f64..1000.0) {
        let q = FxpValue::quantize(x, f, RoundingMode::Truncate);
        if x > f.min_value() && x < f.max_value() {
            prop_assert!(q.to_real() <= x && x - q.to_real() < f.ulp());
        }
    }

    #[test]
    fn encoded_mac_is_the_rotation((x, w, b) in (raw_in(FxpFormat::Q16_8), raw_in(FxpFormat::Q16_8), raw_in(FxpFormat::Q16_8)), n in 1u32..24) {
        let f = FxpFormat::Q16_8;
        let v = |r| FxpValue::from_raw(r, f).unwrap();
        let (want, ws) = linear_mac_prescaled(v(x), v(w), v(b), n as usize).unwrap();
        let got = mac_encoded(b, x, encode_weight(w, n, f.frac_bits()), n, f.min_raw(), f.max_raw());
        prop_assert_eq!(got, (want.raw(), ws));
    }

    #[test]
    fn softmax_sums_to_one(xs in prop::collection::vec(-2048i64..2048, 1..12)) {
        let f = FxpFormat::Q16_8;
        let u = Rpe::new(RpeConfig { af: AfKind::Softmax, softmax_len: xs.len(), ..RpeConfig::default().with_format(f).with_iterations(12) }).unwrap();
        let p = u.softmax(&xs.iter().map(|&r| FxpValue::from_raw(r, f).unwrap()).collect::<Vec<_>>()).unwrap().probs;
        let s: f64 = p.iter().map(|v| v.to_real()).sum();
        prop_assert!(p.iter().all(|v| v.raw() >= 0));
        prop_assert!((s - 1.0).abs() <= xs.len() as f64 * f.ulp(), "sum {}", s);
    }

    #[test]
    fn mapping_conserves_macs(k in prop::sample::select(vec![1usize, 3, 5]), cin in 1usize..16, cout in 1usize..80, hw in 1usize..70, fc in any::<bool>()) {
        let l = if fc { LayerSpec::fc("f", cin * 7, cout * 13) } else { LayerSpec::conv("c", k, cin, cout, hw, hw).with_pad(k / 2) };
        let a = ArrayConfig::default();
        let e = map_layer(&l, &a).unwrap();
        prop_assert_eq!(e.scheduled_macs, l.macs());
        // no schedule beats every RPE busy on every cycle
        prop_assert!(e.op_cycles * a.rpes() as u64 >= l.macs());
        prop_assert!(e.utilization_pct > 0.0 && e.utilization_pct <= 100.0);
    }

    #[test]
    fn pruning_keeps_the_complement(num in 0u64..20, extra in 1u64..20, n in 0u64..10_000) {
        let p = PruningSpec::ratio(num, num + extra).unwrap();
        let kept = p.kept(n);
        prop_assert_eq!(kept, n - n * num / (num + extra));
        prop_assert!(p.kept(n + 1) >= kept);
    }
}
