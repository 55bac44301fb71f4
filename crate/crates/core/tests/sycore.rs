use std::path::Path;

use cordic_rpe::sycore::{
    load_network, map_layer, map_layer_pruned, parse_network, schedule_network, simulate_cycles, ArrayConfig, LayerSpec, PruningSpec, SycoreError,
};

fn vgg() -> Vec<LayerSpec> {
    load_network(&Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/vgg16-cifar100.net")).unwrap()
}

#[test]
fn vgg16_op_cycles() {
    let r = schedule_network(&vgg(), &ArrayConfig::default(), None).unwrap();
    let cycles: Vec<u64> = r.entries.iter().filter(|e| !e.host).map(|e| e.op_cycles).collect();
    assert_eq!(
        cycles,
        [1728, 36864, 18432, 36864, 18432, 36864, 36864, 18432, 36864, 36864, 36864, 36864, 36864, 2048, 16384, 4096]
    );
    assert_eq!(r.total_op_cycles, cycles.iter().sum::<u64>());
}

#[test]
fn every_mac_is_scheduled_once() {
    let a = ArrayConfig::default();
    for l in vgg() {
        let e = map_layer(&l, &a).unwrap();
        if !e.host {
            assert_eq!(e.scheduled_macs, e.macs, "{}", l.name);
        }
    }
    // a map larger than the array is cut into strips
    let big = LayerSpec::conv("big", 3, 4, 5, 40, 50).with_pad(1);
    let e = map_layer(&big, &a).unwrap();
    assert_eq!(e.tiles, 2);
    assert_eq!(e.scheduled_macs, big.macs());
    assert_eq!(big.macs(), 9 * 4 * 5 * 40 * 50);
}

#[test]
fn table_rows() {
    let a = ArrayConfig::default();
    let c11 = map_layer(&LayerSpec::conv("C1_1", 3, 3, 64, 32, 32).with_pad(1), &a).unwrap();
    assert_eq!((c11.kmac_ops, c11.op_cycles, c11.utilization_pct), (1728, 1728, 100.0));
    let c21 = map_layer(&LayerSpec::conv("C2_1", 3, 64, 128, 16, 16).with_pad(1), &a).unwrap();
    assert_eq!((c21.op_cycles, c21.utilization_pct), (18432, 100.0));
    let fc6 = map_layer(&LayerSpec::fc("FC6", 512, 4096), &a).unwrap();
    assert_eq!((fc6.op_cycles, fc6.active_rpes, fc6.mapped_grid), (2048, 1024, (32, 32)));
    let fc8 = map_layer(&LayerSpec::fc("FC8", 4096, 100), &a).unwrap();
    assert_eq!((fc8.op_cycles, fc8.mapped_grid), (4096, (16, 16)));
}

#[test]
fn unit_layer() {
    let a = ArrayConfig::default();
    let l = LayerSpec::conv("u", 1, 1, 1, 1, 1);
    let e = map_layer(&l, &a).unwrap();
    assert_eq!(e.op_cycles, 1);
    assert_eq!(e.utilization_pct, 100.0 / 1024.0);
    let s = simulate_cycles(&l, &a).unwrap();
    assert_eq!(s.measured_cycles, s.analytic_cycles + 4);
}

#[test]
fn empty_pruning_is_identity() {
    let a = ArrayConfig::default();
    let base = schedule_network(&vgg(), &a, None).unwrap();
    let zero = schedule_network(&vgg(), &a, Some(PruningSpec::ratio(0, 9).unwrap())).unwrap();
    assert_eq!(base, zero);
}

#[test]
fn four_of_nine_on_uniform_network() {
    let text = "# 3x3 convs only\n\
                a conv k=3 cin=8 cout=16 h=16 w=16 pad=1\n\
                b conv k=3 cin=16 cout=32 h=16 w=16 pad=1\n\
                c conv k=3 cin=32 cout=32 h=8 w=8 pad=1\n";
    let layers = parse_network(text).unwrap();
    let a = ArrayConfig::default();
    let full = schedule_network(&layers, &a, None).unwrap();
    let cut = schedule_network(&layers, &a, Some("4:9".parse().unwrap())).unwrap();
    assert_eq!((full.total_scheduled_macs - cut.total_scheduled_macs) * 9, full.total_scheduled_macs * 4);
    assert_eq!(cut.total_op_cycles * 9, full.total_op_cycles * 5);
    assert_eq!(full.total_macs, cut.total_macs);
}

#[test]
fn pruning_parse_forms() {
    for (s, num, den) in [("4:9", 4, 9), ("40%", 2, 5), ("0.4", 2, 5), ("0", 0, 1)] {
        let p: PruningSpec = s.parse().unwrap();
        assert_eq!((p.num, p.den), (num, den), "{s}");
    }
    for bad in ["9:4", "x", "120%", "1:0"] {
        assert!(bad.parse::<PruningSpec>().is_err(), "{bad}");
    }
    assert_eq!(PruningSpec::ratio(4, 9).unwrap().kept(9), 5);
}

#[test]
fn bigger_array_never_slower() {
    let c11 = LayerSpec::conv("C1_1", 3, 3, 64, 32, 32).with_pad(1);
    let small = map_layer(&c11, &ArrayConfig::default()).unwrap();
    let big = map_layer(&c11, &ArrayConfig::new(64, 64, 4, 4).unwrap()).unwrap();
    assert!(big.op_cycles <= small.op_cycles);
    for l in vgg() {
        let s = map_layer(&l, &ArrayConfig::default()).unwrap();
        let b = map_layer(&l, &ArrayConfig::new(64, 64, 4, 4).unwrap()).unwrap();
        assert!(b.op_cycles <= s.op_cycles, "{}", l.name);
    }
}

#[test]
fn reduced_c1_1_simulation() {
    let l = LayerSpec::conv("C1_1s", 3, 3, 8, 8, 8).with_pad(1);
    let a = ArrayConfig::default();
    let s = simulate_cycles(&l, &a).unwrap();
    // frozen from the first run
    assert_eq!((s.analytic_cycles, s.measured_cycles), (27, 31));
    assert_eq!(s.products, l.macs());
    assert_eq!(s.subblock_events.iter().sum::<u64>(), s.products);
}

#[test]
fn pruned_layer_keeps_five_ninths() {
    let l = LayerSpec::conv("p", 3, 4, 6, 8, 8).with_pad(1);
    let a = ArrayConfig::default();
    let e = map_layer_pruned(&l, &a, Some("4:9".parse().unwrap())).unwrap();
    assert_eq!(e.scheduled_macs * 9, l.macs() * 5);
}

#[test]
fn simulation_budget() {
    let l = LayerSpec::conv("huge", 3, 512, 512, 32, 32).with_pad(1);
    assert!(matches!(simulate_cycles(&l, &ArrayConfig::default()), Err(SycoreError::TooLarge { .. })));
}

#[test]
fn network_file_errors() {
    let err = parse_network("a conv k=3 cin=3 cout=4 h=8 w=8\nb conv k=3 cin=x\n").unwrap_err();
    assert!(matches!(err, SycoreError::Parse { line: 2, .. }), "{err}");
    assert!(matches!(parse_network("a blob k=1"), Err(SycoreError::Parse { line: 1, .. })));
    assert!(matches!(parse_network("# nothing\n"), Err(SycoreError::EmptyNetwork)));
    assert!(matches!(load_network(Path::new("/nonexistent.net")), Err(SycoreError::Io { .. })));
    assert!(ArrayConfig::new(30, 32, 4, 4).is_err());
}

#[test]
fn csv_has_header_and_total() {
    let r = schedule_network(&vgg(), &ArrayConfig::default(), None).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert!(lines[0].starts_with("layer,"));
    assert!(lines.last().unwrap().starts_with("total,"));
    assert_eq!(lines.len(), 1 + r.entries.len() + 1);
}
