use std::io::Write;
use std::path::{Path, PathBuf};

use cordic_rpe::fxp::{FxpFormat, RoundingMode};
use cordic_rpe::netrun::{
    cordic_layer_outputs, infer, load_idx, load_mnist, load_model, parse_idx, prune_model, quantize_model, reference_layer_outputs, InferConfig, Layer,
    Model, NetrunError, Tensor,
};
use cordic_rpe::rpe::AfKind;
use cordic_rpe::sycore::{LayerSpec, PruningSpec};
use flate2::write::GzEncoder;

fn fixture(p: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(p)
}

fn idx(dims: &[u32], data: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, dims.len() as u8];
    for d in dims {
        b.extend_from_slice(&d.to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

#[test]
fn idx_header_errors() {
    let e = parse_idx(&[0, 1, 8, 1, 0, 0, 0, 0], "x").unwrap_err();
    assert!(matches!(e, NetrunError::Format { offset: 0, .. }), "{e}");
    let e = parse_idx(&[0, 0, 0x0d, 1, 0, 0, 0, 0], "x").unwrap_err();
    assert!(matches!(e, NetrunError::Format { offset: 2, .. }), "{e}");
    let mut b = idx(&[3, 2, 2], &[0; 12]);
    b.truncate(10);
    let e = parse_idx(&b, "imgs").unwrap_err();
    assert!(matches!(e, NetrunError::Truncated { expected: 16, actual: 10, .. }), "{e}");
    let b = idx(&[3, 2, 2], &[0; 11]);
    let e = parse_idx(&b, "imgs").unwrap_err();
    assert!(matches!(e, NetrunError::Truncated { expected: 28, actual: 27, .. }));
    assert!(e.to_string().contains("imgs") && e.to_string().contains("28") && e.to_string().contains("27"));
    assert!(matches!(parse_idx(&idx(&[2], &[0; 3]), "x"), Err(NetrunError::Format { .. })));
}

#[test]
fn zero_images_and_gzip() {
    let dir = tempfile::tempdir().unwrap();
    let im = dir.path().join("im.gz");
    let mut gz = GzEncoder::new(std::fs::File::create(&im).unwrap(), flate2::Compression::default());
    gz.write_all(&idx(&[2, 3, 3], &[0; 18])).unwrap();
    gz.finish().unwrap();
    let lb = dir.path().join("lb");
    std::fs::write(&lb, idx(&[2], &[4, 7])).unwrap();
    let (t, l) = load_mnist(&im, &lb).unwrap();
    assert_eq!(t.shape(), &[2, 1, 3, 3]);
    assert!(t.data().iter().all(|v| *v == 0.0));
    assert_eq!(l, [4, 7]);

    std::fs::write(&lb, idx(&[3], &[4, 7, 1])).unwrap();
    assert!(matches!(load_mnist(&im, &lb), Err(NetrunError::LabelCount(2, 3))));
    std::fs::write(&lb, idx(&[2], &[4, 12])).unwrap();
    assert!(matches!(load_mnist(&im, &lb), Err(NetrunError::Format { .. })));
    let e = load_idx(&dir.path().join("missing")).unwrap_err();
    assert!(e.to_string().contains("missing"));
}

#[test]
fn mnist_fixture_shape() {
    let (t, l) = load_mnist(&fixture("mnist/t10k-images-idx3-ubyte.gz"), &fixture("mnist/t10k-labels-idx1-ubyte.gz")).unwrap();
    assert_eq!(t.shape(), &[10_000, 1, 28, 28]);
    assert_eq!(l.len(), 10_000);
    assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

fn fc_model(cin: usize, cout: usize, weights: Vec<f64>, bias: Vec<f64>, af: AfKind) -> Model {
    let mut spec = LayerSpec::fc("fc", cin, cout);
    spec.af = af;
    Model::new("t", (cin, 1, 1), vec![Layer { spec, weights, bias }]).unwrap()
}

/// Weight 1.0 with `n` +-1 digits: the first two steps go up, the rest come back down,
/// so the product is `x + x/2 - x/4 - ... - x/2^(n-1)` with every shift truncated.
fn unit_weight_product(x_raw: i64, n: u32) -> i64 {
    x_raw + (x_raw >> 1) - (2..n).map(|j| x_raw >> j).sum::<i64>()
}

#[test]
fn unit_fc_matches_shift_and_add() {
    let n = 4;
    let eye = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let m = fc_model(n, n, eye, vec![0.0; n], AfKind::Relu);
    let x = [0.3, 1.7, 0.0, 5.55];
    let cfg = InferConfig::cordic(FxpFormat::Q8_4, 5);
    let out = cordic_layer_outputs(&m, &x, &cfg).unwrap();
    let want: Vec<f64> = x.iter().map(|v| unit_weight_product((v * 16.0f64).floor() as i64, 5) as f64 / 16.0).collect();
    assert_eq!(out.last().unwrap(), &want);
    assert_eq!(want, [0.3125, 1.875, 0.0, 5.875]);
    assert_eq!(reference_layer_outputs(&m, &x).last().unwrap(), &x.to_vec());
}

#[test]
fn unit_conv_1x1() {
    let spec = LayerSpec::conv("c", 1, 1, 1, 3, 3);
    let m = Model::new("c", (1, 3, 3), vec![Layer { spec, weights: vec![1.0], bias: vec![0.0] }]).unwrap();
    let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.5).collect();
    let out = cordic_layer_outputs(&m, &x, &InferConfig::cordic(FxpFormat::Q16_8, 8)).unwrap();
    let want: Vec<f64> = x.iter().map(|v| unit_weight_product((v * 256.0) as i64, 8) as f64 / 256.0).collect();
    assert_eq!(out.last().unwrap(), &want);
    // 0.5 comes out one ULP high
    assert_eq!(want[1], 129.0 / 256.0);
}

#[test]
fn quantization_truncates() {
    let m = fc_model(1, 1, vec![1.0 / 3.0], vec![100.0], AfKind::None);
    let q = quantize_model(&m, FxpFormat::Q8_4, RoundingMode::Truncate);
    assert_eq!(q.layers[0].weights, [5]);
    assert_eq!(q.layers[0].bias, [127]);
    assert_eq!(q.stats[0].saturated, 1);
}

#[test]
fn pruning_examples() {
    let m = fc_model(4, 1, vec![1.0, -2.0, 0.5, 3.0], vec![0.0], AfKind::None);
    let p = prune_model(&m, "0.5".parse().unwrap());
    assert_eq!(p.layers[0].weights, [0.0, -2.0, 0.0, 3.0]);
    assert_eq!(prune_model(&m, PruningSpec::ratio(0, 1).unwrap()), m);
    // ties go to the lower index
    let m = fc_model(4, 1, vec![1.0, -1.0, 1.0, 2.0], vec![0.0], AfKind::None);
    assert_eq!(prune_model(&m, "0.5".parse().unwrap()).layers[0].weights, [0.0, 0.0, 1.0, 2.0]);
}

#[test]
fn shape_mismatch_rejected() {
    let spec = LayerSpec::fc("fc", 3, 2);
    let e = Model::new("bad", (4, 1, 1), vec![Layer { spec: spec.clone(), weights: vec![0.0; 6], bias: vec![0.0; 2] }]).unwrap_err();
    assert!(matches!(e, NetrunError::Shape { .. }), "{e}");
    let e = Model::new("bad", (3, 1, 1), vec![Layer { spec, weights: vec![0.0; 5], bias: vec![0.0; 2] }]).unwrap_err();
    assert!(matches!(e, NetrunError::Shape { .. }), "{e}");
}

#[test]
fn manifest_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    std::fs::write(&p, "{\"name\": 1}").unwrap();
    assert!(matches!(load_model(&p), Err(NetrunError::Manifest(_))));
    let text = std::fs::read_to_string(fixture("lenet5/manifest.json")).unwrap();
    std::fs::write(&p, text).unwrap();
    std::fs::write(dir.path().join("lenet5.bin"), [0u8; 64]).unwrap();
    assert!(matches!(load_model(&p), Err(NetrunError::Manifest(_))));
}

fn subset(t: &Tensor, lo: usize, hi: usize) -> Tensor {
    let per: usize = t.shape()[1..].iter().product();
    let mut shape = t.shape().to_vec();
    shape[0] = hi - lo;
    Tensor::new(shape, t.data()[lo * per..hi * per].to_vec()).unwrap()
}

#[test]
fn lenet_runs_are_deterministic() {
    let m = load_model(&fixture("lenet5/manifest.json")).unwrap();
    let (im, lb) = load_mnist(&fixture("mnist/t10k-images-idx3-ubyte.gz"), &fixture("mnist/t10k-labels-idx1-ubyte.gz")).unwrap();
    let (im, lb) = (subset(&im, 0, 300), &lb[..300]);
    let cfg = InferConfig::cordic(FxpFormat::Q8_4, 5);
    let (p1, r1) = infer(&m, &im, lb, &cfg).unwrap();
    let (p2, r2) = infer(&m, &im, lb, &cfg).unwrap();
    assert_eq!((p1.clone(), r1), (p2, r2));
    let (a, _) = infer(&m, &subset(&im, 0, 120), &lb[..120], &cfg).unwrap();
    let (b, _) = infer(&m, &subset(&im, 120, 300), &lb[120..], &cfg).unwrap();
    assert_eq!([a, b].concat(), p1);
}

#[test]
fn lenet_goldens_first_thousand() {
    let m = load_model(&fixture("lenet5/manifest.json")).unwrap();
    assert_eq!(m.weight_count(), 150 + 2400 + 48000 + 10080 + 840);
    let (im, lb) = load_mnist(&fixture("mnist/t10k-images-idx3-ubyte.gz"), &fixture("mnist/t10k-labels-idx1-ubyte.gz")).unwrap();
    let (im, lb) = (subset(&im, 0, 1000), &lb[..1000]);
    let (_, r) = infer(&m, &im, lb, &InferConfig::reference()).unwrap();
    let (_, c) = infer(&m, &im, lb, &InferConfig::cordic(FxpFormat::Q8_4, 5)).unwrap();
    // frozen from the first run on the shipped checkpoint
    assert_eq!((r.correct, c.correct), GOLDEN_CORRECT);
    assert!(c.quantization.iter().all(|s| s.saturated == 0 && s.prescaled == 0));
}

const GOLDEN_CORRECT: (usize, usize) = (983, 967);
