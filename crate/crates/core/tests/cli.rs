use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cordic-rpe"))
}

fn fixture(p: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(p)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn data_lines(s: &str) -> Vec<&str> {
    s.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn pareto_rows_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for p in [&a, &b] {
        let o = run(&["pareto", "--fn", "tanh", "--formats", "Q8.4,Q16.8", "--iters", "1..16", "--grid", "exhaustive", "--out", p.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(data_lines(&text).len(), 1 + 32);
    assert!(text.contains("seed"));
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(run(&["pareto", "--formats", "Q8.4"]).status.code(), Some(2));
    assert_eq!(run(&["pareto", "--fn", "tanh", "--formats", "Q9.9"]).status.code(), Some(2));
    let o = run(&["infer", "--model", "m.json", "--data", "a", "b", "--engine", "bogus"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_files_are_named() {
    let o = run(&["schedule", "--network", "/no/such/net.txt"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/net.txt"));
    let o = run(&["infer", "--model", "/no/model.json", "--data", "/no/a", "/no/b"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/model.json"));
}

#[test]
fn bad_network_line_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("n.net");
    std::fs::write(&p, "a conv k=3 cin=3 cout=4 h=8 w=8\n\nb conv k=oops\n").unwrap();
    let o = run(&["schedule", "--network", p.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"), "{}", String::from_utf8_lossy(&o.stderr));
}

fn op_cycles(csv: &str) -> Vec<(String, u64)> {
    let lines = data_lines(csv);
    let head: Vec<&str> = lines[0].split(',').collect();
    let col = head.iter().position(|h| *h == "op_cycles").unwrap();
    // the layer description column is quoted and holds no commas
    lines[1..]
        .iter()
        .filter(|l| !l.starts_with("total") && !l.contains(",host,"))
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[col].parse().unwrap())
        })
        .collect()
}

#[test]
fn schedule_fixture() {
    let net = fixture("vgg16-cifar100.net");
    let o = run(&["schedule", "--network", net.to_str().unwrap()]);
    assert!(o.status.success());
    let cycles: Vec<u64> = op_cycles(&stdout(&o)).into_iter().map(|(_, c)| c).collect();
    assert_eq!(
        cycles,
        [1728, 36864, 18432, 36864, 18432, 36864, 36864, 18432, 36864, 36864, 36864, 36864, 36864, 2048, 16384, 4096]
    );
}

#[test]
fn schedule_prune_and_bigger_array() {
    let net = fixture("vgg16-cifar100.net");
    let json = |extra: &[&str]| -> serde_json::Value {
        let mut args = vec!["schedule", "--network", net.to_str().unwrap(), "--json"];
        args.extend_from_slice(extra);
        let o = run(&args);
        assert!(o.status.success());
        serde_json::from_slice(&o.stdout).unwrap()
    };
    let full = json(&[]);
    let cut = json(&["--prune", "4:9"]);
    let conv_macs = |v: &serde_json::Value| -> u64 {
        v["entries"].as_array().unwrap().iter().filter(|e| e["kind"] == "conv").map(|e| e["scheduled_macs"].as_u64().unwrap()).sum()
    };
    assert_eq!((conv_macs(&full) - conv_macs(&cut)) * 9, conv_macs(&full) * 4);
    let big = json(&["--array", "64x64"]);
    let c11 = |v: &serde_json::Value| v["entries"][0]["op_cycles"].as_u64().unwrap();
    assert!(c11(&big) <= c11(&full));
    assert_eq!((full["array"]["rows"].as_u64(), cut["pruning"]["num"].as_u64()), (Some(32), Some(4)));
}

#[test]
fn simulate_one_layer() {
    let net = fixture("vgg16-cifar100.net");
    let o = run(&["simulate", "--network", net.to_str().unwrap(), "--layer", "C1_1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = stdout(&o);
    assert!(s.contains("C1_1") && s.contains("1728") && s.contains("1732"), "{s}");
}

#[test]
fn infer_subset() {
    let m = fixture("lenet5/manifest.json");
    let (i, l) = (fixture("mnist/t10k-images-idx3-ubyte.gz"), fixture("mnist/t10k-labels-idx1-ubyte.gz"));
    let args = ["infer", "--model", m.to_str().unwrap(), "--data", i.to_str().unwrap(), l.to_str().unwrap(), "--limit", "200"];
    let a = run(&args);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let out = stdout(&a);
    assert!(out.contains("engine=cordic") && out.contains("n=200"), "{out}");
    assert_eq!(out, stdout(&run(&args)));
    let o = run(&["infer", "--model", m.to_str().unwrap(), "--data", i.to_str().unwrap(), l.to_str().unwrap(), "--limit", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_flag() {
    let o = run(&["--version"]);
    assert!(stdout(&o).starts_with("cordic-rpe "));
}
