use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"
run_id = "tiny"

[auction]
m = 3

[data]
samples = 400

[stage1]
batch_size = 32
iterations = 40
coverage_probes = 500

[menu]
k = 6
d = 2
iterations = 30
batch_size = 64
eval_every = 10

[baseline]
k = 7

[baseline.price]
iterations = 20
batch_size = 64

[baseline.rochetnet]
k = 6
iterations = 10
batch_size = 32

[eval]
probes = 200

[checkpoints]
flow_every = 15
menu_every = 7
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn root(&self) -> &Path {
        self.dir.path()
    }

    fn run_dir(&self) -> PathBuf {
        self.root().join("runs").join("tiny")
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_bundleflow"))
            .arg("--config")
            .arg(self.root().join("tiny.toml"))
            .args(args)
            .env("BUNDLEFLOW_OUT", self.root().join("runs"))
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.run_dir().join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn lines(text: &str) -> usize {
    text.lines().filter(|l| !l.trim().is_empty()).count()
}

fn without_wall_time(mut v: Value) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(map) => {
                map.retain(|k, _| k != "wall_ms");
                map.values_mut().for_each(strip);
            }
            Value::Array(xs) => xs.iter_mut().for_each(strip),
            _ => {}
        }
    }
    strip(&mut v);
    v
}

fn log_without_wall_time(csv: &str) -> Vec<String> {
    let mut rows = csv.lines();
    let header: Vec<&str> = rows.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "wall_ms");
    rows.map(|r| {
        r.split(',')
            .enumerate()
            .filter(|(i, _)| Some(*i) != col)
            .map(|(_, f)| f)
            .collect::<Vec<_>>()
            .join(",")
    })
    .collect()
}

#[test]
fn gen_data_writes_a_95_5_split_and_effective_config() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data"]);
    assert_eq!(lines(&sb.read("data/train.jsonl")), 380);
    assert_eq!(lines(&sb.read("data/test.jsonl")), 20);
    let meta: Value = serde_json::from_str(&sb.read("data/meta.json")).unwrap();
    assert_eq!(meta["source"], "synthetic");
    let effective = sb.read("data/config.toml");
    assert!(effective.contains("samples = 400"));
    assert!(effective.contains("[flow]"));
}

#[test]
fn cats_import_records_its_source() {
    let sb = Sandbox::new();
    let mut paths = Vec::new();
    for i in 0..20 {
        let p = sb.root().join(format!("bidder{i}.txt"));
        let price = 10.0 + i as f64;
        fs::write(
            &p,
            format!("goods 3\nbids 2\ndummy 1\n0 {price} 0 1 3 #\n1 {} 2 3 #\n", price / 2.0),
        )
        .unwrap();
        paths.push(format!("\"{}\"", p.display()));
    }
    let cats = format!("data.cats=[{}]", paths.join(","));
    sb.ok(&["--set", &cats, "gen-data"]);
    let meta: Value = serde_json::from_str(&sb.read("data/meta.json")).unwrap();
    assert_eq!(meta["source"], "cats");
    assert_eq!(meta["cats_files"].as_array().unwrap().len(), 20);
    assert_eq!(meta["train"].as_u64().unwrap() + meta["test"].as_u64().unwrap(), 20);
    assert_eq!(meta["v_max"].as_f64().unwrap(), 29.0);
}

#[test]
fn config_errors_exit_2_and_name_the_field() {
    let sb = Sandbox::new();
    let out = sb.run(&["--set", "auction.distribution=lognormal", "gen-data"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("auction.distribution"));
}

#[test]
fn malformed_config_exits_3() {
    let sb = Sandbox::new();
    let bad = sb.root().join("bad.toml");
    fs::write(&bad, "[auction\nm = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_bundleflow"))
        .arg("--config")
        .arg(&bad)
        .arg("gen-data")
        .env("BUNDLEFLOW_OUT", sb.root().join("runs"))
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_cats_file_exits_3() {
    let sb = Sandbox::new();
    let p = sb.root().join("broken.txt");
    fs::write(&p, "goods 3\ndummy 1\n0 abc 0 1 3 #\n").unwrap();
    let out = sb.run(&["--set", &format!("data.cats=[\"{}\"]", p.display()), "gen-data"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn missing_inputs_exit_4() {
    let sb = Sandbox::new();
    assert_eq!(code(&sb.run(&["train-flow"])), 0);
    // Flow exists but no dataset yet.
    assert_eq!(code(&sb.run(&["train-menu"])), 4);
    let sb = Sandbox::new();
    sb.ok(&["gen-data"]);
    assert_eq!(code(&sb.run(&["train-menu"])), 4);
    assert_eq!(code(&sb.run(&["evaluate"])), 4);
    assert_eq!(code(&sb.run(&["export-snapshots", "--interval", "5"])), 4);
    assert_eq!(code(&sb.run(&["train-flow", "--resume"])), 4);
}

#[test]
fn resumed_runs_match_uninterrupted_runs() {
    let straight = Sandbox::new();
    straight.ok(&["gen-data"]);
    straight.ok(&["train-flow"]);
    straight.ok(&["train-menu"]);

    let halted = Sandbox::new();
    halted.ok(&["gen-data"]);
    let msg = halted.ok(&["train-flow", "--halt-at", "17"]);
    assert!(msg.contains("halted at iteration 17"), "{msg}");
    halted.ok(&["train-flow", "--resume"]);
    halted.ok(&["train-menu", "--halt-at", "11"]);
    halted.ok(&["train-menu", "--resume"]);

    for ckpt in ["flow/checkpoint.json", "menu/checkpoint.json"] {
        let a: Value = serde_json::from_str(&straight.read(ckpt)).unwrap();
        let b: Value = serde_json::from_str(&halted.read(ckpt)).unwrap();
        assert!(without_wall_time(a) == without_wall_time(b), "{ckpt} differs after resume");
    }
    for log in ["flow/log.csv", "menu/log.csv"] {
        assert_eq!(
            log_without_wall_time(&straight.read(log)),
            log_without_wall_time(&halted.read(log)),
            "{log}"
        );
    }
    let a: Value = serde_json::from_str(&straight.read("menu/report.json")).unwrap();
    let b: Value = serde_json::from_str(&halted.read("menu/report.json")).unwrap();
    assert_eq!(without_wall_time(a), without_wall_time(b));
}

#[test]
fn pipeline_reports_sweeps_and_snapshots() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data"]);
    sb.ok(&["train-flow"]);
    sb.ok(&["train-menu"]);
    assert!(sb.run_dir().join("flow/coverage.json").exists());

    let first: Value = serde_json::from_str(&sb.ok(&["evaluate"])).unwrap();
    let second: Value = serde_json::from_str(&sb.ok(&["evaluate"])).unwrap();
    assert_eq!(without_wall_time(first.clone()), without_wall_time(second));
    assert_eq!(first["dsic_pass_rate"], 1.0);
    assert_eq!(first["ir_pass_rate"], 1.0);
    assert_eq!(first["certified_dsic"], true);

    let table = sb.ok(&["sweep", "--param", "d", "--values", "1,2", "--seeds", "0"]);
    assert_eq!(lines(&table), 3, "header plus one row per value:\n{table}");
    assert!(table.starts_with("d,seed_0,median"));
    assert_eq!(sb.read("sweep/d.csv"), table);

    let out = sb.ok(&["export-snapshots", "--interval", "7"]);
    assert!(out.contains("wrote 5 snapshots"), "{out}");
    for it in [7, 14, 21, 28, 30] {
        assert!(sb.run_dir().join(format!("snapshots/{it}.csv")).exists());
        assert!(sb.run_dir().join(format!("snapshots/{it}.json")).exists());
    }
    let last: Value = serde_json::from_str(&sb.read("snapshots/30.json")).unwrap();
    let report: Value = serde_json::from_str(&sb.read("menu/report.json")).unwrap();
    assert_eq!(last["test_revenue"], report["test_revenue"]);
    assert!(sb.run_dir().join("snapshots/field.csv").exists());

    let out = sb.ok(&["export-snapshots", "--interval", "1000"]);
    assert!(out.contains("wrote 1 snapshots"), "{out}");
}

#[test]
fn baselines_train_and_evaluate() {
    let sb = Sandbox::new();
    sb.ok(&["gen-data"]);
    sb.ok(&["train-baseline", "grand"]);
    assert!(!sb.run_dir().join("baseline-grand/log.csv").exists());
    let ckpt: Value = serde_json::from_str(&sb.read("baseline-grand/checkpoint.json")).unwrap();
    assert!(ckpt["payload"]["log"].as_array().unwrap().is_empty());
    assert!(ckpt["payload"]["grand"]["price"].as_f64().unwrap() > 0.0);

    for kind in ["big", "small"] {
        sb.ok(&["train-baseline", kind]);
        let report: Value = serde_json::from_str(&sb.read(&format!("baseline-{kind}/report.json"))).unwrap();
        assert_eq!(report["dsic_pass_rate"], 1.0, "{kind}");
        assert_eq!(report["ir_pass_rate"], 1.0, "{kind}");
        assert!(sb.run_dir().join(format!("baseline-{kind}/log.csv")).exists());
    }

    sb.ok(&["train-baseline", "rochetnet"]);
    let report: Value = serde_json::from_str(&sb.read("baseline-rochetnet/report.json")).unwrap();
    assert!(report["certified_dsic"].is_boolean());

    let ckpt = sb.run_dir().join("baseline-small/checkpoint.json");
    let again: Value = serde_json::from_str(&sb.ok(&["evaluate", "--checkpoint", ckpt.to_str().unwrap()])).unwrap();
    let stored: Value = serde_json::from_str(&sb.read("baseline-small/report.json")).unwrap();
    assert_eq!(without_wall_time(again), without_wall_time(stored));
}

#[test]
fn overrides_change_the_recorded_config() {
    let sb = Sandbox::new();
    sb.ok(&["--set", "data.samples=100", "--set", "run_id=tiny", "gen-data"]);
    assert_eq!(lines(&sb.read("data/train.jsonl")), 95);
    assert!(sb.read("data/config.toml").contains("samples = 100"));
}
